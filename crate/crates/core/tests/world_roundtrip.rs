//! The synthetic world survives a trip through its on-disk formats, and the
//! library stages give the same answers on reloaded data.

use std::collections::BTreeMap;
use std::fs::File;

use sdm_core::balance::{adaptive_oversample, class_weights, OversampleConfig};
use sdm_core::covariates::CovariateTable;
use sdm_core::fusion::{train, FusionConfig, FusionInput, ImageBranch, ModelParams, TabularBranch, TargetScale, TrainConfig, TrainSample};
use sdm_core::geo::Grid;
use sdm_core::metrics::Task;
use sdm_core::occurrence::{aggregate_counts, load_occurrences};
use sdm_core::pseudoabsence::{generate_pseudo_absences, PseudoAbsenceConfig};
use sdm_core::raster::{dominant_class, patch_file_name, Modality, RasterPatch};
use sdm_core::testkit::{generate_world, SyntheticWorld, WorldConfig};

fn small_world(seed: u64) -> SyntheticWorld {
    let mut visit = vec![0.1; 10];
    visit[3] = 1.0;
    visit[7] = 1.0;
    let cfg = WorldConfig {
        bbox: sdm_core::geo::BoundingBox::new(-20.0, 130.0, -19.6, 130.6).unwrap(),
        visit_prob: visit,
        lambda: 5.0,
        ..Default::default()
    };
    generate_world(&cfg, seed).unwrap()
}

#[test]
fn disk_formats_reproduce_the_in_memory_world() {
    let world = small_world(4);
    let dir = tempfile::tempdir().unwrap();
    world.write_to_dir(dir.path()).unwrap();

    let grid = Grid::read_csv(File::open(dir.path().join("grid.csv")).unwrap()).unwrap();
    assert_eq!(grid.len(), world.grid.len());
    for (a, b) in grid.cells().iter().zip(world.grid.cells()) {
        assert_eq!(a.key(), b.key());
        assert!((a.centroid.lat() - b.centroid.lat()).abs() < 1e-12);
        assert!((a.centroid.lon() - b.centroid.lon()).abs() < 1e-12);
    }

    let loaded = load_occurrences(dir.path().join("occurrences.csv")).unwrap();
    assert!(loaded.rejected.is_empty());
    assert_eq!(loaded.records.len(), world.records.len());
    let from_disk = aggregate_counts(&loaded.records, &grid).samples;
    let in_memory = world.presences();
    assert_eq!(from_disk.len(), in_memory.len());
    for (a, b) in from_disk.iter().zip(&in_memory) {
        assert_eq!((a.key(), a.country, a.count), (b.key(), b.country, b.count));
    }

    let cov = CovariateTable::read_csv(File::open(dir.path().join("covariates.csv")).unwrap()).unwrap();
    assert_eq!(cov.len(), world.cells.len());
    for c in &world.cells {
        let v = cov.get(c.country, c.cell.key()).unwrap();
        for (x, y) in v.values.iter().zip(&c.covariates.values) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    // landcover read back from patch files drives the same pseudo-absences
    let mut lc = BTreeMap::new();
    for (i, c) in world.cells.iter().enumerate() {
        for m in Modality::ALL {
            let path = dir.path().join("patches").join(patch_file_name(c.country, c.cell.key(), m));
            assert_eq!(RasterPatch::load(&path).unwrap(), world.patch(i, m));
        }
        let path = dir.path().join("patches").join(patch_file_name(c.country, c.cell.key(), Modality::Landcover));
        lc.insert(c.cell.key(), dominant_class(&RasterPatch::load(path).unwrap()).unwrap());
    }
    let cfg = PseudoAbsenceConfig { seed: 4, ..Default::default() };
    let a = generate_pseudo_absences(&grid, &from_disk, &lc, &cfg).unwrap();
    let b = generate_pseudo_absences(&world.grid, &in_memory, &world.landcover_map(), &cfg).unwrap();
    let keys = |s: &sdm_core::pseudoabsence::Selection| s.points.iter().map(|p| p.cell.key()).collect::<Vec<_>>();
    assert_eq!(keys(&a), keys(&b));
}

#[test]
fn trained_checkpoint_predicts_identically_after_reload() {
    let world = small_world(9);
    let presences = world.presences();
    let os = adaptive_oversample(&presences, &OversampleConfig { n_clusters: 3, seed: 9, ..Default::default() }).unwrap();
    let cfg = FusionConfig {
        image: ImageBranch {
            in_channels: 1,
            height: 8,
            width: 8,
            conv_channels: vec![3],
            kernel: 3,
            pool: 2,
            out_features: 4,
        },
        tabular: TabularBranch {
            in_features: 10,
            hidden: vec![8],
            out_features: 4,
        },
        task: Task::Regression,
        target_scale: TargetScale::Log1p,
        l2_lambda: 1e-3,
        seed: 9,
    };
    let samples: Vec<TrainSample> = os
        .samples
        .iter()
        .map(|s| {
            let i = world.index_of(s.key()).unwrap();
            TrainSample {
                input: FusionInput::encode(&cfg, &world.patch(i, Modality::Ndvi), &s.covariates).unwrap(),
                target: s.count as f64,
                country: s.country,
            }
        })
        .collect();
    let tc = TrainConfig {
        epochs: 5,
        class_weights: class_weights(&os.samples).unwrap(),
        seed: 9,
        ..Default::default()
    };
    let out = train(ModelParams::init(cfg).unwrap(), &samples, &samples, &tc).unwrap();
    assert_eq!(out.trace.len(), 5);
    assert!(out.trace.last().unwrap().loss < out.trace[0].loss);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    out.params.save(&path).unwrap();
    let back = ModelParams::load(&path).unwrap();
    assert_eq!(back.predict_batch(&samples).unwrap(), out.params.predict_batch(&samples).unwrap());
}
