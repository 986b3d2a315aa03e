//! Multi-band pixel patches: spectral indices, resizing, windows, augmentation
//! and the `ASDM` binary patch format.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the categorical band holding land-cover class IDs.
pub const LANDCOVER: &str = "landcover";
pub const N_LANDCOVER_CLASSES: usize = 10;

const MAGIC: &[u8; 4] = b"ASDM";
const NAME_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("patch has no `{0}` band")]
    MissingBand(String),
    #[error("band `{name}` has {got} pixels, expected {expected}")]
    BandSize { name: String, got: usize, expected: usize },
    #[error("patch dimensions must be positive, got {0}x{1}")]
    ZeroDims(usize, usize),
    #[error("band `{0}` holds a non-finite value")]
    NonFinite(String),
    #[error("landcover value {0} is not a class ID in 0..=9")]
    BadClass(f32),
    #[error("window {win_h}x{win_w} does not fit in a {h}x{w} patch")]
    WindowTooLarge { win_h: usize, win_w: usize, h: usize, w: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("band name `{0}` longer than 16 bytes")]
    LongName(String),
    #[error("dimension {0} does not fit the u16 patch header")]
    TooLarge(usize),
    #[error("not an ASDM patch file")]
    BadMagic,
    #[error("duplicate band `{0}`")]
    DuplicateBand(String),
    #[error("unknown modality `{0}` (expected rgb, lc or ndvi)")]
    UnknownModality(String),
    #[error("augmentation config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Image source feeding the image branch of a fusion model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "rgb")]
    Rgb,
    #[serde(rename = "lc")]
    Landcover,
    #[serde(rename = "ndvi")]
    Ndvi,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Landcover, Modality::Ndvi];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Landcover => "lc",
            Modality::Ndvi => "ndvi",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = RasterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "lc" | "landcover" => Ok(Modality::Landcover),
            "ndvi" => Ok(Modality::Ndvi),
            _ => Err(RasterError::UnknownModality(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub name: String,
    pub pixels: Vec<f32>,
}

impl Band {
    pub fn is_categorical(&self) -> bool {
        self.name == LANDCOVER
    }
}

/// Row-major bands sharing one height and width.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterPatch {
    height: usize,
    width: usize,
    bands: Vec<Band>,
}

impl RasterPatch {
    pub fn new(height: usize, width: usize, bands: Vec<Band>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::ZeroDims(height, width));
        }
        for (i, b) in bands.iter().enumerate() {
            if b.pixels.len() != height * width {
                return Err(RasterError::BandSize {
                    name: b.name.clone(),
                    got: b.pixels.len(),
                    expected: height * width,
                });
            }
            if bands[..i].iter().any(|o| o.name == b.name) {
                return Err(RasterError::DuplicateBand(b.name.clone()));
            }
            if b.is_categorical() {
                if let Some(&v) = b.pixels.iter().find(|&&v| !is_class_id(v)) {
                    return Err(RasterError::BadClass(v));
                }
            } else if b.pixels.iter().any(|v| !v.is_finite()) {
                return Err(RasterError::NonFinite(b.name.clone()));
            }
        }
        Ok(Self { height, width, bands })
    }

    /// Single-band constructor.
    pub fn single(name: &str, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, RasterError> {
        Self::new(
            height,
            width,
            vec![Band {
                name: name.to_string(),
                pixels,
            }],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn band(&self, name: &str) -> Result<&Band, RasterError> {
        self.bands
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| RasterError::MissingBand(name.to_string()))
    }

    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.bands[band].pixels[y * self.width + x]
    }

    /// Plain-text matrix of one band, one image row per line.
    pub fn dump_band(&self, name: &str) -> Result<String, RasterError> {
        let band = self.band(name)?;
        let mut s = String::new();
        for row in band.pixels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        Ok(s)
    }

    fn map_bands(&self, height: usize, width: usize, mut f: impl FnMut(&Band) -> Vec<f32>) -> Self {
        Self {
            height,
            width,
            bands: self
                .bands
                .iter()
                .map(|b| Band {
                    name: b.name.clone(),
                    pixels: f(b),
                })
                .collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), RasterError> {
        let dim = |v: usize| u16::try_from(v).map_err(|_| RasterError::TooLarge(v));
        out.write_all(MAGIC)?;
        out.write_all(&dim(self.bands.len())?.to_le_bytes())?;
        out.write_all(&dim(self.height)?.to_le_bytes())?;
        out.write_all(&dim(self.width)?.to_le_bytes())?;
        for b in &self.bands {
            let name = b.name.as_bytes();
            if name.len() > NAME_LEN {
                return Err(RasterError::LongName(b.name.clone()));
            }
            let mut padded = [0u8; NAME_LEN];
            padded[..name.len()].copy_from_slice(name);
            out.write_all(&padded)?;
            let mut buf = Vec::with_capacity(b.pixels.len() * 4);
            for v in &b.pixels {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, RasterError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RasterError::BadMagic);
        }
        let mut u16buf = [0u8; 2];
        let mut next_u16 = |r: &mut R| -> Result<usize, RasterError> {
            r.read_exact(&mut u16buf)?;
            Ok(u16::from_le_bytes(u16buf) as usize)
        };
        let n_bands = next_u16(&mut input)?;
        let height = next_u16(&mut input)?;
        let width = next_u16(&mut input)?;
        let mut bands = Vec::with_capacity(n_bands);
        for _ in 0..n_bands {
            let mut name = [0u8; NAME_LEN];
            input.read_exact(&mut name)?;
            let end = name.iter().position(|&c| c == 0).unwrap_or(NAME_LEN);
            let name = String::from_utf8_lossy(&name[..end]).into_owned();
            let mut raw = vec![0u8; height * width * 4];
            input.read_exact(&mut raw)?;
            let pixels = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            bands.push(Band { name, pixels });
        }
        Self::new(height, width, bands)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), RasterError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, RasterError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn is_class_id(v: f32) -> bool {
    v.fract() == 0.0 && (0.0..N_LANDCOVER_CLASSES as f32).contains(&v)
}

fn normalized_difference(patch: &RasterPatch, a: &str, b: &str, out: &str) -> Result<RasterPatch, RasterError> {
    let pa = &patch.band(a)?.pixels;
    let pb = &patch.band(b)?.pixels;
    let pixels = pa
        .iter()
        .zip(pb)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            let den = x + y;
            if den == 0.0 {
                0.0
            } else {
                ((x - y) / den).clamp(-1.0, 1.0) as f32
            }
        })
        .collect();
    RasterPatch::single(out, patch.height, patch.width, pixels)
}

/// File name of one cell's patch for one modality, e.g. `AU_3_7_rgb.asdm`.
pub fn patch_file_name(country: crate::occurrence::Country, key: crate::geo::CellKey, modality: Modality) -> String {
    format!("{}_{}_{}_{}.asdm", country.code(), key.row, key.col, modality.as_str())
}

/// Vegetation index `(nir - red) / (nir + red)`; zero denominators give 0.
pub fn ndvi(patch: &RasterPatch) -> Result<RasterPatch, RasterError> {
    normalized_difference(patch, "nir", "red", "ndvi")
}

/// Water index `(green - nir) / (green + nir)`; zero denominators give 0.
pub fn ndwi(patch: &RasterPatch) -> Result<RasterPatch, RasterError> {
    normalized_difference(patch, "green", "nir", "ndwi")
}

/// Most frequent landcover class; ties go to the lower class ID.
pub fn dominant_class(patch: &RasterPatch) -> Result<u8, RasterError> {
    let band = patch.band(LANDCOVER)?;
    let mut hist = [0usize; N_LANDCOVER_CLASSES];
    for &v in &band.pixels {
        hist[v as usize] += 1;
    }
    let best = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or(0);
    Ok(best as u8)
}

// Half-pixel-centre source coordinate for an output index.
fn src_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

fn sample_bilinear(pixels: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |yy: usize, xx: usize| pixels[yy * w + xx] as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

fn sample_nearest(pixels: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let yy = y.round().clamp(0.0, (h - 1) as f64) as usize;
    let xx = x.round().clamp(0.0, (w - 1) as f64) as usize;
    pixels[yy * w + xx]
}

/// Resample every band through an output→source coordinate map.
fn warp(patch: &RasterPatch, out_h: usize, out_w: usize, map: impl Fn(usize, usize) -> (f64, f64)) -> RasterPatch {
    let (h, w) = (patch.height, patch.width);
    patch.map_bands(out_h, out_w, |b| {
        let mut out = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = map(y, x);
                out.push(if b.is_categorical() {
                    sample_nearest(&b.pixels, h, w, sy, sx)
                } else {
                    sample_bilinear(&b.pixels, h, w, sy, sx)
                });
            }
        }
        out
    })
}

/// Resize to `(target_h, target_w)`: bilinear for continuous bands,
/// nearest-neighbour for landcover.
pub fn resize_patch(patch: &RasterPatch, target_h: usize, target_w: usize) -> Result<RasterPatch, RasterError> {
    if target_h == 0 || target_w == 0 {
        return Err(RasterError::ZeroDims(target_h, target_w));
    }
    if (target_h, target_w) == (patch.height, patch.width) {
        return Ok(patch.clone());
    }
    let (h, w) = (patch.height, patch.width);
    Ok(warp(patch, target_h, target_w, |y, x| {
        (src_coord(y, h, target_h), src_coord(x, w, target_w))
    }))
}

/// All fully contained windows in row-major order.
pub fn sliding_window(patch: &RasterPatch, win_h: usize, win_w: usize, stride: usize) -> Result<Vec<RasterPatch>, RasterError> {
    if stride == 0 {
        return Err(RasterError::ZeroStride);
    }
    if win_h == 0 || win_w == 0 {
        return Err(RasterError::ZeroDims(win_h, win_w));
    }
    let (h, w) = (patch.height, patch.width);
    if win_h > h || win_w > w {
        return Err(RasterError::WindowTooLarge { win_h, win_w, h, w });
    }
    let mut out = Vec::new();
    for top in (0..=h - win_h).step_by(stride) {
        for left in (0..=w - win_w).step_by(stride) {
            out.push(patch.map_bands(win_h, win_w, |b| {
                (top..top + win_h)
                    .flat_map(|y| b.pixels[y * w + left..y * w + left + win_w].iter().copied())
                    .collect()
            }));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub hflip_prob: f64,
    /// Rotation range in degrees.
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    /// Candidate output sizes; empty keeps the input size.
    pub resize_targets: Vec<(usize, usize)>,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            rotation_deg: (-10.0, 10.0),
            scale: (0.6, 1.4),
            resize_targets: Vec::new(),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Flip, rotation, scaling and resizing all disabled.
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            resize_targets: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        let bad = |m: &str| Err(RasterError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob must lie in [0, 1]");
        }
        if !(self.rotation_deg.0 <= self.rotation_deg.1) {
            return bad("rotation range is reversed");
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1) {
            return bad("scale range must be positive and ordered");
        }
        if self.resize_targets.iter().any(|&(h, w)| h == 0 || w == 0) {
            return bad("resize targets must be positive");
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

pub fn hflip(patch: &RasterPatch) -> RasterPatch {
    let w = patch.width;
    patch.map_bands(patch.height, w, |b| {
        b.pixels
            .chunks(w)
            .flat_map(|row| row.iter().rev().copied())
            .collect()
    })
}

/// Flip, rotate, scale, then resize, in that order. Exactly four values are
/// drawn from `rng` per call so downstream draws stay aligned.
pub fn augment<R: Rng + ?Sized>(patch: &RasterPatch, cfg: &AugmentationConfig, rng: &mut R) -> RasterPatch {
    let flip_draw: f64 = rng.random();
    let angle = uniform(rng, cfg.rotation_deg);
    let factor = uniform(rng, cfg.scale);
    let pick: f64 = rng.random();

    let mut out = if flip_draw < cfg.hflip_prob {
        hflip(patch)
    } else {
        patch.clone()
    };
    let (h, w) = (out.height, out.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    if angle != 0.0 {
        let (s, c) = angle.to_radians().sin_cos();
        out = warp(&out, h, w, |y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            (cy - s * dx + c * dy, cx + c * dx + s * dy)
        });
    }
    if factor != 1.0 {
        out = warp(&out, h, w, |y, x| (cy + (y as f64 - cy) / factor, cx + (x as f64 - cx) / factor));
    }
    if !cfg.resize_targets.is_empty() {
        let i = ((pick * cfg.resize_targets.len() as f64) as usize).min(cfg.resize_targets.len() - 1);
        let (th, tw) = cfg.resize_targets[i];
        out = resize_patch(&out, th, tw).expect("targets validated positive");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgbn(red: f32, green: f32, nir: f32) -> RasterPatch {
        let b = |n: &str, v: f32| Band {
            name: n.into(),
            pixels: vec![v],
        };
        RasterPatch::new(1, 1, vec![b("red", red), b("green", green), b("blue", 0.1), b("nir", nir)]).unwrap()
    }

    fn ramp(h: usize, w: usize) -> RasterPatch {
        RasterPatch::single("red", h, w, (0..h * w).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn ndvi_values() {
        let v = ndvi(&rgbn(0.2, 0.0, 0.8)).unwrap().bands()[0].pixels[0];
        assert!((v - 0.6).abs() < 1e-6);
        assert_eq!(ndvi(&rgbn(0.4, 0.0, 0.4)).unwrap().bands()[0].pixels[0], 0.0);
        assert_eq!(ndvi(&rgbn(0.0, 0.0, 1.0)).unwrap().bands()[0].pixels[0], 1.0);
        assert_eq!(ndvi(&rgbn(0.0, 0.0, 0.0)).unwrap().bands()[0].pixels[0], 0.0);
    }

    #[test]
    fn ndwi_values() {
        let v = ndwi(&rgbn(0.0, 0.6, 0.2)).unwrap().bands()[0].pixels[0];
        assert!((v - 0.5).abs() < 1e-6);
        assert_eq!(ndwi(&rgbn(0.0, 0.3, 0.3)).unwrap().bands()[0].pixels[0], 0.0);
        assert_eq!(ndwi(&rgbn(0.0, 0.0, 1.0)).unwrap().bands()[0].pixels[0], -1.0);
    }

    #[test]
    fn index_needs_its_bands() {
        let only_red = RasterPatch::single("red", 1, 1, vec![0.1]).unwrap();
        assert!(matches!(ndvi(&only_red), Err(RasterError::MissingBand(b)) if b == "nir"));
        assert!(ndwi(&only_red).is_err());
    }

    #[test]
    fn patch_validation() {
        assert!(RasterPatch::single("landcover", 1, 2, vec![1.0, 10.0]).is_err());
        assert!(RasterPatch::single("landcover", 1, 2, vec![1.0, 2.5]).is_err());
        assert!(RasterPatch::single("red", 1, 2, vec![1.0]).is_err());
        assert!(RasterPatch::single("red", 1, 1, vec![f32::NAN]).is_err());
        assert!(RasterPatch::single("red", 0, 1, vec![]).is_err());
    }

    #[test]
    fn resize_identity_constant_and_bilinear_midpoint() {
        let p = ramp(3, 4);
        assert_eq!(resize_patch(&p, 3, 4).unwrap(), p);

        let c = RasterPatch::single("red", 2, 2, vec![0.7; 4]).unwrap();
        for (h, w) in [(1, 1), (5, 3), (7, 9)] {
            let r = resize_patch(&c, h, w).unwrap();
            assert!(r.bands()[0].pixels.iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }

        let p = RasterPatch::single("red", 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize_patch(&p, 2, 3).unwrap();
        assert_eq!(r.get(0, 0, 1), 0.5);
        assert_eq!(r.get(0, 1, 1), 0.5);
        assert!(resize_patch(&p, 0, 3).is_err());
    }

    #[test]
    fn resize_landcover_keeps_class_ids() {
        let p = RasterPatch::single(LANDCOVER, 2, 2, vec![1.0, 7.0, 3.0, 9.0]).unwrap();
        let r = resize_patch(&p, 5, 7).unwrap();
        assert!(r.bands()[0].pixels.iter().all(|v| [1.0, 7.0, 3.0, 9.0].contains(v)));
    }

    #[test]
    fn window_counts() {
        assert_eq!(sliding_window(&ramp(4, 4), 2, 2, 2).unwrap().len(), 4);
        assert_eq!(sliding_window(&ramp(3, 3), 2, 2, 1).unwrap().len(), 4);
        let whole = sliding_window(&ramp(3, 5), 3, 5, 1).unwrap();
        assert_eq!(whole, vec![ramp(3, 5)]);
        let wins = sliding_window(&ramp(4, 4), 2, 2, 2).unwrap();
        assert_eq!(wins[1].bands()[0].pixels, vec![2.0, 3.0, 6.0, 7.0]);
        assert!(matches!(
            sliding_window(&ramp(3, 3), 4, 2, 1),
            Err(RasterError::WindowTooLarge { .. })
        ));
        assert!(sliding_window(&ramp(3, 3), 2, 2, 0).is_err());
    }

    #[test]
    fn window_count_formula() {
        for (h, w, wh, ww, s) in [(10, 7, 3, 2, 2), (9, 9, 4, 4, 3), (5, 8, 5, 1, 1)] {
            let n = sliding_window(&ramp(h, w), wh, ww, s).unwrap().len();
            assert_eq!(n, ((h - wh) / s + 1) * ((w - ww) / s + 1));
        }
    }

    #[test]
    fn forced_flip_mirrors_and_is_an_involution() {
        let cfg = AugmentationConfig {
            hflip_prob: 1.0,
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            resize_targets: vec![(3, 4)],
            seed: 5,
        };
        let p = ramp(3, 4);
        let mut rng = cfg.rng();
        let once = augment(&p, &cfg, &mut rng);
        assert_eq!(once.bands()[0].pixels[..4], [3.0, 2.0, 1.0, 0.0]);
        let twice = augment(&once, &cfg, &mut rng);
        assert_eq!(twice, p);
    }

    #[test]
    fn degenerate_augmentation_is_identity() {
        let p = ramp(5, 6);
        let cfg = AugmentationConfig::identity();
        let mut rng = cfg.rng();
        for _ in 0..5 {
            assert_eq!(augment(&p, &cfg, &mut rng), p);
        }
    }

    #[test]
    fn augmentation_is_seeded() {
        let p = RasterPatch::new(
            6,
            6,
            vec![
                Band {
                    name: "red".into(),
                    pixels: (0..36).map(|i| (i as f32).sin()).collect(),
                },
                Band {
                    name: LANDCOVER.into(),
                    pixels: (0..36).map(|i| (i % 10) as f32).collect(),
                },
            ],
        )
        .unwrap();
        let cfg = AugmentationConfig {
            resize_targets: vec![(4, 4), (8, 8)],
            seed: 11,
            ..Default::default()
        };
        let a: Vec<_> = {
            let mut rng = cfg.rng();
            (0..4).map(|_| augment(&p, &cfg, &mut rng)).collect()
        };
        let b: Vec<_> = {
            let mut rng = cfg.rng();
            (0..4).map(|_| augment(&p, &cfg, &mut rng)).collect()
        };
        assert_eq!(a, b);
        for out in &a {
            // RasterPatch::new re-validates class IDs
            RasterPatch::new(out.height(), out.width(), out.bands().to_vec()).unwrap();
        }
    }

    #[test]
    fn binary_round_trip_and_layout() {
        let p = RasterPatch::new(
            2,
            3,
            vec![
                Band {
                    name: "nir".into(),
                    pixels: vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.5],
                },
                Band {
                    name: LANDCOVER.into(),
                    pixels: vec![0.0, 1.0, 2.0, 9.0, 9.0, 3.0],
                },
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"ASDM");
        assert_eq!(&buf[4..10], &[2, 0, 2, 0, 3, 0]);
        assert_eq!(&buf[10..13], b"nir");
        assert!(buf[13..26].iter().all(|&b| b == 0));
        assert_eq!(&buf[26..30], &0.5f32.to_le_bytes());
        assert_eq!(buf.len(), 10 + 2 * (16 + 6 * 4));
        assert_eq!(RasterPatch::read_from(buf.as_slice()).unwrap(), p);
        assert!(matches!(RasterPatch::read_from(&b"NOPE"[..]), Err(RasterError::BadMagic)));
    }

    #[test]
    fn dominant_class_breaks_ties_low() {
        let p = RasterPatch::single(LANDCOVER, 2, 2, vec![4.0, 2.0, 4.0, 2.0]).unwrap();
        assert_eq!(dominant_class(&p).unwrap(), 2);
        let p = RasterPatch::single(LANDCOVER, 1, 3, vec![5.0, 5.0, 1.0]).unwrap();
        assert_eq!(dominant_class(&p).unwrap(), 5);
    }

    #[test]
    fn dump_is_a_text_matrix() {
        let s = ramp(2, 3).dump_band("red").unwrap();
        assert_eq!(s, "0 1 2\n3 4 5\n");
    }

    proptest! {
        #[test]
        fn indices_stay_in_unit_range(r in 0.0f32..10.0, g in 0.0f32..10.0, n in 0.0f32..10.0) {
            let p = rgbn(r, g, n);
            let a = ndvi(&p).unwrap().bands()[0].pixels[0];
            let b = ndwi(&p).unwrap().bands()[0].pixels[0];
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert!((-1.0..=1.0).contains(&b));
        }
    }
}
