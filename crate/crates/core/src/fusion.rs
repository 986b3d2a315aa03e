//! Late-fusion network: a small conv stack over an image patch and a dense
//! stack over tabular covariates, concatenated into a single-output head.
//!
//! Everything is `f64` with hand-written backpropagation so gradients can be
//! checked against finite differences.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::ClassWeights;
use crate::covariates::CovariateVector;
use crate::metrics::{accuracy, mae, EvalResult, MetricError, Task};
use crate::occurrence::Country;
use crate::raster::{RasterPatch, LANDCOVER, N_LANDCOVER_CLASSES};

/// Probability clamp used before taking logs.
pub const PROB_EPS: f64 = 1e-12;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SDMF";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("layer {layer}: expected {expected}, got {got}")]
    Shape { layer: String, expected: String, got: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("negative value {value} at index {index}")]
    Negative { index: usize, value: f64 },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageBranch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv layer; each conv is followed by ReLU and max-pool.
    pub conv_channels: Vec<usize>,
    /// Odd kernel side; convolutions use same-padding.
    pub kernel: usize,
    pub pool: usize,
    /// F_img.
    pub out_features: usize,
}

impl Default for ImageBranch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 16,
            width: 16,
            conv_channels: vec![8, 16],
            kernel: 3,
            pool: 2,
            out_features: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularBranch {
    pub in_features: usize,
    pub hidden: Vec<usize>,
    /// F_tab.
    pub out_features: usize,
}

impl Default for TabularBranch {
    fn default() -> Self {
        Self {
            in_features: 10,
            hidden: vec![32],
            out_features: 16,
        }
    }
}

/// Space the regression head predicts in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetScale {
    /// Head predicts `ln(1 + count)`; squared error there is MSLE on counts.
    #[default]
    Log1p,
    /// Head predicts the raw count.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub image: ImageBranch,
    pub tabular: TabularBranch,
    pub task: Task,
    pub target_scale: TargetScale,
    pub l2_lambda: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            image: ImageBranch::default(),
            tabular: TabularBranch::default(),
            task: Task::Classification,
            target_scale: TargetScale::Log1p,
            l2_lambda: 1e-4,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn concat_len(&self) -> usize {
        self.image.out_features + self.tabular.out_features
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        Layout::new(self).map(|_| ())
    }

    pub fn n_params(&self) -> Result<usize, FusionError> {
        Ok(Layout::new(self)?.n_params)
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    nin: usize,
    nout: usize,
    w_off: usize,
    b_off: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    kernel: usize,
    pool: usize,
    convs: Vec<ConvLayer>,
    img_dense: DenseLayer,
    tabs: Vec<DenseLayer>,
    head: DenseLayer,
    n_params: usize,
}

impl Layout {
    fn new(cfg: &FusionConfig) -> Result<Self, FusionError> {
        let img = &cfg.image;
        let tab = &cfg.tabular;
        let bad = |m: String| Err(FusionError::Config(m));
        if img.in_channels == 0 || img.height == 0 || img.width == 0 {
            return bad("image input dimensions must be positive".into());
        }
        if img.kernel == 0 || img.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", img.kernel));
        }
        if img.pool == 0 {
            return bad("pool must be >= 1".into());
        }
        if img.out_features == 0 || tab.out_features == 0 {
            return bad("F_img and F_tab must be >= 1".into());
        }
        if tab.in_features == 0 {
            return bad("tabular branch needs at least one input feature".into());
        }
        if !(cfg.l2_lambda >= 0.0 && cfg.l2_lambda.is_finite()) {
            return bad(format!("l2_lambda must be finite and >= 0, got {}", cfg.l2_lambda));
        }
        let mut off = 0;
        let dense = |nin: usize, nout: usize, off: &mut usize| {
            let l = DenseLayer {
                nin,
                nout,
                w_off: *off,
                b_off: *off + nin * nout,
            };
            *off += nin * nout + nout;
            l
        };

        let (mut c, mut h, mut w) = (img.in_channels, img.height, img.width);
        let mut convs = Vec::new();
        for (i, &cout) in img.conv_channels.iter().enumerate() {
            if cout == 0 {
                return bad(format!("conv{} has zero channels", i + 1));
            }
            let (oh, ow) = (h / img.pool, w / img.pool);
            if oh == 0 || ow == 0 {
                return bad(format!("conv{}: {}x{} input is smaller than pool {}", i + 1, h, w, img.pool));
            }
            let n_w = cout * c * img.kernel * img.kernel;
            convs.push(ConvLayer {
                cin: c,
                cout,
                h,
                w,
                oh,
                ow,
                w_off: off,
                b_off: off + n_w,
            });
            off += n_w + cout;
            (c, h, w) = (cout, oh, ow);
        }
        let img_dense = dense(c * h * w, img.out_features, &mut off);
        let mut tabs = Vec::new();
        let mut nin = tab.in_features;
        for (i, &n) in tab.hidden.iter().chain(std::iter::once(&tab.out_features)).enumerate() {
            if n == 0 {
                return bad(format!("tab{} has zero units", i + 1));
            }
            tabs.push(dense(nin, n, &mut off));
            nin = n;
        }
        let head = dense(cfg.concat_len(), 1, &mut off);
        Ok(Self {
            kernel: img.kernel,
            pool: img.pool,
            convs,
            img_dense,
            tabs,
            head,
            n_params: off,
        })
    }
}

/// All weights and biases of both branches and the head, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: FusionConfig,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: FusionConfig) -> Result<Self, FusionError> {
        let n = Layout::new(&config)?.n_params;
        Ok(Self {
            config,
            values: vec![0.0; n],
        })
    }

    /// He-normal weights, zero biases; regression heads start with bias 1 so
    /// the ReLU output is live at initialisation.
    pub fn init(config: FusionConfig) -> Result<Self, FusionError> {
        let layout = Layout::new(&config)?;
        let mut values = vec![0.0; layout.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k2 = layout.kernel * layout.kernel;
        let mut fill = |off: usize, n: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut values[off..off + n] {
                *v = d.sample(rng);
            }
        };
        for c in &layout.convs {
            fill(c.w_off, c.cout * c.cin * k2, c.cin * k2, &mut rng);
        }
        for d in std::iter::once(&layout.img_dense).chain(&layout.tabs).chain(std::iter::once(&layout.head)) {
            fill(d.w_off, d.nin * d.nout, d.nin, &mut rng);
        }
        if config.task == Task::Regression {
            values[layout.head.b_off] = 1.0;
        }
        Ok(Self { config, values })
    }

    pub fn from_flat(config: FusionConfig, values: Vec<f64>) -> Result<Self, FusionError> {
        let n = Layout::new(&config)?.n_params;
        if values.len() != n {
            return Err(FusionError::Length(n, values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::Config(format!("parameter {i} is not finite")));
        }
        Ok(Self { config, values })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Versioned binary: magic, version, config, then LE f64 parameters.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), FusionError> {
        let c = &self.config;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let u = |v: usize, out: &mut W| out.write_all(&(v as u64).to_le_bytes());
        out.write_all(&[task_code(c.task), scale_code(c.target_scale)])?;
        for v in [c.image.in_channels, c.image.height, c.image.width, c.image.kernel, c.image.pool, c.image.out_features] {
            u(v, &mut out)?;
        }
        u(c.image.conv_channels.len(), &mut out)?;
        for &v in &c.image.conv_channels {
            u(v, &mut out)?;
        }
        u(c.tabular.in_features, &mut out)?;
        u(c.tabular.out_features, &mut out)?;
        u(c.tabular.hidden.len(), &mut out)?;
        for &v in &c.tabular.hidden {
            u(v, &mut out)?;
        }
        out.write_all(&c.l2_lambda.to_le_bytes())?;
        out.write_all(&c.seed.to_le_bytes())?;
        u(self.values.len(), &mut out)?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, FusionError> {
        let bad = |m: &str| FusionError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b2 = [0u8; 2];
        input.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != CHECKPOINT_VERSION {
            return Err(FusionError::Checkpoint(format!("unsupported version {version}")));
        }
        input.read_exact(&mut b2)?;
        let task = match b2[0] {
            0 => Task::Classification,
            1 => Task::Regression,
            _ => return Err(bad("unknown task code")),
        };
        let target_scale = match b2[1] {
            0 => TargetScale::Log1p,
            1 => TargetScale::Raw,
            _ => return Err(bad("unknown target scale code")),
        };
        let mut b8 = [0u8; 8];
        let mut u = |input: &mut R| -> Result<usize, FusionError> {
            input.read_exact(&mut b8)?;
            let v = u64::from_le_bytes(b8);
            usize::try_from(v).ok().filter(|&v| v < 1 << 32).ok_or_else(|| bad("size field out of range"))
        };
        let in_channels = u(&mut input)?;
        let height = u(&mut input)?;
        let width = u(&mut input)?;
        let kernel = u(&mut input)?;
        let pool = u(&mut input)?;
        let img_out = u(&mut input)?;
        let n = u(&mut input)?;
        let conv_channels = (0..n).map(|_| u(&mut input)).collect::<Result<Vec<_>, _>>()?;
        let tab_in = u(&mut input)?;
        let tab_out = u(&mut input)?;
        let n = u(&mut input)?;
        let hidden = (0..n).map(|_| u(&mut input)).collect::<Result<Vec<_>, _>>()?;
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8)?;
        let l2_lambda = f64::from_le_bytes(b8);
        input.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        input.read_exact(&mut b8)?;
        let n_values = u64::from_le_bytes(b8) as usize;
        let config = FusionConfig {
            image: ImageBranch {
                in_channels,
                height,
                width,
                conv_channels,
                kernel,
                pool,
                out_features: img_out,
            },
            tabular: TabularBranch {
                in_features: tab_in,
                hidden,
                out_features: tab_out,
            },
            task,
            target_scale,
            l2_lambda,
            seed,
        };
        let expected = Layout::new(&config)?.n_params;
        if n_values != expected {
            return Err(FusionError::Checkpoint(format!("{n_values} parameters stored, config needs {expected}")));
        }
        let mut values = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            input.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        Self::from_flat(config, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FusionError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn task_code(t: Task) -> u8 {
    match t {
        Task::Classification => 0,
        Task::Regression => 1,
    }
}

fn scale_code(s: TargetScale) -> u8 {
    match s {
        TargetScale::Log1p => 0,
        TargetScale::Raw => 1,
    }
}

/// Number of network input channels a patch expands to: landcover bands are
/// one-hot encoded, every other band is passed through.
pub fn encoded_channels(patch: &RasterPatch) -> usize {
    patch
        .bands()
        .iter()
        .map(|b| if b.name == LANDCOVER { N_LANDCOVER_CLASSES } else { 1 })
        .sum()
}

/// A patch and covariate vector flattened into network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    /// Channel-major `C × H × W`.
    pub image: Vec<f64>,
    pub tabular: Vec<f64>,
}

impl FusionInput {
    pub fn encode(cfg: &FusionConfig, patch: &RasterPatch, covariates: &CovariateVector) -> Result<Self, FusionError> {
        let channels = encoded_channels(patch);
        if channels != cfg.image.in_channels {
            return Err(shape_err("conv1", cfg.image.in_channels, channels, "input channels"));
        }
        if (patch.height(), patch.width()) != (cfg.image.height, cfg.image.width) {
            return Err(FusionError::Shape {
                layer: "conv1".into(),
                expected: format!("{}x{} patch", cfg.image.height, cfg.image.width),
                got: format!("{}x{} patch", patch.height(), patch.width()),
            });
        }
        let hw = patch.height() * patch.width();
        let mut image = Vec::with_capacity(channels * hw);
        for band in patch.bands() {
            if band.name == LANDCOVER {
                let start = image.len();
                image.resize(start + N_LANDCOVER_CLASSES * hw, 0.0);
                for (i, &p) in band.pixels.iter().enumerate() {
                    image[start + p as usize * hw + i] = 1.0;
                }
            } else {
                image.extend(band.pixels.iter().map(|&p| p as f64));
            }
        }
        let input = Self {
            image,
            tabular: covariates.values.clone(),
        };
        input.check(cfg)?;
        Ok(input)
    }

    fn check(&self, cfg: &FusionConfig) -> Result<(), FusionError> {
        let n_img = cfg.image.in_channels * cfg.image.height * cfg.image.width;
        if self.image.len() != n_img {
            return Err(shape_err("conv1", n_img, self.image.len(), "image values"));
        }
        if self.tabular.len() != cfg.tabular.in_features {
            return Err(shape_err("tab1", cfg.tabular.in_features, self.tabular.len(), "covariates"));
        }
        Ok(())
    }
}

fn shape_err(layer: &str, expected: usize, got: usize, what: &str) -> FusionError {
    FusionError::Shape {
        layer: layer.to_string(),
        expected: format!("{expected} {what}"),
        got: format!("{got} {what}"),
    }
}

/// Intermediate activations of one forward pass.
struct Cache {
    /// Input of each conv layer.
    conv_in: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
    /// For each pooled output, the index of the winning activation.
    pool_arg: Vec<Vec<usize>>,
    flat: Vec<f64>,
    img_pre: Vec<f64>,
    tab_in: Vec<Vec<f64>>,
    tab_pre: Vec<Vec<f64>>,
    concat: Vec<f64>,
    z: f64,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dense_forward(p: &[f64], l: &DenseLayer, x: &[f64]) -> Vec<f64> {
    (0..l.nout)
        .map(|o| {
            let w = &p[l.w_off + o * l.nin..l.w_off + (o + 1) * l.nin];
            p[l.b_off + o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Accumulates weight/bias gradients and returns the gradient w.r.t. `x`.
fn dense_backward(p: &[f64], l: &DenseLayer, x: &[f64], dpre: &[f64], g: &mut [f64], want_dx: bool) -> Vec<f64> {
    let mut dx = if want_dx { vec![0.0; l.nin] } else { Vec::new() };
    for (o, &d) in dpre.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        g[l.b_off + o] += d;
        let row = l.w_off + o * l.nin;
        for i in 0..l.nin {
            g[row + i] += d * x[i];
            if want_dx {
                dx[i] += d * p[row + i];
            }
        }
    }
    dx
}

impl Layout {
    fn forward(&self, p: &[f64], input: &FusionInput) -> Cache {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut conv_in = Vec::with_capacity(self.convs.len());
        let mut conv_pre = Vec::with_capacity(self.convs.len());
        let mut pool_arg = Vec::with_capacity(self.convs.len());
        let mut x = input.image.clone();
        for c in &self.convs {
            let (h, w) = (c.h as isize, c.w as isize);
            let mut pre = vec![0.0; c.cout * c.h * c.w];
            for co in 0..c.cout {
                let b = p[c.b_off + co];
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = b;
                        for ci in 0..c.cin {
                            let wbase = c.w_off + (co * c.cin + ci) * k * k;
                            let ibase = ci * c.h * c.w;
                            for dy in 0..k {
                                let iy = y + dy as isize - pad;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for dx in 0..k {
                                    let ix = xx + dx as isize - pad;
                                    if ix < 0 || ix >= w {
                                        continue;
                                    }
                                    s += p[wbase + dy * k + dx] * x[ibase + (iy * w + ix) as usize];
                                }
                            }
                        }
                        pre[(co * c.h + y as usize) * c.w + xx as usize] = s;
                    }
                }
            }
            // ReLU then max-pool, remembering argmax positions
            let mut pooled = vec![0.0; c.cout * c.oh * c.ow];
            let mut arg = vec![0usize; pooled.len()];
            for co in 0..c.cout {
                for py in 0..c.oh {
                    for px in 0..c.ow {
                        let mut best = (f64::NEG_INFINITY, 0);
                        for dy in 0..self.pool {
                            for dx in 0..self.pool {
                                let idx = (co * c.h + py * self.pool + dy) * c.w + px * self.pool + dx;
                                let v = relu(pre[idx]);
                                if v > best.0 {
                                    best = (v, idx);
                                }
                            }
                        }
                        let o = (co * c.oh + py) * c.ow + px;
                        pooled[o] = best.0;
                        arg[o] = best.1;
                    }
                }
            }
            conv_in.push(std::mem::replace(&mut x, pooled));
            conv_pre.push(pre);
            pool_arg.push(arg);
        }
        let flat = x;
        let img_pre = dense_forward(p, &self.img_dense, &flat);
        let mut t = input.tabular.clone();
        let mut tab_in = Vec::with_capacity(self.tabs.len());
        let mut tab_pre = Vec::with_capacity(self.tabs.len());
        for l in &self.tabs {
            let pre = dense_forward(p, l, &t);
            tab_in.push(std::mem::replace(&mut t, pre.iter().map(|&v| relu(v)).collect()));
            tab_pre.push(pre);
        }
        let mut concat: Vec<f64> = img_pre.iter().map(|&v| relu(v)).collect();
        concat.extend_from_slice(&t);
        let z = dense_forward(p, &self.head, &concat)[0];
        Cache {
            conv_in,
            conv_pre,
            pool_arg,
            flat,
            img_pre,
            tab_in,
            tab_pre,
            concat,
            z,
        }
    }

    /// Backpropagate `dL/dz` through the cached pass into `g`.
    fn backward(&self, p: &[f64], cache: &Cache, dz: f64, g: &mut [f64]) {
        let dconcat = dense_backward(p, &self.head, &cache.concat, &[dz], g, true);
        let f_img = self.img_dense.nout;

        // tabular branch
        let mut d = dconcat[f_img..].to_vec();
        for (i, l) in self.tabs.iter().enumerate().rev() {
            let dpre: Vec<f64> = d.iter().zip(&cache.tab_pre[i]).map(|(g, &z)| if z > 0.0 { *g } else { 0.0 }).collect();
            d = dense_backward(p, l, &cache.tab_in[i], &dpre, g, i > 0);
        }

        // image branch
        let dpre: Vec<f64> = dconcat[..f_img]
            .iter()
            .zip(&cache.img_pre)
            .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
            .collect();
        let mut dx = dense_backward(p, &self.img_dense, &cache.flat, &dpre, g, !self.convs.is_empty());
        let k = self.kernel;
        let pad = (k / 2) as isize;
        for (li, c) in self.convs.iter().enumerate().rev() {
            let pre = &cache.conv_pre[li];
            let mut dpre = vec![0.0; pre.len()];
            for (o, &idx) in cache.pool_arg[li].iter().enumerate() {
                if pre[idx] > 0.0 {
                    dpre[idx] += dx[o];
                }
            }
            let input = &cache.conv_in[li];
            let want_dx = li > 0;
            let mut din = if want_dx { vec![0.0; input.len()] } else { Vec::new() };
            let (h, w) = (c.h as isize, c.w as isize);
            for co in 0..c.cout {
                for y in 0..h {
                    for xx in 0..w {
                        let gv = dpre[(co * c.h + y as usize) * c.w + xx as usize];
                        if gv == 0.0 {
                            continue;
                        }
                        g[c.b_off + co] += gv;
                        for ci in 0..c.cin {
                            let wbase = c.w_off + (co * c.cin + ci) * k * k;
                            let ibase = ci * c.h * c.w;
                            for dy in 0..k {
                                let iy = y + dy as isize - pad;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for ddx in 0..k {
                                    let ix = xx + ddx as isize - pad;
                                    if ix < 0 || ix >= w {
                                        continue;
                                    }
                                    let ii = ibase + (iy * w + ix) as usize;
                                    g[wbase + dy * k + ddx] += gv * input[ii];
                                    if want_dx {
                                        din[ii] += gv * p[wbase + dy * k + ddx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx = din;
        }
    }
}

/// Apply the task head activation to the pre-activation `z`.
fn activate(task: Task, z: f64) -> f64 {
    match task {
        Task::Classification => sigmoid(z),
        Task::Regression => relu(z),
    }
}

impl ModelParams {
    /// Head output before mapping back to counts: a probability for
    /// classification, the (possibly log-scale) regression value otherwise.
    pub fn output(&self, input: &FusionInput) -> Result<f64, FusionError> {
        input.check(&self.config)?;
        let layout = Layout::new(&self.config)?;
        Ok(activate(self.config.task, layout.forward(&self.values, input).z))
    }

    /// Probability of presence, or predicted count.
    pub fn predict(&self, input: &FusionInput) -> Result<f64, FusionError> {
        let out = self.output(input)?;
        Ok(match (self.config.task, self.config.target_scale) {
            (Task::Regression, TargetScale::Log1p) => out.exp_m1(),
            _ => out,
        })
    }

    pub fn predict_batch(&self, samples: &[TrainSample]) -> Result<Vec<f64>, FusionError> {
        samples.par_iter().map(|s| self.predict(&s.input)).collect()
    }

    /// Concatenated branch features for one input (length F_img + F_tab).
    pub fn features(&self, input: &FusionInput) -> Result<Vec<f64>, FusionError> {
        input.check(&self.config)?;
        Ok(Layout::new(&self.config)?.forward(&self.values, input).concat)
    }
}

/// Encode and predict in one step.
pub fn forward(params: &ModelParams, image: &RasterPatch, covariates: &CovariateVector) -> Result<f64, FusionError> {
    params.predict(&FusionInput::encode(params.config(), image, covariates)?)
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1-ε]`.
pub fn bce_loss(y: &[bool], p: &[f64]) -> Result<f64, FusionError> {
    if y.len() != p.len() {
        return Err(FusionError::Length(y.len(), p.len()));
    }
    if y.is_empty() {
        return Err(FusionError::Empty);
    }
    let s: f64 = y.iter().zip(p).map(|(&t, &q)| bce_one(t, q)).sum();
    Ok(s / y.len() as f64)
}

fn bce_one(y: bool, p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean squared logarithmic error on non-negative values.
pub fn msle_loss(y: &[f64], yhat: &[f64]) -> Result<f64, FusionError> {
    if y.len() != yhat.len() {
        return Err(FusionError::Length(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(FusionError::Empty);
    }
    for (index, &value) in y.iter().chain(yhat).enumerate() {
        if value < 0.0 || value.is_nan() {
            return Err(FusionError::Negative {
                index: index % y.len(),
                value,
            });
        }
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| (a.ln_1p() - b.ln_1p()).powi(2)).sum::<f64>() / y.len() as f64)
}

/// `weight · base + λ‖θ‖²`.
pub fn total_loss(base_loss: f64, weight: f64, l2_lambda: f64, params: &[f64]) -> f64 {
    weight * base_loss + l2_lambda * params.iter().map(|v| v * v).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_target: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(skip)]
    pub class_weights: ClassWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_target: 1e-3,
            warmup_steps: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            batch_size: 16,
            class_weights: ClassWeights::uniform(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: String| Err(FusionError::Config(m));
        if !(self.lr_init > 0.0 && self.lr_target > 0.0 && self.lr_init.is_finite() && self.lr_target.is_finite()) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_init > self.lr_target {
            return bad(format!("lr_init {} exceeds lr_target {}", self.lr_init, self.lr_target));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// Linear warm-up from `lr_init` to `lr_target`, then constant.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.warmup_steps {
        return cfg.lr_target;
    }
    cfg.lr_init + (cfg.lr_target - cfg.lr_init) * step as f64 / cfg.warmup_steps as f64
}

/// One encoded training example. `target` is 0/1 for classification and a
/// raw count for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: FusionInput,
    pub target: f64,
    pub country: Country,
}

fn internal_target(cfg: &FusionConfig, target: f64) -> f64 {
    match (cfg.task, cfg.target_scale) {
        (Task::Regression, TargetScale::Log1p) => target.max(0.0).ln_1p(),
        _ => target,
    }
}

/// Weighted mean per-sample loss plus the L2 term, and its gradient:
/// `(1/B) Σ w(country_i) · ℓ_i + λ‖θ‖²`, where `ℓ` is BCE or squared error.
pub fn loss_and_gradient(params: &ModelParams, batch: &[TrainSample], weights: &ClassWeights) -> Result<(f64, Vec<f64>), FusionError> {
    if batch.is_empty() {
        return Err(FusionError::Empty);
    }
    let cfg = &params.config;
    let layout = Layout::new(cfg)?;
    for s in batch {
        s.input.check(cfg)?;
    }
    let p = &params.values;
    let per_sample: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|s| {
            let cache = layout.forward(p, &s.input);
            let w = weights.get(s.country);
            let (loss, dz) = match cfg.task {
                Task::Classification => {
                    let q = sigmoid(cache.z);
                    let y = s.target >= 0.5;
                    let clamped = q <= PROB_EPS || q >= 1.0 - PROB_EPS;
                    // d(bce∘σ)/dz = q - y away from the clamp
                    let dz = if clamped { 0.0 } else { q - y as u8 as f64 };
                    (bce_one(y, q), dz)
                }
                Task::Regression => {
                    let out = relu(cache.z);
                    let r = out - internal_target(cfg, s.target);
                    (r * r, if cache.z > 0.0 { 2.0 * r } else { 0.0 })
                }
            };
            let mut g = vec![0.0; p.len()];
            if dz != 0.0 {
                layout.backward(p, &cache, w * dz, &mut g);
            }
            (w * loss, g)
        })
        .collect();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let lambda = cfg.l2_lambda;
    for (a, &v) in grad.iter_mut().zip(p) {
        *a = *a / n + 2.0 * lambda * v;
    }
    Ok((total_loss(loss / n, 1.0, lambda, p), grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Train MAE (regression, on counts) or accuracy (classification).
    pub train_metric: f64,
    pub test_metric: Option<f64>,
    /// Mean objective over the epoch's batches.
    pub loss: f64,
}

/// `epoch,train_metric,test_metric,loss`
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<(), FusionError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_metric", "test_metric", "loss"])?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            r.train_metric.to_string(),
            r.test_metric.map(|v| v.to_string()).unwrap_or_default(),
            r.loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy at 0.5 or MAE on counts, matching the configured task.
pub fn task_metric(params: &ModelParams, samples: &[TrainSample]) -> Result<f64, FusionError> {
    let pred = params.predict_batch(samples)?;
    Ok(match params.config.task {
        Task::Classification => {
            let y: Vec<bool> = samples.iter().map(|s| s.target >= 0.5).collect();
            accuracy(&y, &pred, 0.5)?
        }
        Task::Regression => {
            let y: Vec<f64> = samples.iter().map(|s| s.target).collect();
            mae(&y, &pred)?
        }
    })
}

pub fn evaluate(params: &ModelParams, samples: &[TrainSample]) -> Result<EvalResult, FusionError> {
    let pred = params.predict_batch(samples)?;
    Ok(match params.config.task {
        Task::Classification => {
            let y: Vec<bool> = samples.iter().map(|s| s.target >= 0.5).collect();
            EvalResult::classification(&y, &pred)?
        }
        Task::Regression => {
            let y: Vec<f64> = samples.iter().map(|s| s.target).collect();
            EvalResult::regression(&y, &pred)?
        }
    })
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

/// Mini-batch Adam with the warm-up schedule and per-country loss weights.
pub fn train(mut params: ModelParams, train_set: &[TrainSample], test_set: &[TrainSample], cfg: &TrainConfig) -> Result<Trained, FusionError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(FusionError::Empty);
    }
    if params.config.task == Task::Classification {
        if let Some(s) = train_set.iter().chain(test_set).find(|s| s.target != 0.0 && s.target != 1.0) {
            return Err(FusionError::Config(format!("classification target {} is not 0 or 1", s.target)));
        }
    } else if let Some(s) = train_set.iter().chain(test_set).find(|s| !(s.target >= 0.0)) {
        return Err(FusionError::Config(format!("regression target {} is negative", s.target)));
    }

    let n = params.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grad) = loss_and_gradient(&params, &batch, &cfg.class_weights)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(FusionError::Diverged { epoch, step, loss });
            }
            let lr = lr_at(step, cfg);
            step += 1;
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let c1 = 1.0 - b1.powi(step as i32);
            let c2 = 1.0 - b2.powi(step as i32);
            for (((p, g), mi), vi) in params.values.iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            }
            epoch_loss += loss;
            n_batches += 1;
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::Diverged {
                epoch,
                step,
                loss: f64::NAN,
            });
        }
        let test_metric = if test_set.is_empty() {
            None
        } else {
            Some(task_metric(&params, test_set)?)
        };
        trace.push(TraceRow {
            epoch,
            train_metric: task_metric(&params, train_set)?,
            test_metric,
            loss: epoch_loss / n_batches as f64,
        });
        log::debug!("epoch {epoch}: {:?}", trace.last());
    }
    Ok(Trained { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Band;
    use rand::Rng;

    fn small_config(task: Task, seed: u64) -> FusionConfig {
        FusionConfig {
            image: ImageBranch {
                in_channels: 2,
                height: 6,
                width: 5,
                conv_channels: vec![3, 4],
                kernel: 3,
                pool: 2,
                out_features: 5,
            },
            tabular: TabularBranch {
                in_features: 4,
                hidden: vec![6],
                out_features: 3,
            },
            task,
            target_scale: TargetScale::Log1p,
            l2_lambda: 0.01,
            seed,
        }
    }

    fn random_input(cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> FusionInput {
        let n = cfg.image.in_channels * cfg.image.height * cfg.image.width;
        FusionInput {
            image: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            tabular: (0..cfg.tabular.in_features).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn weights_of<const N: usize>(w: [(Country, f64); N]) -> ClassWeights {
        ClassWeights { weights: w.into_iter().collect() }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn gradient_check(task: Task, seed: u64) -> f64 {
        let cfg = small_config(task, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut params = ModelParams::init(cfg.clone()).unwrap();
        for v in params.flat_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let batch: Vec<TrainSample> = (0..4)
            .map(|i| TrainSample {
                input: random_input(&cfg, &mut rng),
                target: if task == Task::Classification { (i % 2) as f64 } else { rng.random_range(0.0..20.0) },
                country: Country::ALL[i % 3],
            })
            .collect();
        let weights = weights_of([(Country::Australia, 0.5), (Country::SouthAfrica, 2.0), (Country::CostaRica, 1.3)]);
        let (_, grad) = loss_and_gradient(&params, &batch, &weights).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let orig = params.flat()[i];
            params.flat_mut()[i] = orig + h;
            let up = loss_and_gradient(&params, &batch, &weights).unwrap().0;
            params.flat_mut()[i] = orig - h;
            let down = loss_and_gradient(&params, &batch, &weights).unwrap().0;
            params.flat_mut()[i] = orig;
            worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * h)));
        }
        worst
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..3 {
            for task in [Task::Classification, Task::Regression] {
                let e = gradient_check(task, seed);
                assert!(e < 1e-4, "{task} seed {seed}: max rel err {e}");
            }
        }
    }

    #[test]
    fn concat_length_and_zero_params() {
        let mut cfg = FusionConfig::default();
        assert_eq!(cfg.concat_len(), 80);
        cfg.image = ImageBranch {
            in_channels: 1,
            height: 8,
            width: 8,
            ..Default::default()
        };
        cfg.tabular.in_features = 3;
        let p = ModelParams::init(cfg.clone()).unwrap();
        let patch = RasterPatch::single("ndvi", 8, 8, vec![0.3; 64]).unwrap();
        let cov = CovariateVector::new(vec![1.0, 2.0, 3.0]);
        let input = FusionInput::encode(&cfg, &patch, &cov).unwrap();
        assert_eq!(p.features(&input).unwrap().len(), 80);

        let zeros = ModelParams::zeros(cfg.clone()).unwrap();
        assert_eq!(forward(&zeros, &patch, &cov).unwrap(), 0.5);
        cfg.task = Task::Regression;
        let zeros = ModelParams::zeros(cfg).unwrap();
        assert_eq!(forward(&zeros, &patch, &cov).unwrap(), 0.0);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let mut cfg = FusionConfig::default();
        cfg.image.in_channels = 1;
        cfg.image.height = 8;
        cfg.image.width = 8;
        cfg.tabular.in_features = 2;
        let p = ModelParams::zeros(cfg).unwrap();
        let cov = CovariateVector::new(vec![0.0, 0.0]);
        let lc = RasterPatch::single(LANDCOVER, 8, 8, vec![1.0; 64]).unwrap();
        match forward(&p, &lc, &cov) {
            Err(FusionError::Shape { layer, .. }) => assert_eq!(layer, "conv1"),
            other => panic!("{other:?}"),
        }
        let patch = RasterPatch::single("ndvi", 8, 8, vec![0.0; 64]).unwrap();
        match forward(&p, &patch, &CovariateVector::new(vec![0.0; 3])) {
            Err(FusionError::Shape { layer, .. }) => assert_eq!(layer, "tab1"),
            other => panic!("{other:?}"),
        }
        let mut bad = FusionConfig::default();
        bad.image.height = 3;
        assert!(matches!(bad.validate(), Err(FusionError::Config(m)) if m.contains("conv2")));
    }

    #[test]
    fn landcover_is_one_hot() {
        let cfg = FusionConfig {
            image: ImageBranch {
                in_channels: 11,
                height: 1,
                width: 2,
                conv_channels: vec![],
                ..Default::default()
            },
            tabular: TabularBranch {
                in_features: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let patch = RasterPatch::new(
            1,
            2,
            vec![
                Band {
                    name: LANDCOVER.into(),
                    pixels: vec![3.0, 9.0],
                },
                Band {
                    name: "ndvi".into(),
                    pixels: vec![0.25, -0.5],
                },
            ],
        )
        .unwrap();
        let x = FusionInput::encode(&cfg, &patch, &CovariateVector::new(vec![1.0])).unwrap();
        assert_eq!(x.image.len(), 22);
        assert_eq!(x.image[3 * 2], 1.0);
        assert_eq!(x.image[9 * 2 + 1], 1.0);
        assert_eq!(x.image.iter().take(20).sum::<f64>(), 2.0);
        assert_eq!(&x.image[20..], &[0.25, -0.5]);
    }

    #[test]
    fn loss_values() {
        assert!(bce_loss(&[true], &[1.0]).unwrap() < 1e-11);
        assert!((bce_loss(&[true, false], &[0.9, 0.2]).unwrap() - 0.164252).abs() < 1e-5);
        assert!((bce_loss(&[true, false], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[], &[]).is_err());
        assert!(bce_loss(&[false], &[1.0]).unwrap().is_finite());

        assert_eq!(msle_loss(&[2.0, 7.0], &[2.0, 7.0]).unwrap(), 0.0);
        assert!((msle_loss(&[0.0], &[1f64.exp() - 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((msle_loss(&[3.0], &[1.0]).unwrap() - 2f64.ln().powi(2)).abs() < 1e-12);
        assert!(matches!(msle_loss(&[1.0], &[-0.5]), Err(FusionError::Negative { .. })));

        assert!((total_loss(0.5, 2.0, 0.1, &[1.0]) - 1.1).abs() < 1e-12);
        assert_eq!(total_loss(0.37, 1.0, 0.0, &[5.0, 3.0]), 0.37);
        assert_eq!(total_loss(0.37, 2.0, 0.0, &[]), 0.74);
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig {
            lr_init: 1e-4,
            lr_target: 1e-2,
            warmup_steps: 100,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(100, &cfg), 1e-2);
        assert_eq!(lr_at(1000, &cfg), 1e-2);
        assert!((lr_at(50, &cfg) - (1e-4 + 1e-2) / 2.0).abs() < 1e-12);
        let no_warmup = TrainConfig { warmup_steps: 0, ..cfg.clone() };
        assert_eq!(lr_at(0, &no_warmup), 1e-2);
        assert!(TrainConfig { lr_init: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn unit_weights_and_no_l2_give_base_loss() {
        let mut cfg = small_config(Task::Classification, 4);
        cfg.l2_lambda = 0.0;
        let params = ModelParams::init(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<TrainSample> = (0..6)
            .map(|i| TrainSample {
                input: random_input(&cfg, &mut rng),
                target: (i % 2) as f64,
                country: Country::ALL[i % 3],
            })
            .collect();
        let (loss, _) = loss_and_gradient(&params, &batch, &ClassWeights::uniform()).unwrap();
        let p: Vec<f64> = batch.iter().map(|s| params.predict(&s.input).unwrap()).collect();
        let y: Vec<bool> = batch.iter().map(|s| s.target == 1.0).collect();
        assert!((loss - bce_loss(&y, &p).unwrap()).abs() < 1e-12);

        // up-weighting the country that carries the errors raises the loss
        let heavy = weights_of([(Country::Australia, 3.0), (Country::SouthAfrica, 1.0), (Country::CostaRica, 1.0)]);
        assert!(loss_and_gradient(&params, &batch, &heavy).unwrap().0 >= loss);
    }

    fn toy_classification() -> Vec<TrainSample> {
        let cfg = toy_config(Task::Classification);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..20)
            .map(|i| {
                let mut x = random_input(&cfg, &mut rng);
                let label = i % 2;
                x.tabular[0] = if label == 1 { 1.0 + x.tabular[0].abs() } else { -1.0 - x.tabular[0].abs() };
                TrainSample {
                    input: x,
                    target: label as f64,
                    country: Country::Australia,
                }
            })
            .collect()
    }

    fn toy_config(task: Task) -> FusionConfig {
        FusionConfig {
            l2_lambda: 0.0,
            ..small_config(task, 3)
        }
    }

    fn fast() -> TrainConfig {
        TrainConfig {
            lr_init: 1e-3,
            lr_target: 1e-2,
            warmup_steps: 20,
            epochs: 200,
            batch_size: 5,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = toy_classification();
        let params = ModelParams::init(toy_config(Task::Classification)).unwrap();
        let out = train(params, &data, &[], &fast()).unwrap();
        let first = out.trace.iter().position(|r| r.train_metric == 1.0);
        assert!(first.is_some(), "final accuracy {}", out.trace.last().unwrap().train_metric);
        assert!(out.trace.iter().all(|r| r.test_metric.is_none()));
    }

    #[test]
    fn constant_regression_target_is_learned() {
        let cfg = toy_config(Task::Regression);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<TrainSample> = (0..20)
            .map(|_| TrainSample {
                input: random_input(&cfg, &mut rng),
                target: 12.0,
                country: Country::SouthAfrica,
            })
            .collect();
        let out = train(ModelParams::init(cfg).unwrap(), &data, &data[..5], &fast()).unwrap();
        let last = out.trace.last().unwrap();
        assert!(last.train_metric < 0.1 * 12.0, "{last:?}");
        assert!(last.test_metric.unwrap() < 0.1 * 12.0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_classification();
        let cfg = TrainConfig { epochs: 10, ..fast() };
        let a = train(ModelParams::init(toy_config(Task::Classification)).unwrap(), &data, &data[..4], &cfg).unwrap();
        let b = train(ModelParams::init(toy_config(Task::Classification)).unwrap(), &data, &data[..4], &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = toy_config(Task::Regression);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data: Vec<TrainSample> = (0..4)
            .map(|_| TrainSample {
                input: random_input(&cfg, &mut rng),
                target: 1.0,
                country: Country::Australia,
            })
            .collect();
        data[0].input.tabular[0] = 1e300;
        let mut p = ModelParams::init(FusionConfig {
            target_scale: TargetScale::Raw,
            ..cfg
        })
        .unwrap();
        p.flat_mut().iter_mut().for_each(|v| *v = 1e10);
        assert!(matches!(train(p, &data, &[], &fast()), Err(FusionError::Diverged { .. })));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = ModelParams::init(small_config(Task::Regression, 8)).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SDMF");
        let q = ModelParams::read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        buf[4] = 9;
        assert!(matches!(ModelParams::read_from(buf.as_slice()), Err(FusionError::Checkpoint(_))));
        assert!(ModelParams::read_from(&buf[..20]).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![
            TraceRow {
                epoch: 1,
                train_metric: 0.5,
                test_metric: Some(0.25),
                loss: 1.5,
            },
            TraceRow {
                epoch: 2,
                train_metric: 0.75,
                test_metric: None,
                loss: 1.0,
            },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_metric,test_metric,loss\n1,0.5,0.25,1.5\n2,0.75,,1\n");
    }
}
