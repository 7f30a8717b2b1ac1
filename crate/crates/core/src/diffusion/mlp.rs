//! Fully connected conditional noise predictor with hand-written backprop.
//!
//! Input row: noisy tri-axis image, query image, sinusoidal timestep
//! embedding. Two SiLU hidden layers, linear output of tri-axis size. All
//! parameters live in one flat buffer: `w1 b1 w2 b2 w3 b3`, weights
//! row-major `(out, in)`.
//!
//! With a [`PixelPrior`] attached the network output is a residual added to
//! the closed-form noise posterior of an independent per-pixel Gaussian.
//! Without that base a narrow hidden layer cannot represent the near-identity
//! noise map at high signal levels, and the sampler amplifies whatever it
//! misses.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis as NdAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::guidance::{geo_loss, geo_loss_grad};
use super::{Denoiser, DiffusionError, DiffusionSchedule, ScheduleParams};
use crate::extract::{extract_axes_soft, extract_axes_soft_with_vjp, AxisObservation};
use crate::image::{QueryImage, TriAxisImage};

pub const TIME_EMBED_DIM: usize = 32;
const CHECKPOINT_MAGIC: &[u8; 8] = b"AXFGCKPT";
const OPTIMIZER_MAGIC: &[u8; 8] = b"AXFGADAM";
const CHECKPOINT_VERSION: u32 = 2;
const OPTIMIZER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub width: usize,
    pub height: usize,
    pub hidden: usize,
}

impl ArchConfig {
    pub fn x_dim(&self) -> usize {
        self.width * self.height * 3
    }

    pub fn cond_dim(&self) -> usize {
        self.width * self.height
    }

    pub fn in_dim(&self) -> usize {
        self.x_dim() + self.cond_dim() + TIME_EMBED_DIM
    }

    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.in_dim(), self.hidden, self.x_dim());
        h * i + h + h * h + h + o * h + o
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.width == 0 || self.height == 0 || self.hidden == 0 {
            return Err(DiffusionError::InvalidConfig(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Weight of the auxiliary geometric loss on the clean-image estimate;
    /// 0 disables it.
    pub geo_weight: f64,
    pub geo_sharpness: f64,
    /// Batch split count for data-parallel gradients. Results depend on the
    /// count but not on the number of threads.
    pub parallel_chunks: usize,
    /// Fit a [`PixelPrior`] with this variance floor before training;
    /// `None` trains a plain noise predictor.
    pub prior_var_floor: Option<f64>,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            steps: 2000,
            geo_weight: 0.0,
            geo_sharpness: 10.0,
            parallel_chunks: 1,
            prior_var_floor: Some(1e-3),
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.batch_size > 0
            && self.geo_weight >= 0.0
            && self.geo_sharpness > 0.0
            && self.parallel_chunks > 0
            && self.prior_var_floor.is_none_or(|v| v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(DiffusionError::InvalidConfig(format!("invalid optimizer config: {self:?}")))
        }
    }
}

/// Half sines, half cosines over geometrically spaced frequencies.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl Offsets {
    fn of(a: &ArchConfig) -> Self {
        let (i, h, o) = (a.in_dim(), a.hidden, a.x_dim());
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + o,
        }
    }
}

struct Activations {
    x: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    y: Array2<f64>,
}

/// Independent Gaussian per pixel channel, fitted to clean images.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPrior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PixelPrior {
    /// Sample mean and (biased) variance, the variance clamped to `var_floor`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a TriAxisImage>, var_floor: f64) -> Result<Self, DiffusionError> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for img in images {
            let d = img.data();
            if n == 0 {
                sum = vec![0.0; d.len()];
                sq = vec![0.0; d.len()];
            } else if d.len() != sum.len() {
                return Err(DiffusionError::InvalidConfig("prior images differ in size".into()));
            }
            for (k, &v) in d.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(DiffusionError::InvalidConfig("cannot fit a prior to no images".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let var = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / nf - m * m).max(var_floor))
            .collect();
        Ok(Self { mean, var })
    }
}

/// A prior plus the schedule it is evaluated under.
#[derive(Debug, Clone, PartialEq)]
struct PriorTerm {
    prior: PixelPrior,
    alpha_bar: Vec<f64>,
}

impl PriorTerm {
    /// `d eps / d x_t` for pixel `k`; the map is diagonal.
    fn gain(&self, t: usize, k: usize) -> f64 {
        let ab = self.alpha_bar[t];
        (1.0 - ab).sqrt() / (ab * self.prior.var[k] + 1.0 - ab)
    }

    fn add_noise(&self, x_t: &[f64], t: usize, out: &mut [f64]) {
        let sa = self.alpha_bar[t].sqrt();
        for (k, o) in out.iter_mut().enumerate() {
            *o += self.gain(t, k) * (x_t[k] - sa * self.prior.mean[k]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    arch: ArchConfig,
    params: Vec<f64>,
    prior: Option<PriorTerm>,
}

impl MlpDenoiser {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self, DiffusionError> {
        arch.validate()?;
        let off = Offsets::of(&arch);
        let mut params = vec![0.0; off.end];
        let fans = [
            (off.w1, off.w2, arch.in_dim()),
            (off.w2, off.w3, arch.hidden),
            (off.w3, off.end, arch.hidden),
        ];
        for (start, end, fan_in) in fans {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { arch, params, prior: None })
    }

    pub fn with_prior(mut self, prior: PixelPrior, sched: &DiffusionSchedule) -> Result<Self, DiffusionError> {
        let n = self.arch.x_dim();
        if prior.mean.len() != n || prior.var.len() != n {
            return Err(DiffusionError::InvalidConfig(format!(
                "prior has {} pixels, model expects {n}",
                prior.mean.len()
            )));
        }
        if prior.var.iter().any(|v| !(*v > 0.0)) {
            return Err(DiffusionError::InvalidConfig("prior variances must be positive".into()));
        }
        let alpha_bar = (0..=sched.steps()).map(|t| sched.alpha_bar(t)).collect();
        self.prior = Some(PriorTerm { prior, alpha_bar });
        Ok(self)
    }

    /// Zeroes the output layer so the model starts as its prior alone.
    pub fn zero_output_layer(&mut self) {
        let off = Offsets::of(&self.arch);
        self.params[off.w3..off.end].fill(0.0);
    }

    pub fn prior(&self) -> Option<&PixelPrior> {
        self.prior.as_ref().map(|p| &p.prior)
    }

    /// Network output plus the prior term, row `r` at timestep `ts[r]`.
    fn total_noise(&self, act: &Activations, ts: &[usize]) -> Array2<f64> {
        let mut out = act.y.clone();
        if let Some(p) = &self.prior {
            let xd = self.arch.x_dim();
            for (r, &t) in ts.iter().enumerate() {
                let x = act.x.row(r);
                let x = x.as_slice().expect("contiguous rows");
                p.add_noise(&x[..xd], t, out.row_mut(r).into_slice().expect("contiguous rows"));
            }
        }
        out
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weight(&self, start: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[start..start + rows * cols]).unwrap()
    }

    fn bias(&self, start: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[start..start + len])
    }

    pub fn input_row(&self, x_t: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        assert_eq!(x_t.len(), self.arch.x_dim(), "noisy input size mismatch");
        assert_eq!(cond.len(), self.arch.cond_dim(), "conditioning size mismatch");
        let mut row = Vec::with_capacity(self.arch.in_dim());
        row.extend_from_slice(x_t);
        row.extend_from_slice(cond);
        row.extend_from_slice(&time_embedding(t));
        row
    }

    fn forward(&self, x: Array2<f64>) -> Activations {
        let a = &self.arch;
        let off = Offsets::of(a);
        let (h, o) = (a.hidden, a.x_dim());
        let z1 = x.dot(&self.weight(off.w1, h, a.in_dim()).t()) + self.bias(off.b1, h);
        let h1 = z1.mapv(silu);
        let z2 = h1.dot(&self.weight(off.w2, h, h).t()) + self.bias(off.b2, h);
        let h2 = z2.mapv(silu);
        let y = h2.dot(&self.weight(off.w3, o, h).t()) + self.bias(off.b3, o);
        Activations {
            x,
            z1,
            h1,
            z2,
            h2,
            y,
        }
    }

    /// Parameter gradient (flat, same layout as the parameters) and input
    /// gradient for an output cotangent.
    fn backward(&self, act: &Activations, dy: &Array2<f64>, want_params: bool) -> (Vec<f64>, Array2<f64>) {
        let a = &self.arch;
        let off = Offsets::of(a);
        let (h, o) = (a.hidden, a.x_dim());
        let mut grad = Vec::new();
        if want_params {
            grad = vec![0.0; off.end];
        }
        let mut put = |start: usize, m: &Array2<f64>| {
            for (dst, src) in grad[start..start + m.len()].iter_mut().zip(m.iter()) {
                *dst = *src;
            }
        };
        let dh2 = dy.dot(&self.weight(off.w3, o, h));
        let dz2 = &dh2 * &act.z2.mapv(silu_grad);
        let dh1 = dz2.dot(&self.weight(off.w2, h, h));
        let dz1 = &dh1 * &act.z1.mapv(silu_grad);
        let dx = dz1.dot(&self.weight(off.w1, h, a.in_dim()));
        if want_params {
            put(off.w3, &dy.t().dot(&act.h2));
            put(off.b3, &dy.sum_axis(NdAxis(0)).insert_axis(NdAxis(0)));
            put(off.w2, &dz2.t().dot(&act.h1));
            put(off.b2, &dz2.sum_axis(NdAxis(0)).insert_axis(NdAxis(0)));
            put(off.w1, &dz1.t().dot(&act.x));
            put(off.b1, &dz1.sum_axis(NdAxis(0)).insert_axis(NdAxis(0)));
        }
        (grad, dx)
    }

    fn single(&self, x_t: &[f64], t: usize, cond: &QueryImage) -> Activations {
        let row = self.input_row(x_t, t, cond.data());
        let n = row.len();
        self.forward(Array2::from_shape_vec((1, n), row).unwrap())
    }

    pub fn save(&self, path: &Path, sched: &ScheduleParams) -> io::Result<()> {
        let mut buf = Vec::with_capacity(64 + self.params.len() * 4);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.arch.width, self.arch.height, self.arch.hidden, TIME_EMBED_DIM, sched.steps] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&sched.zeta_start.to_le_bytes());
        buf.extend_from_slice(&sched.zeta_end.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for &p in &self.params {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
        match &self.prior {
            None => buf.push(0),
            Some(p) => {
                buf.push(1);
                for v in p.prior.mean.iter().chain(&p.prior.var) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::write(path, buf)
    }

    pub fn load(path: &Path) -> io::Result<(Self, ScheduleParams)> {
        let mut r = io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(invalid("not a denoiser checkpoint"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(invalid(&format!("unsupported checkpoint version {version}")));
        }
        let width = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)? as usize;
        let hidden = read_u32(&mut r)? as usize;
        let time_dim = read_u32(&mut r)? as usize;
        if time_dim != TIME_EMBED_DIM {
            return Err(invalid(&format!("unsupported time embedding size {time_dim}")));
        }
        let steps = read_u32(&mut r)? as usize;
        let zeta_start = read_f64(&mut r)?;
        let zeta_end = read_f64(&mut r)?;
        let arch = ArchConfig {
            width,
            height,
            hidden,
        };
        let n = read_u64(&mut r)? as usize;
        if n != arch.param_count() {
            return Err(invalid(&format!(
                "checkpoint holds {n} parameters, architecture needs {}",
                arch.param_count()
            )));
        }
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let params = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let sp = ScheduleParams {
            steps,
            zeta_start,
            zeta_end,
        };
        let mut model = Self { arch, params, prior: None };
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        match flag[0] {
            0 => {}
            1 => {
                let n = arch.x_dim();
                let mean = (0..n).map(|_| read_f64(&mut r)).collect::<io::Result<Vec<_>>>()?;
                let var = (0..n).map(|_| read_f64(&mut r)).collect::<io::Result<Vec<_>>>()?;
                let sched = DiffusionSchedule::from_params(&sp).map_err(|e| invalid(&e.to_string()))?;
                model = model
                    .with_prior(PixelPrior { mean, var }, &sched)
                    .map_err(|e| invalid(&e.to_string()))?;
            }
            f => return Err(invalid(&format!("bad prior flag {f}"))),
        }
        Ok((model, sp))
    }
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl Denoiser for MlpDenoiser {
    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &QueryImage) -> Vec<f64> {
        let mut y = self.single(x_t, t, cond).y.into_raw_vec_and_offset().0;
        if let Some(p) = &self.prior {
            p.add_noise(x_t, t, &mut y);
        }
        y
    }

    fn noise_vjp(&self, x_t: &[f64], t: usize, cond: &QueryImage, cotangent: &[f64]) -> Vec<f64> {
        let act = self.single(x_t, t, cond);
        let dy = Array2::from_shape_vec((1, cotangent.len()), cotangent.to_vec()).unwrap();
        let (_, dx) = self.backward(&act, &dy, false);
        let mut g: Vec<f64> = dx.row(0).iter().take(self.arch.x_dim()).copied().collect();
        if let Some(p) = &self.prior {
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += p.gain(t, k) * cotangent[k];
            }
        }
        g
    }
}

/// Clean tri-axis image and its conditioning query.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x0: TriAxisImage,
    pub cond: QueryImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub avg: f64,
    pub geo: Option<f64>,
}

/// Optimizer moments plus the divergence tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub initial_loss: Option<f64>,
    pub avg_loss: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            initial_loss: None,
            avg_loss: 0.0,
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        f.write_all(OPTIMIZER_MAGIC)?;
        f.write_all(&OPTIMIZER_VERSION.to_le_bytes())?;
        f.write_all(&(self.step as u64).to_le_bytes())?;
        f.write_all(&self.initial_loss.unwrap_or(f64::NAN).to_le_bytes())?;
        f.write_all(&self.avg_loss.to_le_bytes())?;
        f.write_all(&(self.m.len() as u64).to_le_bytes())?;
        for x in self.m.iter().chain(&self.v) {
            f.write_all(&x.to_le_bytes())?;
        }
        f.flush()
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let mut r = io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != OPTIMIZER_MAGIC {
            return Err(invalid("not an optimizer state file"));
        }
        if read_u32(&mut r)? != OPTIMIZER_VERSION {
            return Err(invalid("unsupported optimizer state version"));
        }
        let step = read_u64(&mut r)? as usize;
        let initial = read_f64(&mut r)?;
        let avg_loss = read_f64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let mut read_vec = || (0..n).map(|_| read_f64(&mut r)).collect::<io::Result<Vec<f64>>>();
        let m = read_vec()?;
        let v = read_vec()?;
        Ok(Self {
            step,
            m,
            v,
            initial_loss: (!initial.is_nan()).then_some(initial),
            avg_loss,
        })
    }
}

/// Resumable training loop. Step `k` draws from its own RNG stream, so a run
/// split across a save/load produces the same batches as an unbroken run.
pub struct Trainer {
    pub model: MlpDenoiser,
    pub state: AdamState,
    pub opt: OptConfig,
    pub seed: u64,
}

struct Batch {
    x: Array2<f64>,
    eps: Array2<f64>,
    t: Vec<usize>,
    idx: Vec<usize>,
}

struct ChunkGrad {
    grad: Vec<f64>,
    mse_sum: f64,
    geo_sum: f64,
    geo_count: usize,
}

impl Trainer {
    pub fn new(model: MlpDenoiser, opt: OptConfig, seed: u64) -> Result<Self, DiffusionError> {
        opt.validate()?;
        let n = model.params.len();
        Ok(Self {
            model,
            state: AdamState::new(n),
            opt,
            seed,
        })
    }

    pub fn resume(model: MlpDenoiser, state: AdamState, opt: OptConfig, seed: u64) -> Result<Self, DiffusionError> {
        opt.validate()?;
        if state.m.len() != model.params.len() || state.v.len() != model.params.len() {
            return Err(DiffusionError::InvalidConfig(
                "optimizer state does not match the model".into(),
            ));
        }
        Ok(Self {
            model,
            state,
            opt,
            seed,
        })
    }

    fn draw_batch(&self, data: &[TrainSample], sched: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Batch {
        let a = &self.model.arch;
        let b = self.opt.batch_size;
        let mut x = Array2::zeros((b, a.in_dim()));
        let mut eps = Array2::zeros((b, a.x_dim()));
        let mut ts = Vec::with_capacity(b);
        let mut idx = Vec::with_capacity(b);
        for r in 0..b {
            let i = rng.random_range(0..data.len());
            let t = rng.random_range(1..=sched.steps());
            let ab = sched.alpha_bar(t);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let s = &data[i];
            let mut row = x.row_mut(r);
            for (k, &x0) in s.x0.data().iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                eps[[r, k]] = e;
                row[k] = sa * x0 + sn * e;
            }
            let xd = a.x_dim();
            for (k, &c) in s.cond.data().iter().enumerate() {
                row[xd + k] = c;
            }
            for (k, &e) in time_embedding(t).iter().enumerate() {
                row[xd + a.cond_dim() + k] = e;
            }
            ts.push(t);
            idx.push(i);
        }
        Batch { x, eps, t: ts, idx }
    }

    fn chunk_grad(
        &self,
        batch: &Batch,
        rows: std::ops::Range<usize>,
        targets: &[Option<AxisObservation>],
        sched: &DiffusionSchedule,
    ) -> ChunkGrad {
        let a = &self.model.arch;
        let b = self.opt.batch_size as f64;
        let norm = b * a.x_dim() as f64;
        let x = batch.x.slice(ndarray::s![rows.clone(), ..]).to_owned();
        let act = self.model.forward(x);
        // the prior term is fixed, so the loss sees the total but only the
        // network part carries parameters
        let eps_hat = self.model.total_noise(&act, &batch.t[rows.clone()]);
        let diff = &eps_hat - &batch.eps.slice(ndarray::s![rows.clone(), ..]);
        let mse_sum = diff.iter().map(|d| d * d).sum::<f64>();
        let mut dy = diff.mapv(|d| 2.0 * d / norm);
        let (mut geo_sum, mut geo_count) = (0.0, 0usize);
        if self.opt.geo_weight > 0.0 {
            for (local, r) in rows.clone().enumerate() {
                let Some(target) = targets[batch.idx[r]] else { continue };
                let t = batch.t[r];
                let ab = sched.alpha_bar(t);
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                let x0: Vec<f64> = (0..a.x_dim())
                    .map(|k| (act.x[[local, k]] - sn * eps_hat[[local, k]]) / sa)
                    .collect();
                let img = TriAxisImage::from_vec(a.width, a.height, x0.iter().map(|v| v.clamp(0.0, 1.0)).collect());
                let mut loss = 0.0;
                let res = extract_axes_soft_with_vjp(&img, self.opt.geo_sharpness, |obs| {
                    loss = geo_loss(obs, &target);
                    geo_loss_grad(obs, &target)
                });
                if let Ok((_, g)) = res {
                    geo_sum += loss;
                    geo_count += 1;
                    let scale = -self.opt.geo_weight * sn / (sa * b);
                    for (k, gv) in g.data().iter().enumerate() {
                        if (0.0..=1.0).contains(&x0[k]) {
                            dy[[local, k]] += scale * gv;
                        }
                    }
                }
            }
        }
        let (grad, _) = self.model.backward(&act, &dy, true);
        ChunkGrad {
            grad,
            mse_sum,
            geo_sum,
            geo_count,
        }
    }

    fn geo_targets(&self, data: &[TrainSample]) -> Vec<Option<AxisObservation>> {
        if self.opt.geo_weight > 0.0 {
            data.iter()
                .map(|s| extract_axes_soft(&s.x0, self.opt.geo_sharpness).ok())
                .collect()
        } else {
            vec![None; data.len()]
        }
    }

    /// Runs `steps` optimizer steps, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &[TrainSample],
        sched: &DiffusionSchedule,
        steps: usize,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>, DiffusionError> {
        if data.is_empty() {
            return Err(DiffusionError::InvalidConfig("training set is empty".into()));
        }
        let a = self.model.arch;
        for s in data {
            if s.x0.width() != a.width || s.x0.height() != a.height || s.cond.width() != a.width || s.cond.height() != a.height {
                return Err(DiffusionError::InvalidConfig(format!(
                    "training images must be {}x{}",
                    a.width, a.height
                )));
            }
        }
        let targets = self.geo_targets(data);
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let step = self.state.step;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(step as u64);
            let batch = self.draw_batch(data, sched, &mut rng);
            let b = self.opt.batch_size;
            let chunks = self.opt.parallel_chunks.min(b);
            let bounds: Vec<std::ops::Range<usize>> = (0..chunks)
                .map(|c| (c * b / chunks)..((c + 1) * b / chunks))
                .collect();
            let parts: Vec<ChunkGrad> = if chunks == 1 {
                vec![self.chunk_grad(&batch, 0..b, &targets, sched)]
            } else {
                bounds
                    .into_par_iter()
                    .map(|r| self.chunk_grad(&batch, r, &targets, sched))
                    .collect()
            };
            let mut grad = vec![0.0; self.model.params.len()];
            let (mut mse, mut geo, mut geo_n) = (0.0, 0.0, 0usize);
            for p in &parts {
                for (g, v) in grad.iter_mut().zip(&p.grad) {
                    *g += v;
                }
                mse += p.mse_sum;
                geo += p.geo_sum;
                geo_n += p.geo_count;
            }
            let loss = mse / (b * a.x_dim()) as f64;
            let geo = (geo_n > 0).then(|| geo / geo_n as f64);
            let total = loss + self.opt.geo_weight * geo.unwrap_or(0.0) * geo_n as f64 / b as f64;
            self.adam_update(&grad);
            let initial = *self.state.initial_loss.get_or_insert(total);
            self.state.avg_loss = if step == 0 {
                total
            } else {
                0.95 * self.state.avg_loss + 0.05 * total
            };
            if !total.is_finite() || self.state.avg_loss > 10.0 * initial {
                return Err(DiffusionError::DivergedLoss {
                    step,
                    avg: self.state.avg_loss,
                    initial,
                });
            }
            let rec = LossRecord {
                step,
                loss,
                avg: self.state.avg_loss,
                geo,
            };
            on_step(&rec);
            log.push(rec);
        }
        Ok(log)
    }

    fn adam_update(&mut self, grad: &[f64]) {
        let o = &self.opt;
        let st = &mut self.state;
        st.step += 1;
        let bc1 = 1.0 - o.beta1.powi(st.step as i32);
        let bc2 = 1.0 - o.beta2.powi(st.step as i32);
        for (((p, g), m), v) in self
            .model
            .params
            .iter_mut()
            .zip(grad)
            .zip(&mut st.m)
            .zip(&mut st.v)
        {
            *m = o.beta1 * *m + (1.0 - o.beta1) * g;
            *v = o.beta2 * *v + (1.0 - o.beta2) * g * g;
            *p -= o.lr * (*m / bc1) / ((*v / bc2).sqrt() + o.adam_eps);
        }
    }
}

/// Noise-prediction loss on a batch drawn from `batch_seed`, with its
/// gradient in the parameters. The batch depends only on the seed, data and
/// schedule, so perturbed models can be compared on the same batch.
pub fn batch_loss_and_grad(
    model: &MlpDenoiser,
    data: &[TrainSample],
    sched: &DiffusionSchedule,
    batch_size: usize,
    batch_seed: u64,
) -> Result<(f64, Vec<f64>), DiffusionError> {
    if data.is_empty() {
        return Err(DiffusionError::InvalidConfig("training set is empty".into()));
    }
    let opt = OptConfig {
        batch_size,
        ..OptConfig::default()
    };
    let trainer = Trainer::new(model.clone(), opt, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    let batch = trainer.draw_batch(data, sched, &mut rng);
    let c = trainer.chunk_grad(&batch, 0..batch_size, &vec![None; data.len()], sched);
    Ok((c.mse_sum / (batch_size * model.arch.x_dim()) as f64, c.grad))
}

/// Builds and trains a fresh model for `opt.steps` steps.
pub fn train_denoiser(
    data: &[TrainSample],
    arch: ArchConfig,
    opt: OptConfig,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<(MlpDenoiser, Vec<LossRecord>), DiffusionError> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpDenoiser::new(arch, &mut init_rng)?;
    if let Some(floor) = opt.prior_var_floor {
        model = model.with_prior(PixelPrior::fit(data.iter().map(|s| &s.x0), floor)?, sched)?;
        model.zero_output_layer();
    }
    let steps = opt.steps;
    let mut trainer = Trainer::new(model, opt, seed.wrapping_add(1))?;
    let log = trainer.run(data, sched, steps, |_| {})?;
    Ok((trainer.model, log))
}
