//! Discrete visual tokenizer and reconstruction decoder trained through a
//! Gumbel-Softmax relaxation of the code assignment.
//!
//! Both halves are stacks of non-overlapping strided convolutions (kernel ==
//! stride), written as space-to-depth followed by a linear map. The product of
//! the stage factors equals the encoder patch size, so the tokenizer emits
//! exactly one code per encoder patch in the same row-major order.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{depth_to_space_index, space_to_depth_index, PatchGrid};
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::optim::{clip_grad_norm, AdamW, AdamWConfig, CosineWarmup};
use crate::nn::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{argmax, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqvaeConfig {
    /// Number of codes `K`.
    pub codebook_size: usize,
    /// Code embedding width `D`.
    pub code_dim: usize,
    pub hidden: usize,
    /// Downsampling factor of each strided stage; the product must equal the patch size.
    pub factors: Vec<usize>,
    pub tau_start: f64,
    pub tau_end: f64,
    pub hard: bool,
    /// Weight of `KL(q ‖ uniform)` on the per-patch code posterior.
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub adamw: AdamWConfig,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        Self {
            codebook_size: 8192,
            code_dim: 512,
            hidden: 256,
            factors: vec![4, 4],
            tau_start: 1.0,
            tau_end: 0.0625,
            hard: false,
            kl_weight: 0.0,
            epochs: 10,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_fraction: 0.05,
            grad_clip: 1.0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl VqvaeConfig {
    pub fn desk() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 32,
            hidden: 48,
            factors: vec![4, 2],
            kl_weight: 0.05,
            epochs: 6,
            batch_size: 16,
            peak_lr: 1e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self, grid: &PatchGrid) -> Result<()> {
        if self.codebook_size < 2 || self.code_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("codebook needs K >= 2 and D >= 1".into()));
        }
        let prod: usize = self.factors.iter().product();
        if prod != grid.patch || self.factors.contains(&0) {
            return Err(Error::ConfigMismatch(format!(
                "vqvae factors {:?} (product {prod}) must multiply to patch size {}",
                self.factors, grid.patch
            )));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::InvalidTemperature(self.tau_start.min(self.tau_end)));
        }
        Ok(())
    }

    /// Exponential annealing from `tau_start` to `tau_end` over `total` steps.
    pub fn temperature(&self, step: usize, total: usize) -> f64 {
        let frac = if total <= 1 { 1.0 } else { (step as f64 / (total - 1) as f64).min(1.0) };
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }
}

/// One code index per patch position, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<u32>,
}

impl TokenGrid {
    pub fn to_matrix(&self) -> Vec<Vec<u32>> {
        self.codes.chunks(self.cols).map(|r| r.to_vec()).collect()
    }

    pub fn from_matrix(m: &[Vec<u32>]) -> Result<Self> {
        let rows = m.len();
        let cols = m.first().map_or(0, Vec::len);
        if m.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged token grid".into()));
        }
        Ok(Self { rows, cols, codes: m.concat() })
    }

    pub fn distinct(&self) -> usize {
        let mut c = self.codes.clone();
        c.sort_unstable();
        c.dedup();
        c.len()
    }
}

/// Samples `softmax((logits + g) / τ)` with `g ~ Gumbel(0, 1)`; with `hard`,
/// the forward value is the one-hot argmax and gradients flow through the soft sample.
pub fn gumbel_softmax<T: Real>(g: &mut Graph<T>, logits: Var, tau: f64, hard: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let noise = gumbel_noise(g.value(logits).shape(), rng);
    let noise = g.input(noise);
    let y = g.add(logits, noise);
    let y = g.scale(y, T::from_f64_lossy(1.0 / tau));
    let soft = g.softmax_rows(y);
    if !hard {
        return Ok(soft);
    }
    let s = g.value(soft);
    let mut onehot = Tensor::zeros(s.shape().to_vec());
    for i in 0..s.rows() {
        let k = s.argmax_row(i);
        onehot.row_mut(i)[k] = T::one();
    }
    Ok(g.straight_through(soft, onehot))
}

/// Graph-free Gumbel-Softmax sample over the last axis.
pub fn gumbel_softmax_sample<T: Real>(logits: &Tensor<T>, tau: f64, hard: bool, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let l = g.input(logits.clone());
    let out = gumbel_softmax(&mut g, l, tau, hard, rng)?;
    Ok(g.value(out).clone())
}

fn gumbel_noise<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
        T::from_f64_lossy(-(-u.ln()).ln())
    })
}

#[derive(Clone, Debug)]
struct Stage {
    factor: usize,
    /// Spatial size of the map entering this stage (encoder direction).
    height: usize,
    width: usize,
    channels_in: usize,
}

#[derive(Clone, Debug)]
pub struct Vqvae {
    pub config: VqvaeConfig,
    pub grid: PatchGrid,
    stages: Vec<Stage>,
    enc_stages: Vec<Linear>,
    enc_mid: Linear,
    enc_out: Linear,
    pub codebook: ParamId,
    dec_in: Linear,
    dec_stages: Vec<Linear>,
}

impl Vqvae {
    pub const PREFIX: &'static str = "vqvae.";

    pub fn new<T: Real>(store: &mut ParamStore<T>, grid: PatchGrid, config: VqvaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate(&grid)?;
        let hid = config.hidden;
        let mut stages = Vec::new();
        let (mut h, mut w, mut c) = (grid.height(), grid.width(), grid.channels);
        for &f in &config.factors {
            stages.push(Stage { factor: f, height: h, width: w, channels_in: c });
            h /= f;
            w /= f;
            c = hid;
        }
        let enc_stages = stages
            .iter()
            .enumerate()
            .map(|(i, s)| Linear::new(store, &format!("vqvae.enc.{i}"), s.factor * s.factor * s.channels_in, hid, rng))
            .collect();
        let enc_mid = Linear::new(store, "vqvae.enc.mid", hid, hid, rng);
        let enc_out = Linear::new(store, "vqvae.enc.logits", hid, config.codebook_size, rng);
        let codebook = store.add_normal("vqvae.codebook", &[config.codebook_size, config.code_dim], 1.0, rng);
        let dec_in = Linear::new(store, "vqvae.dec.in", config.code_dim, hid, rng);
        let dec_stages = stages
            .iter()
            .enumerate()
            .rev()
            .map(|(i, s)| Linear::new(store, &format!("vqvae.dec.{i}"), hid, s.factor * s.factor * s.channels_in, rng))
            .collect();
        Ok(Self { config, grid, stages, enc_stages, enc_mid, enc_out, codebook, dec_in, dec_stages })
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    /// Code logits `[B·N, K]` for `batch` stacked `[H, W, C]` images given as `[B·H·W, C]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, images: Var, batch: usize) -> Result<Var> {
        let expect = batch * self.grid.height() * self.grid.width();
        if g.value(images).rows() != expect || g.value(images).cols() != self.grid.channels {
            return Err(Error::ShapeMismatch(format!(
                "vqvae input {:?}, expected [{expect}, {}]",
                g.shape(images),
                self.grid.channels
            )));
        }
        let mut x = images;
        for (s, lin) in self.stages.iter().zip(&self.enc_stages) {
            let idx = space_to_depth_index(batch, s.height, s.width, s.channels_in, s.factor);
            let rows = batch * (s.height / s.factor) * (s.width / s.factor);
            x = g.permute(x, Rc::new(idx), vec![rows, s.factor * s.factor * s.channels_in]);
            x = lin.forward(g, x);
            x = g.gelu(x);
        }
        let h = self.enc_mid.forward(g, x);
        let h = g.gelu(h);
        x = g.add(x, h);
        Ok(self.enc_out.forward(g, x))
    }

    /// Reconstruction `[B·H·W, C]` from code assignments `[B·N, K]` (one-hot or relaxed).
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, assign: Var, batch: usize) -> Result<Var> {
        if g.value(assign).cols() != self.codebook_size() {
            return Err(Error::ShapeMismatch("assignment width differs from K".into()));
        }
        let cb = g.param(self.codebook);
        let z = g.matmul(assign, cb);
        let mut x = self.dec_in.forward(g, z);
        x = g.gelu(x);
        let last = self.stages.len() - 1;
        for (k, (s, lin)) in self.stages.iter().rev().zip(&self.dec_stages).enumerate() {
            x = lin.forward(g, x);
            let idx = depth_to_space_index(batch, s.height, s.width, s.channels_in, s.factor);
            x = g.permute(x, Rc::new(idx), vec![batch * s.height * s.width, s.channels_in]);
            if k != last {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    /// Stacks normalized `[H, W, C]` images as `[B·H·W, C]`.
    pub fn stack<T: Real>(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (h, w, c) = (self.grid.height(), self.grid.width(), self.grid.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.shape() != [h, w, c] {
                return Err(Error::ShapeMismatch(format!("image {:?}, expected [{h}, {w}, {c}]", img.shape())));
            }
            data.extend_from_slice(img.data());
        }
        Tensor::new([images.len() * h * w, c], data)
    }

    /// Relaxed reconstruction loss (mean squared error) for a batch.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, images: &[&Tensor<T>], tau: f64, rng: &mut impl Rng) -> Result<Var> {
        let x = self.stack(images)?;
        let input = g.input(x.clone());
        let logits = self.logits(g, input, images.len())?;
        let assign = gumbel_softmax(g, logits, tau, self.config.hard, rng)?;
        let recon = self.decode(g, assign, images.len())?;
        let mse = g.mse(recon, x);
        if self.config.kl_weight == 0.0 {
            return Ok(mse);
        }
        let kl = g.kl_uniform(logits);
        let kl = g.scale(kl, T::from_f64_lossy(self.config.kl_weight));
        Ok(g.add(mse, kl))
    }

    /// Deterministic tokenization: argmax code per patch, no noise.
    pub fn tokenize<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<TokenGrid> {
        Ok(self.tokenize_batch(store, &[image])?.pop().unwrap())
    }

    pub fn tokenize_batch<T: Real>(&self, store: &ParamStore<T>, images: &[&Tensor<T>]) -> Result<Vec<TokenGrid>> {
        let mut g = Graph::new(store);
        let x = g.input(self.stack(images)?);
        let logits = self.logits(&mut g, x, images.len())?;
        let l = g.value(logits);
        let n = self.grid.num_patches();
        Ok((0..images.len())
            .map(|b| TokenGrid {
                rows: self.grid.rows,
                cols: self.grid.cols,
                codes: (0..n).map(|p| argmax(l.row(b * n + p)) as u32).collect(),
            })
            .collect())
    }

    /// Image-shaped reconstruction in normalized pixel space.
    pub fn reconstruct<T: Real>(&self, store: &ParamStore<T>, grid: &TokenGrid) -> Result<Tensor<T>> {
        let k = self.codebook_size();
        if grid.rows != self.grid.rows || grid.cols != self.grid.cols {
            return Err(Error::ShapeMismatch(format!(
                "token grid {}x{} for patch grid {}x{}",
                grid.rows, grid.cols, self.grid.rows, self.grid.cols
            )));
        }
        let mut onehot = Tensor::zeros([grid.codes.len(), k]);
        for (i, &c) in grid.codes.iter().enumerate() {
            if c as usize >= k {
                return Err(Error::IndexOutOfRange { index: c as usize, k });
            }
            onehot.row_mut(i)[c as usize] = T::one();
        }
        let mut g = Graph::new(store);
        let a = g.input(onehot);
        let out = self.decode(&mut g, a, 1)?;
        g.value(out).clone().reshape([self.grid.height(), self.grid.width(), self.grid.channels])
    }
}

/// One optimization step; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn vqvae_train_step(
    model: &Vqvae,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
    batch: &[&Tensor<f32>],
    tau: f64,
    lr: f64,
    rng: &mut impl Rng,
    step: usize,
) -> Result<f64> {
    let (loss, mut grads) = {
        let mut g = Graph::train(store, 0);
        let loss = model.loss(&mut g, batch, tau, rng)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: format!("vqvae loss {value} at tau {tau}") });
        }
        (value, g.backward(loss).into_params())
    };
    clip_grad_norm(&mut grads, model.config.grad_clip);
    opt.step(store, &grads, lr);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqvaeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub tau: f64,
    pub lr: f64,
}

/// Trains a fresh VQ-VAE on normalized images.
pub fn train_vqvae(
    images: &[Tensor<f32>],
    grid: PatchGrid,
    config: &VqvaeConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&VqvaeEpoch),
) -> Result<(Vqvae, ParamStore<f32>, Vec<VqvaeEpoch>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Vqvae::new(&mut store, grid, config.clone(), &mut rng)?;
    let mut opt = AdamW::new(config.adamw.clone());
    let bs = config.batch_size.max(1);
    let per_epoch = images.len().div_ceil(bs);
    let total = (per_epoch * config.epochs).max(2);
    let warmup = ((total as f64 * config.warmup_fraction) as usize).min(total - 1);
    let schedule = CosineWarmup::new(warmup, total, config.peak_lr)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut tau = config.tau_start;
        let mut lr = 0.0;
        for chunk in order.chunks(bs) {
            let batch: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &images[i]).collect();
            tau = config.temperature(step, total);
            lr = schedule.lr(step)?;
            sum += vqvae_train_step(&model, &mut store, &mut opt, &batch, tau, lr, &mut rng, step)?;
            step += 1;
        }
        let e = VqvaeEpoch { epoch, loss: sum / per_epoch as f64, tau, lr };
        on_epoch(&e);
        history.push(e);
    }
    Ok((model, store, history))
}
