//! Masked image modeling: blockwise patch masking and prediction of the
//! tokenizer's code for every masked patch.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{patchify_batch, PatchGrid, PatchMask, VisualEncoder};
use crate::error::{Error, Result};
use crate::nn::layers::{LayerConfig, Linear, INIT_STD};
use crate::nn::optim::{clip_grad_norm, AdamW, AdamWConfig, CosineWarmup};
use crate::nn::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{argmax, Real, Tensor};
use crate::vqvae::TokenGrid;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    pub masked: usize,
    pub seed: u64,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).min(n)
}

/// Masks exactly `⌈ratio·N⌉` positions of a `rows × cols` grid with random
/// rectangles. Block anchors may start off-grid so border positions are
/// covered as often as interior ones; the last block is truncated in raster
/// order to hit the count exactly.
pub fn sample_mask(rows: usize, cols: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    let n = rows * cols;
    if n == 0 {
        return Err(Error::ShapeMismatch("empty patch grid".into()));
    }
    let target = masked_count(n, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    let mut count = 0;
    let min_area = 4.min(n);
    let mut attempts = 0;
    while count < target {
        attempts += 1;
        if attempts > 1000 {
            // Degenerate geometry: finish with single positions.
            let mut free: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
            free.shuffle(&mut rng);
            for i in free.into_iter().take(target - count) {
                mask[i] = true;
            }
            count = target;
            break;
        }
        let remaining = target - count;
        let hi = remaining.max(min_area);
        let area = rng.gen_range(min_area..=hi) as f64;
        let aspect = (rng.gen_range((0.3f64).ln()..=(1.0 / 0.3f64).ln())).exp();
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
        let top = rng.gen_range(-(h as i64 - 1)..=rows as i64 - 1);
        let left = rng.gen_range(-(w as i64 - 1)..=cols as i64 - 1);
        let mut fresh = Vec::new();
        for y in top.max(0)..(top + h as i64).min(rows as i64) {
            for x in left.max(0)..(left + w as i64).min(cols as i64) {
                let i = y as usize * cols + x as usize;
                if !mask[i] {
                    fresh.push(i);
                }
            }
        }
        for i in fresh.into_iter().take(remaining) {
            mask[i] = true;
            count += 1;
        }
    }
    Ok(MaskPlan { mask, masked: count, seed })
}

/// Mask seed for one sample, independent of batch composition or order.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut x = seed ^ 0x51_7c_c1_b7_27_22_0a_95;
    for v in [epoch as u64, index as u64] {
        x = (x ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x ^= x >> 29;
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub adamw: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.4,
            epochs: 10,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            grad_clip: 1.0,
            adamw: AdamWConfig::default(),
        }
    }
}

/// Visual encoder plus the masked-token head.
#[derive(Clone, Debug)]
pub struct MimModel {
    pub encoder: VisualEncoder,
    pub mask_embedding: ParamId,
    pub head: Linear,
    pub codebook_size: usize,
}

impl MimModel {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        grid: PatchGrid,
        cfg: &LayerConfig,
        codebook_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = VisualEncoder::new(store, grid, cfg, rng);
        let mask_embedding = store.add_normal("mim.mask_embedding", &[cfg.d_model], INIT_STD, rng);
        let head = Linear::new(store, "mim.head", cfg.d_model, codebook_size, rng);
        Ok(Self { encoder, mask_embedding, head, codebook_size })
    }

    /// Code logits `[B·N, K]` for stacked patches `[B·N, P²·C]` and one plan per image.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, patches: Var, masks: &[&MaskPlan]) -> Result<Var> {
        let n = self.encoder.grid.num_patches();
        if masks.iter().any(|m| m.len() != n) {
            return Err(Error::ShapeMismatch(format!("mask length differs from {n} patches")));
        }
        let flat: Vec<bool> = masks.iter().flat_map(|m| m.mask.iter().copied()).collect();
        let pm = PatchMask { embedding: self.mask_embedding, mask: Rc::new(flat) };
        let h = self.encoder.forward(g, patches, Some(&pm))?;
        Ok(self.head.forward(g, h))
    }

    /// Single-image logits `[N, K]` in evaluation mode.
    pub fn logits<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>, mask: &MaskPlan) -> Result<Tensor<T>> {
        let mut g = Graph::new(store);
        let p = g.input(patchify_batch(&[image], self.encoder.grid.patch)?);
        let out = self.forward(&mut g, p, &[mask])?;
        Ok(g.value(out).clone())
    }
}

fn mim_targets(targets: &[&TokenGrid], masks: &[&MaskPlan], k: usize) -> Result<Vec<Option<usize>>> {
    if targets.len() != masks.len() {
        return Err(Error::ShapeMismatch("target and mask counts differ".into()));
    }
    let mut out = Vec::new();
    for (t, m) in targets.iter().zip(masks) {
        if t.codes.len() != m.len() {
            return Err(Error::ConfigMismatch(format!(
                "token grid of {} codes for {} patches",
                t.codes.len(),
                m.len()
            )));
        }
        for (&c, &masked) in t.codes.iter().zip(&m.mask) {
            if c as usize >= k {
                return Err(Error::IndexOutOfRange { index: c as usize, k });
            }
            out.push(masked.then_some(c as usize));
        }
    }
    Ok(out)
}

/// Cross-entropy over masked positions only.
pub fn mim_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[&TokenGrid], masks: &[&MaskPlan]) -> Result<Var> {
    let k = g.value(logits).cols();
    let t = mim_targets(targets, masks, k)?;
    g.cross_entropy(logits, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub masked_accuracy: f64,
    pub lr: f64,
    pub heldout_loss: Option<f64>,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MimEval {
    pub loss: f64,
    pub accuracy: f64,
}

/// Masked-token loss and accuracy with masks fixed by `seed` and the sample index.
pub fn evaluate_mim(
    model: &MimModel,
    store: &ParamStore<f32>,
    images: &[Tensor<f32>],
    targets: &[TokenGrid],
    ratio: f64,
    seed: u64,
) -> Result<MimEval> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let grid = model.encoder.grid;
    let (mut loss_sum, mut correct, mut total) = (0.0, 0usize, 0usize);
    for chunk_start in (0..images.len()).step_by(32) {
        let end = (chunk_start + 32).min(images.len());
        let plans: Vec<MaskPlan> = (chunk_start..end)
            .map(|i| sample_mask(grid.rows, grid.cols, ratio, sample_seed(seed, usize::MAX, i)))
            .collect::<Result<_>>()?;
        let masks: Vec<&MaskPlan> = plans.iter().collect();
        let tg: Vec<&TokenGrid> = targets[chunk_start..end].iter().collect();
        let imgs: Vec<&Tensor<f32>> = images[chunk_start..end].iter().collect();
        let mut g = Graph::new(store);
        let p = g.input(patchify_batch(&imgs, grid.patch)?);
        let logits = model.forward(&mut g, p, &masks)?;
        let t = mim_targets(&tg, &masks, model.codebook_size)?;
        let count = t.iter().flatten().count();
        let l = g.value(logits).clone();
        let loss = g.cross_entropy(logits, t.clone())?;
        loss_sum += g.value(loss).data()[0] as f64 * count as f64;
        for (i, target) in t.iter().enumerate() {
            if let Some(target) = target {
                correct += usize::from(argmax(l.row(i)) == *target);
            }
        }
        total += count;
    }
    Ok(MimEval { loss: loss_sum / total as f64, accuracy: correct as f64 / total as f64 })
}

pub struct PretrainData<'a> {
    pub images: &'a [Tensor<f32>],
    pub targets: &'a [TokenGrid],
}

/// Runs MIM pretraining from a fresh initialization.
pub fn pretrain(
    train: PretrainData<'_>,
    heldout: Option<PretrainData<'_>>,
    grid: PatchGrid,
    layers: &LayerConfig,
    codebook_size: usize,
    config: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<(MimModel, ParamStore<f32>, Vec<PretrainEpoch>)> {
    if train.images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if train.images.len() != train.targets.len() {
        return Err(Error::ShapeMismatch("images and token grids differ in count".into()));
    }
    if let Some(t) = train.targets.first() {
        if (t.rows, t.cols) != (grid.rows, grid.cols) {
            return Err(Error::ConfigMismatch(format!(
                "token grid {}x{} vs patch grid {}x{}",
                t.rows, t.cols, grid.rows, grid.cols
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = MimModel::new(&mut store, grid, layers, codebook_size, &mut rng)?;
    let mut opt = AdamW::new(config.adamw.clone());
    let bs = config.batch_size.max(1);
    let per_epoch = train.images.len().div_ceil(bs);
    let total = (per_epoch * config.epochs).max(2);
    let warmup = ((total as f64 * config.warmup_fraction) as usize).min(total - 1);
    let schedule = CosineWarmup::new(warmup, total, config.peak_lr)?;
    let mut order: Vec<usize> = (0..train.images.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut count, mut lr) = (0.0, 0usize, 0usize, 0.0);
        for chunk in order.chunks(bs) {
            let plans: Vec<MaskPlan> = chunk
                .iter()
                .map(|&i| sample_mask(grid.rows, grid.cols, config.mask_ratio, sample_seed(seed, epoch, i)))
                .collect::<Result<_>>()?;
            let masks: Vec<&MaskPlan> = plans.iter().collect();
            let tg: Vec<&TokenGrid> = chunk.iter().map(|&i| &train.targets[i]).collect();
            let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train.images[i]).collect();
            lr = schedule.lr(step)?;
            let mut grads = {
                let mut g = Graph::train(&store, sample_seed(seed ^ 0xD5, epoch, step));
                let p = g.input(patchify_batch(&imgs, grid.patch)?);
                let logits = model.forward(&mut g, p, &masks)?;
                let t = mim_targets(&tg, &masks, codebook_size)?;
                let l = g.value(logits);
                for (i, target) in t.iter().enumerate() {
                    if let Some(target) = target {
                        correct += usize::from(argmax(l.row(i)) == *target);
                        count += 1;
                    }
                }
                let loss = g.cross_entropy(logits, t)?;
                let v = g.value(loss).data()[0] as f64;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { step, detail: format!("mim loss {v}") });
                }
                loss_sum += v;
                g.backward(loss).into_params()
            };
            clip_grad_norm(&mut grads, config.grad_clip);
            opt.step(&mut store, &grads, lr);
            step += 1;
        }
        let held = match &heldout {
            Some(h) => Some(evaluate_mim(&model, &store, h.images, h.targets, config.mask_ratio, seed)?),
            None => None,
        };
        let e = PretrainEpoch {
            epoch,
            loss: loss_sum / per_epoch as f64,
            masked_accuracy: correct as f64 / count.max(1) as f64,
            lr,
            heldout_loss: held.map(|h| h.loss),
            heldout_accuracy: held.map(|h| h.accuracy),
        };
        on_epoch(&e);
        history.push(e);
    }
    Ok((model, store, history))
}
