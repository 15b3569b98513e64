//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on coordinates probed per tensor; larger tensors are sampled.
    pub max_coords: usize,
    /// Lower bound on the error denominator. Gradients that vanish identically
    /// (the key bias under softmax, for one) would otherwise be compared
    /// against their own round-off.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, max_coords: 64, scale_floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares analytic gradients of the scalar built by `loss_fn` with central
/// differences, for every trainable parameter and every input tensor.
///
/// `loss_fn` must be deterministic; it is evaluated on an evaluation-mode graph.
/// The error of a tensor is `max |analytic − numeric| / max(|analytic|∞, |numeric|∞, floor)`
/// over the probed coordinates.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let (param_grads, input_grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        let grads = g.backward(loss);
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        (grads.into_params(), ig)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    let h = opts.step;

    let mut pick = |n: usize| -> Vec<usize> {
        if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_coords).into_vec();
            v.sort_unstable();
            v
        }
    };

    let mut work = store.clone();
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).numel();
        let analytic = param_grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        let coords = pick(n);
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = store.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + h;
            let plus = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[c] = orig - h;
            let minus = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[c] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        entries.push(entry(store.name(id), &analytic, &coords, &numeric, opts.scale_floor));
    }

    let mut work_inputs = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let coords = pick(t.numel());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = t.data()[c];
            work_inputs[k].data_mut()[c] = orig + h;
            let plus = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[c] = orig - h;
            let minus = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[c] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        entries.push(entry(&format!("input[{k}]"), &input_grads[k], &coords, &numeric, opts.scale_floor));
    }

    Ok(GradCheckReport { entries, tolerance: opts.tolerance })
}

fn entry(name: &str, analytic: &Tensor<f64>, coords: &[usize], numeric: &[f64], floor: f64) -> GradCheckEntry {
    let a_scale = analytic.max_abs();
    let n_scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = a_scale.max(n_scale).max(floor);
    let max_diff = coords
        .iter()
        .zip(numeric)
        .map(|(&c, &nv)| (analytic.data()[c] - nv).abs())
        .fold(0.0, f64::max);
    let max_rel_error = if scale == 0.0 { 0.0 } else { max_diff / scale };
    GradCheckEntry { name: name.to_string(), coords: coords.len(), max_rel_error }
}
