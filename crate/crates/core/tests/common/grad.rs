//! Finite-difference checks for every layer and the assembled models, in f64
//! with dropout disabled (evaluation-mode graphs).

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsr_core::encoder::{patchify_batch, space_to_depth_index, PatchGrid, PatchMask, VisualEncoder};
use tsr_core::mim::{mim_loss, sample_mask, MimModel};
use tsr_core::nn::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use tsr_core::nn::layers::{DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use tsr_core::nn::{Graph, LayerConfig, ParamStore, Segment, Var};
use tsr_core::tsr::{structure_loss, TsrModel};
use tsr_core::vqvae::{gumbel_softmax, TokenGrid, Vqvae, VqvaeConfig};
use tsr_core::{Result, Tensor, TokenId, TokenSeq};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn cfg() -> LayerConfig {
    LayerConfig { d_model: 8, ffn_dim: 16, heads: 2, dropout: 0.3, enc_layers: 2, dec_layers: 2 }
}

fn opts() -> GradCheckOptions {
    // Some attention gradients are ~1e-7; with a smaller step the loss's own
    // rounding (~1e-16 / h) dominates the central difference.
    GradCheckOptions { max_coords: 24, step: 1e-4, ..GradCheckOptions::default() }
}

/// Reduces `out` to a scalar against a fixed random target so that every
/// output coordinate receives a distinct upstream gradient.
fn reduce(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let target = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    g.mse(out, target)
}

type Case = (&'static str, GradCheckReport);

fn check<F>(name: &'static str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<Case>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok((name, grad_check(store, inputs, f, &opts())?))
}

fn segs(lengths: &[usize]) -> Vec<Segment> {
    tsr_core::nn::kernels::segments_from_lengths(lengths)
}

fn seqs() -> Vec<TokenSeq> {
    use TokenId as T;
    vec![
        TokenSeq::frame(&[T::TR, T::TD, T::TD_END, T::TD, T::TD_END, T::TR_END]),
        TokenSeq::frame(&[T::TBODY, T::TR, T::TD_OPEN, T::colspan(2), T::TAG_CLOSE, T::TD_END, T::TR_END, T::TBODY_END]),
    ]
}

pub fn op_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let empty = ParamStore::<f64>::new();
    let x = rand_tensor(&mut rng, &[5, 6]);
    let y = rand_tensor(&mut rng, &[5, 6]);
    let mut out = vec![
        check("gelu", &empty, &[x.clone()], |g, v| {
            let o = g.gelu(v[0]);
            Ok(reduce(g, o, 2))
        })?,
        check("mul+add+scale", &empty, &[x.clone(), y.clone()], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.add(a, v[1]);
            let c = g.scale(b, 0.7);
            Ok(reduce(g, c, 3))
        })?,
        check("softmax_rows", &empty, &[x.clone()], |g, v| {
            let o = g.softmax_rows(v[0]);
            Ok(reduce(g, o, 4))
        })?,
        check("cross_entropy", &empty, &[x.clone()], |g, v| {
            g.cross_entropy(v[0], vec![Some(1), None, Some(5), Some(0), None])
        })?,
        check("kl_uniform", &empty, &[x.clone()], |g, v| Ok(g.kl_uniform(v[0])))?,
        check("matmul", &empty, &[x.clone(), rand_tensor(&mut rng, &[6, 3])], |g, v| {
            let o = g.matmul(v[0], v[1]);
            Ok(reduce(g, o, 5))
        })?,
        check("gather_rows", &empty, &[x.clone()], |g, v| {
            let o = g.gather_rows(v[0], vec![4, 0, 0, 2]);
            Ok(reduce(g, o, 6))
        })?,
        check("select_rows", &empty, &[x.clone(), rand_tensor(&mut rng, &[6])], |g, v| {
            let o = g.select_rows(v[0], v[1], Rc::new(vec![true, false, true, false, false]));
            Ok(reduce(g, o, 7))
        })?,
    ];
    // Space-to-depth permutation of a 4x4x2 map with factor 2.
    let img = rand_tensor(&mut rng, &[16, 2]);
    out.push(check("permute", &empty, &[img], |g, v| {
        let idx = Rc::new(space_to_depth_index(1, 4, 4, 2, 2));
        let o = g.permute(v[0], idx, vec![4, 8]);
        Ok(reduce(g, o, 8))
    })?);
    Ok(out)
}

pub fn layer_cases() -> Result<Vec<Case>> {
    let c = cfg();
    let d = c.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[7, d]);
    let mem = rand_tensor(&mut rng, &[6, d]);
    let (qs, ks) = (segs(&[3, 4]), segs(&[2, 4]));
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", d, 5, &mut rng);
    out.push(check("linear", &s, &[x.clone()], |g, v| {
        let o = lin.forward(g, v[0]);
        Ok(reduce(g, o, 1))
    })?);

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", d);
    // Move gamma and beta off their initial values so their gradients are generic.
    for id in s.ids().collect::<Vec<_>>() {
        let t = rand_tensor(&mut rng, s.get(id).shape());
        *s.get_mut(id) = t;
    }
    out.push(check("layer_norm", &s, &[x.clone()], |g, v| {
        let o = ln.forward(g, v[0]);
        Ok(reduce(g, o, 2))
    })?);

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "attn", d, c.heads, &mut rng);
    let self_segs = segs(&[3, 4]);
    out.push(check("attention.self", &s, &[x.clone()], |g, v| {
        let o = mha.forward(g, v[0], v[0], &self_segs, &self_segs, false)?;
        Ok(reduce(g, o, 3))
    })?);
    out.push(check("attention.causal", &s, &[x.clone()], |g, v| {
        let o = mha.forward(g, v[0], v[0], &self_segs, &self_segs, true)?;
        Ok(reduce(g, o, 4))
    })?);
    out.push(check("attention.cross", &s, &[x.clone(), mem.clone()], |g, v| {
        let o = mha.forward(g, v[0], v[1], &qs, &ks, false)?;
        Ok(reduce(g, o, 5))
    })?);

    let mut s = ParamStore::new();
    let ffn = FeedForward::new(&mut s, "ffn", d, c.ffn_dim, &mut rng);
    out.push(check("feed_forward", &s, &[x.clone()], |g, v| {
        let o = ffn.forward(g, v[0], c.dropout);
        Ok(reduce(g, o, 6))
    })?);

    let mut s = ParamStore::new();
    let enc = EncoderLayer::new(&mut s, "enc", &c, &mut rng);
    out.push(check("encoder_layer", &s, &[x.clone()], |g, v| {
        let o = enc.forward(g, v[0], &self_segs)?;
        Ok(reduce(g, o, 7))
    })?);

    let mut s = ParamStore::new();
    let dec = DecoderLayer::new(&mut s, "dec", &c, &mut rng);
    out.push(check("decoder_layer", &s, &[x.clone(), mem.clone()], |g, v| {
        let o = dec.forward(g, v[0], v[1], &qs, &ks)?;
        Ok(reduce(g, o, 8))
    })?);
    Ok(out)
}

pub fn model_cases() -> Result<Vec<Case>> {
    let c = cfg();
    let grid = PatchGrid::new(8, 8, 3, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let images = [rand_tensor(&mut rng, &[8, 8, 3]), rand_tensor(&mut rng, &[8, 8, 3])];
    let patches = patchify_batch(&[&images[0], &images[1]], 4)?;
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let enc = VisualEncoder::new(&mut s, grid, &c, &mut rng);
    let fill = s.add_normal("fill", &[c.d_model], 0.5, &mut rng);
    let mask = PatchMask { embedding: fill, mask: Rc::new(vec![true, false, false, true, false, true, false, false]) };
    out.push(check("visual_encoder", &s, &[patches.clone()], |g, v| {
        let o = enc.forward(g, v[0], Some(&mask))?;
        Ok(reduce(g, o, 1))
    })?);

    let mut s = ParamStore::new();
    let model = TsrModel::new(&mut s, grid, &c, &mut rng)?;
    let sq = seqs();
    out.push(check("tsr.end_to_end", &s, &[patches.clone()], |g, v| {
        let refs: Vec<&TokenSeq> = sq.iter().collect();
        let logits = model.forward(g, v[0], &refs)?;
        structure_loss(g, logits, &refs)
    })?);

    let mut s = ParamStore::new();
    let mim = MimModel::new(&mut s, grid, &c, 6, &mut rng)?;
    let plans = [sample_mask(2, 2, 0.5, 3)?, sample_mask(2, 2, 0.5, 4)?];
    let targets = [
        TokenGrid { rows: 2, cols: 2, codes: vec![0, 5, 2, 2] },
        TokenGrid { rows: 2, cols: 2, codes: vec![1, 1, 4, 3] },
    ];
    out.push(check("mim.end_to_end", &s, &[patches.clone()], |g, v| {
        let p: Vec<_> = plans.iter().collect();
        let logits = mim.forward(g, v[0], &p)?;
        mim_loss(g, logits, &targets.iter().collect::<Vec<_>>(), &p)
    })?);

    let mut s = ParamStore::new();
    let vq_cfg = VqvaeConfig { codebook_size: 5, code_dim: 4, hidden: 6, factors: vec![2, 2], kl_weight: 0.1, ..VqvaeConfig::desk() };
    let vq = Vqvae::new(&mut s, grid, vq_cfg, &mut rng)?;
    let stacked = vq.stack(&[&images[0], &images[1]])?;
    let target = stacked.clone();
    out.push(check("vqvae.relaxed", &s, &[stacked], |g, v| {
        // Fixed noise keeps the relaxed sample a deterministic function of the inputs.
        let mut noise = ChaCha8Rng::seed_from_u64(9);
        let logits = vq.logits(g, v[0], 2)?;
        let assign = gumbel_softmax(g, logits, 0.7, false, &mut noise)?;
        let recon = vq.decode(g, assign, 2)?;
        let mse = g.mse(recon, target.clone());
        let kl = g.kl_uniform(logits);
        let kl = g.scale(kl, 0.1);
        Ok(g.add(mse, kl))
    })?);
    Ok(out)
}

pub fn all_cases() -> Result<Vec<Case>> {
    let mut v = op_cases()?;
    v.extend(layer_cases()?);
    v.extend(model_cases()?);
    Ok(v)
}
