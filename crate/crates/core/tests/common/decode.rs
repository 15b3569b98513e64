//! Decoder-side checks shared by the integration tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsr_core::encoder::PatchGrid;
use tsr_core::nn::functional::cross_entropy;
use tsr_core::nn::{Graph, LayerConfig, ParamStore};
use tsr_core::tensor::argmax;
use tsr_core::tsr::{TsrModel, MAX_SEQ_LEN};
use tsr_core::{Result, Tensor, TokenId, TokenSeq};

pub fn tiny_model(seed: u64) -> Result<(TsrModel, ParamStore<f64>, Tensor<f64>)> {
    let cfg = LayerConfig { d_model: 16, ffn_dim: 32, heads: 2, dropout: 0.0, enc_layers: 1, dec_layers: 2 };
    let grid = PatchGrid::new(16, 16, 3, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = TsrModel::new(&mut store, grid, &cfg, &mut rng)?;
    // Larger weights than the default init so that logits vary with the input.
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id).map(|v| v * 3.0);
        *store.get_mut(id) = t;
    }
    let image = Tensor::from_fn([16, 16, 3], |_| rng.gen_range(-1.0..1.0));
    Ok((model, store, image))
}

/// Largest change of any logit at positions before `t` when every token from
/// `t` on is replaced; exact causality makes this zero.
pub fn causality_leak(seed: u64) -> Result<f64> {
    let (model, store, image) = tiny_model(seed)?;
    let features = model.encode(&store, &image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let len = rng.gen_range(3..40);
        let mut ids = vec![TokenId::SOS];
        ids.extend((0..len).map(|_| TokenId(rng.gen_range(4..32))));
        ids.push(TokenId::EOS);
        let a = TokenSeq { ids: ids.clone(), framed: true };
        let t = rng.gen_range(1..ids.len() - 1);
        let end = ids.len() - 1;
        for id in &mut ids[t..end] {
            *id = TokenId(rng.gen_range(4..32));
        }
        let b = TokenSeq { ids, framed: true };
        let la = model.decode_teacher_forcing(&store, &features, &a)?;
        let lb = model.decode_teacher_forcing(&store, &features, &b)?;
        // Row r holds the prediction after input position r; rows < t see only unchanged inputs.
        for r in 0..t {
            for (x, y) in la.row(r).iter().zip(lb.row(r)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

/// Greedy decoding with `<eos>` made unreachable: returns the output length and
/// whether two runs agree token for token.
pub fn capped_greedy(seed: u64) -> Result<(usize, bool)> {
    let (model, mut store, image) = tiny_model(seed)?;
    let bias = store.id("decoder.out.bias").expect("output bias");
    store.get_mut(bias).data_mut()[TokenId::EOS.index()] = -1e9;
    let a = model.greedy_decode(&store, &image)?;
    let b = model.greedy_decode(&store, &image)?;
    Ok((a.ids.len(), a == b && !a.ids.contains(&TokenId::EOS)))
}

/// Greedy output agrees with argmax of teacher forcing on its own prefix,
/// i.e. each step consumes the previous prediction.
pub fn greedy_matches_teacher_forcing(seed: u64) -> Result<bool> {
    let (model, store, image) = tiny_model(seed)?;
    let pred = model.greedy_decode(&store, &image)?;
    let features = model.encode(&store, &image)?;
    let mut ids = pred.ids.clone();
    if *ids.last().unwrap() != TokenId::EOS {
        ids.push(TokenId::EOS);
    }
    let seq = TokenSeq { ids: ids[..ids.len().min(MAX_SEQ_LEN)].to_vec(), framed: true };
    let logits = model.decode_teacher_forcing(&store, &features, &seq)?;
    Ok((1..pred.ids.len()).all(|i| argmax(logits.row(i - 1)) == pred.ids[i].index()))
}

/// `|CE(uniform logits) − ln V|`, checked through both the graph op and the
/// graph-free function.
pub fn uniform_ce_error(v: usize) -> Result<f64> {
    let rows = 7;
    let logits = Tensor::<f64>::full([rows, v], 0.25);
    let targets: Vec<usize> = (0..rows).map(|i| (i * 5) % v).collect();
    let plain = cross_entropy(&logits, &targets, None)?;
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let l = g.input(logits);
    let loss = g.cross_entropy(l, targets.iter().map(|&t| Some(t)).collect())?;
    let graph = g.value(loss).data()[0];
    let ln_v = (v as f64).ln();
    Ok((plain - ln_v).abs().max((graph - ln_v).abs()))
}
