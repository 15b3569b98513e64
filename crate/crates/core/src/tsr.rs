//! Image-to-structure model: the visual encoder, an autoregressive decoder
//! over the structure vocabulary, teacher-forced training, greedy decoding and
//! the two fine-tuning schedules.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{patchify_batch, PatchGrid, VisualEncoder};
use crate::error::{Error, Result};
use crate::grammar::{TokenId, TokenSeq, VOCAB_SIZE};
use crate::nn::kernels::{self, segments_from_lengths, AttentionLayout, Segment};
use crate::nn::layers::{DecoderLayer, LayerConfig, LayerNorm, Linear, MultiHeadAttention, INIT_STD, LN_EPS};
use crate::nn::optim::{clip_grad_norm, AdamW, AdamWConfig, CosineWarmup};
use crate::nn::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{argmax, Real, Tensor};
use crate::teds::{evaluate_corpus, EvalPair, TedsReport};

/// Longest sequence the decoder can hold, framing tokens included.
pub const MAX_SEQ_LEN: usize = 512;

#[derive(Clone, Debug)]
pub struct TsrModel {
    pub encoder: VisualEncoder,
    pub embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub out: Linear,
    pub dropout: f64,
}

impl TsrModel {
    pub const DECODER_PREFIX: &'static str = "decoder.";

    pub fn new<T: Real>(store: &mut ParamStore<T>, grid: PatchGrid, cfg: &LayerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = VisualEncoder::new(store, grid, cfg, rng);
        let d = cfg.d_model;
        Ok(Self {
            encoder,
            embed: store.add_normal("decoder.embed", &[VOCAB_SIZE, d], INIT_STD, rng),
            pos_embed: store.add_normal("decoder.pos_embed", &[MAX_SEQ_LEN, d], INIT_STD, rng),
            layers: (0..cfg.dec_layers)
                .map(|i| DecoderLayer::new(store, &format!("decoder.layers.{i}"), cfg, rng))
                .collect(),
            norm: LayerNorm::new(store, "decoder.norm", d),
            out: Linear::new(store, "decoder.out", d, VOCAB_SIZE, rng),
            dropout: cfg.dropout,
        })
    }

    /// Next-token logits for every position of every input prefix.
    ///
    /// `memory` holds `mem_segments.len()` stacked feature sequences; `inputs[b]`
    /// is decoded against segment `b`. Output rows follow the inputs in order.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        memory: Var,
        mem_segments: &[Segment],
        inputs: &[&[TokenId]],
    ) -> Result<Var> {
        if inputs.len() != mem_segments.len() {
            return Err(Error::ShapeMismatch("one token sequence per image required".into()));
        }
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        if let Some(&len) = lens.iter().find(|&&l| l > MAX_SEQ_LEN) {
            return Err(Error::SequenceTooLong { len, max: MAX_SEQ_LEN });
        }
        let ids: Vec<usize> = inputs.iter().flat_map(|s| s.iter().map(|t| t.index())).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB_SIZE) {
            return Err(Error::UnknownToken(bad));
        }
        let positions: Vec<usize> = lens.iter().flat_map(|&l| 0..l).collect();
        let table = g.param(self.embed);
        let tok = g.gather_rows(table, ids);
        let pos_table = g.param(self.pos_embed);
        let pos = g.gather_rows(pos_table, positions);
        let mut x = g.add(tok, pos);
        x = g.dropout(x, self.dropout);
        let segments = segments_from_lengths(&lens);
        for layer in &self.layers {
            x = layer.forward(g, x, memory, &segments, mem_segments)?;
        }
        let x = self.norm.forward(g, x);
        Ok(self.out.forward(g, x))
    }

    /// Teacher-forced logits `[Σ(n_b − 1), 32]` for a batch of images and framed sequences.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, patches: Var, seqs: &[&TokenSeq]) -> Result<Var> {
        let memory = self.encoder.forward(g, patches, None)?;
        self.forward_from_features(g, memory, seqs)
    }

    pub fn forward_from_features<T: Real>(&self, g: &mut Graph<T>, memory: Var, seqs: &[&TokenSeq]) -> Result<Var> {
        let n = self.encoder.grid.num_patches();
        let inputs: Vec<&[TokenId]> = seqs.iter().map(|s| teacher_inputs(s)).collect::<Result<_>>()?;
        let mem_segments = segments_from_lengths(&vec![n; seqs.len()]);
        self.decode(g, memory, &mem_segments, &inputs)
    }

    /// Evaluation-mode teacher-forced logits `[n − 1, 32]` from precomputed features `[N, d]`.
    pub fn decode_teacher_forcing<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        gt: &TokenSeq,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new(store);
        let m = g.input(features.clone());
        let out = self.forward_from_features(&mut g, m, &[gt])?;
        Ok(g.value(out).clone())
    }

    pub fn encode<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.encode(store, image)
    }

    /// Greedy decoding from `<sos>` until `<eos>` or [`MAX_SEQ_LEN`] tokens.
    pub fn greedy_decode<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<TokenSeq> {
        let features = self.encode(store, image)?;
        self.greedy_decode_features(store, &features)
    }

    pub fn greedy_decode_features<T: Real>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<TokenSeq> {
        let mut state = DecodeState::new(self, store, features)?;
        let mut ids = vec![TokenId::SOS];
        while ids.len() < MAX_SEQ_LEN {
            let logits = state.step(*ids.last().unwrap());
            let next = TokenId(argmax(&logits) as u8);
            ids.push(next);
            if next == TokenId::EOS {
                break;
            }
        }
        Ok(TokenSeq { ids, framed: true })
    }
}

/// Decoder inputs for teacher forcing: the framed sequence without its last token.
fn teacher_inputs(seq: &TokenSeq) -> Result<&[TokenId]> {
    if seq.ids.len() < 2 || seq.ids[0] != TokenId::SOS {
        return Err(Error::MalformedStructure {
            position: 0,
            reason: "teacher forcing needs a framed sequence of at least <sos> <eos>".into(),
        });
    }
    if seq.ids.len() > MAX_SEQ_LEN {
        return Err(Error::SequenceTooLong { len: seq.ids.len(), max: MAX_SEQ_LEN });
    }
    Ok(&seq.ids[..seq.ids.len() - 1])
}

/// Targets `t_2 … t_n` aligned with the teacher-forced logits; `<pad>` is ignored.
pub fn structure_targets(seqs: &[&TokenSeq]) -> Vec<Option<usize>> {
    seqs.iter()
        .flat_map(|s| s.ids[1..].iter().map(|&t| (t != TokenId::PAD).then_some(t.index())))
        .collect()
}

/// Mean negative log-likelihood of `t_2 … t_n`.
pub fn structure_loss<T: Real>(g: &mut Graph<T>, logits: Var, seqs: &[&TokenSeq]) -> Result<Var> {
    g.cross_entropy(logits, structure_targets(seqs))
}

struct LayerCache<T> {
    self_k: Vec<T>,
    self_v: Vec<T>,
    cross_k: Tensor<T>,
    cross_v: Tensor<T>,
}

/// Incremental decoder evaluation with cached keys and values.
struct DecodeState<'a, T: Real> {
    model: &'a TsrModel,
    store: &'a ParamStore<T>,
    caches: Vec<LayerCache<T>>,
    pos: usize,
    mem_len: usize,
}

impl<'a, T: Real> DecodeState<'a, T> {
    fn new(model: &'a TsrModel, store: &'a ParamStore<T>, features: &Tensor<T>) -> Result<Self> {
        let d = model.encoder.d_model;
        if features.cols() != d {
            return Err(Error::ShapeMismatch(format!("features width {} vs d_model {d}", features.cols())));
        }
        let caches = model
            .layers
            .iter()
            .map(|l| LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: apply_linear(store, &l.cross_attn.k, features),
                cross_v: apply_linear(store, &l.cross_attn.v, features),
            })
            .collect();
        Ok(Self { model, store, caches, pos: 0, mem_len: features.rows() })
    }

    fn step(&mut self, token: TokenId) -> Vec<T> {
        let (m, s) = (self.model, self.store);
        let d = m.encoder.d_model;
        let mut x = Tensor::zeros([1, d]);
        for ((o, &e), &p) in x.data_mut().iter_mut().zip(s.get(m.embed).row(token.index())).zip(s.get(m.pos_embed).row(self.pos)) {
            *o = e + p;
        }
        let len = self.pos + 1;
        for (layer, cache) in m.layers.iter().zip(&mut self.caches) {
            let h = apply_norm(s, &layer.norm1, &x);
            let q = apply_linear(s, &layer.self_attn.q, &h);
            cache.self_k.extend_from_slice(apply_linear(s, &layer.self_attn.k, &h).data());
            cache.self_v.extend_from_slice(apply_linear(s, &layer.self_attn.v, &h).data());
            let k = Tensor::new([len, d], cache.self_k.clone()).unwrap();
            let v = Tensor::new([len, d], cache.self_v.clone()).unwrap();
            let a = single_query_attention(&layer.self_attn, &q, &k, &v);
            x.add_assign(&apply_linear(s, &layer.self_attn.out, &a));

            let h = apply_norm(s, &layer.norm2, &x);
            let q = apply_linear(s, &layer.cross_attn.q, &h);
            let a = single_query_attention(&layer.cross_attn, &q, &cache.cross_k, &cache.cross_v);
            debug_assert_eq!(cache.cross_k.rows(), self.mem_len);
            x.add_assign(&apply_linear(s, &layer.cross_attn.out, &a));

            let h = apply_norm(s, &layer.norm3, &x);
            let h = apply_linear(s, &layer.ffn.fc1, &h).map(kernels::gelu);
            x.add_assign(&apply_linear(s, &layer.ffn.fc2, &h));
        }
        self.pos += 1;
        let x = apply_norm(s, &m.norm, &x);
        apply_linear(s, &m.out, &x).into_data()
    }
}

fn apply_linear<T: Real>(s: &ParamStore<T>, l: &Linear, x: &Tensor<T>) -> Tensor<T> {
    kernels::linear(x, s.get(l.weight), l.bias.map(|b| s.get(b)))
}

fn apply_norm<T: Real>(s: &ParamStore<T>, n: &LayerNorm, x: &Tensor<T>) -> Tensor<T> {
    kernels::layer_norm(x, s.get(n.gamma), s.get(n.beta), T::from_f64_lossy(LN_EPS)).y
}

fn single_query_attention<T: Real>(mha: &MultiHeadAttention, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let layout = AttentionLayout {
        heads: mha.heads,
        q_segments: vec![Segment::new(0, 1)],
        k_segments: vec![Segment::new(0, k.rows())],
        causal: false,
    };
    kernels::attention(q, k, v, &layout).0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Encoder weights fixed; only the decoder trains.
    Frozen,
    /// Every weight trains.
    Full,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown schedule {s:?} (expected frozen or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub grad_clip: f64,
    pub adamw: AdamWConfig,
    /// Epoch budget of the frozen schedule; `None` uses `epochs`.
    pub frozen_epochs: Option<usize>,
    /// Validate every this many epochs (and after the last); 0 disables it.
    pub val_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 15, warmup_epochs: 5, batch_size: 16, peak_lr: 1e-4, grad_clip: 1.0, adamw: AdamWConfig::default(), frozen_epochs: None, val_every: 1 }
    }
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        Self { epochs: 12, warmup_epochs: 1, batch_size: 16, peak_lr: 1e-3, frozen_epochs: None, val_every: 4, ..Self::default() }
    }

    pub fn epochs_for(&self, schedule: Schedule) -> usize {
        match schedule {
            Schedule::Frozen => self.frozen_epochs.unwrap_or(self.epochs),
            Schedule::Full => self.epochs,
        }
    }
}

/// One labeled example: a normalized image and its framed structure sequence.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub tokens: TokenSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub teds_simple: Option<f64>,
    pub teds_complex: Option<f64>,
    pub teds_all: Option<f64>,
}

/// Encoder weights to start from.
pub enum Init<'a> {
    Scratch,
    Pretrained(&'a ParamStore<f32>),
}

/// Greedy-decodes every sample and scores it against its label.
pub fn evaluate_model(model: &TsrModel, store: &ParamStore<f32>, samples: &[Sample]) -> Result<TedsReport> {
    let pairs = samples
        .iter()
        .map(|s| Ok(EvalPair::new(s.id.clone(), model.greedy_decode(store, &s.image)?, s.tokens.clone())))
        .collect::<Result<Vec<_>>>()?;
    evaluate_corpus(&pairs)
}

/// Predictions for every sample, in input order.
pub fn predict(model: &TsrModel, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<TokenSeq>> {
    samples.iter().map(|s| model.greedy_decode(store, &s.image)).collect()
}

pub struct FinetuneOutput {
    pub model: TsrModel,
    pub store: ParamStore<f32>,
    pub history: Vec<FinetuneEpoch>,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

/// Trains a TSR model with teacher forcing.
///
/// With [`Schedule::Frozen`] the encoder is evaluated once per image in
/// inference mode and its features are reused every epoch.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    train: &[Sample],
    val: &[Sample],
    grid: PatchGrid,
    layers: &LayerConfig,
    init: Init<'_>,
    schedule: Schedule,
    config: &FinetuneConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&FinetuneEpoch),
) -> Result<FinetuneOutput> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = TsrModel::new(&mut store, grid, layers, &mut rng)?;
    if let Init::Pretrained(src) = init {
        store.load_prefix(src, VisualEncoder::PREFIX)?;
    }
    let encoder_hash_before = store.hash_prefix(VisualEncoder::PREFIX);
    if schedule == Schedule::Frozen {
        store.set_trainable_prefix(VisualEncoder::PREFIX, false);
    }
    for s in train {
        teacher_inputs(&s.tokens)?;
    }
    let frozen_features: Option<Vec<Tensor<f32>>> = match schedule {
        Schedule::Frozen => Some(train.iter().map(|s| model.encode(&store, &s.image)).collect::<Result<_>>()?),
        Schedule::Full => None,
    };

    let mut opt = AdamW::new(config.adamw.clone());
    let bs = config.batch_size.max(1);
    let per_epoch = train.len().div_ceil(bs);
    let epochs = config.epochs_for(schedule);
    let total = (per_epoch * epochs).max(2);
    let warmup = (per_epoch * config.warmup_epochs).min(total - 1);
    let schedule_lr = CosineWarmup::new(warmup, total, config.peak_lr)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for chunk in order.chunks(bs) {
            let seqs: Vec<&TokenSeq> = chunk.iter().map(|&i| &train[i].tokens).collect();
            lr = schedule_lr.lr(step)?;
            let mut grads = {
                let mut g = Graph::train(&store, rng.gen());
                let logits = match &frozen_features {
                    Some(f) => {
                        let d = layers.d_model;
                        let mut data = Vec::with_capacity(chunk.len() * grid.num_patches() * d);
                        for &i in chunk {
                            data.extend_from_slice(f[i].data());
                        }
                        let m = g.input(Tensor::new([chunk.len() * grid.num_patches(), d], data)?);
                        model.forward_from_features(&mut g, m, &seqs)?
                    }
                    None => {
                        let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train[i].image).collect();
                        let p = g.input(patchify_batch(&imgs, grid.patch)?);
                        model.forward(&mut g, p, &seqs)?
                    }
                };
                let loss = structure_loss(&mut g, logits, &seqs)?;
                let v = g.value(loss).data()[0] as f64;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { step, detail: format!("structure loss {v}") });
                }
                loss_sum += v;
                g.backward(loss).into_params()
            };
            clip_grad_norm(&mut grads, config.grad_clip);
            opt.step(&mut store, &grads, lr);
            step += 1;
        }
        let report = if config.val_every > 0 && !val.is_empty() && ((epoch + 1) % config.val_every == 0 || epoch + 1 == epochs) {
            Some(evaluate_model(&model, &store, val)?)
        } else {
            None
        };
        let e = FinetuneEpoch {
            epoch,
            loss: loss_sum / per_epoch as f64,
            lr,
            teds_simple: report.as_ref().and_then(|r| r.mean_simple),
            teds_complex: report.as_ref().and_then(|r| r.mean_complex),
            teds_all: report.as_ref().map(|r| r.mean_all),
        };
        on_epoch(&e);
        history.push(e);
    }
    if schedule == Schedule::Frozen {
        store.set_trainable_prefix(VisualEncoder::PREFIX, true);
    }
    let encoder_hash_after = store.hash_prefix(VisualEncoder::PREFIX);
    Ok(FinetuneOutput { model, store, history, encoder_hash_before, encoder_hash_after })
}
