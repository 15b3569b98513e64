//! Phase drivers shared by the command line and the end-to-end recipe.
//!
//! Every phase reads its inputs from dataset or checkpoint directories and
//! writes a checkpoint whose manifest carries enough configuration to
//! rebuild the model (image geometry, layer sizes, normalization).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Normalization, RunConfig};
use crate::dataset::{load_images, load_labeled, LabeledImage};
use crate::encoder::PatchGrid;
use crate::error::{Error, Result};
use crate::imageio::Normalizer;
use crate::mim::{pretrain, MimModel, PretrainData, PretrainEpoch};
use crate::nn::checkpoint;
use crate::nn::{LayerConfig, ParamStore};
use crate::synth::{build_dataset, DatasetSummary, SynthConfig};
use crate::teds::{format_table, TedsReport};
use crate::tensor::Tensor;
use crate::tsr::{evaluate_model, finetune, FinetuneEpoch, Init, Sample, Schedule, TsrModel};
use crate::vqvae::{train_vqvae, TokenGrid, Vqvae, VqvaeConfig, VqvaeEpoch};

pub const TAG_VQVAE: &str = "vqvae";
pub const TAG_MIM: &str = "mim";
pub const TAG_TSR: &str = "tsr";

/// Progress sink; receives one human-readable line per event.
pub type Log<'a> = &'a mut dyn FnMut(&str);

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn normalizer_for(cfg: &RunConfig, images: &[Tensor<f32>]) -> Normalizer {
    match cfg.image.normalization {
        Normalization::Dataset => Normalizer::fit(images),
        Normalization::Imagenet => Normalizer::IMAGENET,
    }
}

fn field<T: serde::de::DeserializeOwned>(v: &Value, key: &str) -> Result<T> {
    let x = v.get(key).ok_or_else(|| Error::CheckpointMismatch(format!("manifest config lacks {key:?}")))?;
    Ok(serde_json::from_value(x.clone())?)
}

fn check_tag(m: &checkpoint::Manifest, tag: &str, dir: &Path) -> Result<()> {
    if m.tag != tag {
        return Err(Error::CheckpointMismatch(format!("{} holds a {:?} checkpoint, expected {tag:?}", dir.display(), m.tag)));
    }
    Ok(())
}

/// Writes a synthetic dataset.
pub fn synth_phase(dir: &Path, n: usize, synth: &SynthConfig) -> Result<DatasetSummary> {
    build_dataset(dir, n, synth)
}

pub struct VqvaeArtifact {
    pub model: Vqvae,
    pub store: ParamStore<f32>,
    pub normalizer: Normalizer,
    pub history: Vec<VqvaeEpoch>,
}

/// Trains the tokenizer on every image of `data` (labels are not read).
pub fn vqvae_phase(cfg: &RunConfig, data: &Path, out: &Path, log: Log) -> Result<VqvaeArtifact> {
    let grid = cfg.image.grid()?;
    let raw: Vec<Tensor<f32>> = load_images(data, cfg.image.height, cfg.image.width)?.into_iter().map(|x| x.1).collect();
    let normalizer = normalizer_for(cfg, &raw);
    let images: Vec<Tensor<f32>> = raw.iter().map(|x| normalizer.apply(x)).collect();
    log(&format!("vqvae: {} images, K={}", images.len(), cfg.vqvae.codebook_size));
    let (model, store, history) = train_vqvae(&images, grid, &cfg.vqvae, cfg.seed, |e| {
        log(&format!("vqvae epoch {} loss {:.5} tau {:.4}", e.epoch, e.loss, e.tau))
    })?;
    let config = json!({ "image": cfg.image, "vqvae": cfg.vqvae, "normalizer": normalizer });
    checkpoint::save(out, &store, TAG_VQVAE, cfg.seed, config)?;
    write_jsonl(&out.join("history.jsonl"), &history)?;
    Ok(VqvaeArtifact { model, store, normalizer, history })
}

pub fn load_vqvae(dir: &Path) -> Result<(Vqvae, ParamStore<f32>, Normalizer, PatchGrid)> {
    let (src, m) = checkpoint::load::<f32>(dir)?;
    check_tag(&m, TAG_VQVAE, dir)?;
    let image: crate::config::ImageConfig = field(&m.config, "image")?;
    let vq: VqvaeConfig = field(&m.config, "vqvae")?;
    let normalizer: Normalizer = field(&m.config, "normalizer")?;
    let grid = image.grid()?;
    let mut store = ParamStore::new();
    let model = Vqvae::new(&mut store, grid, vq, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_prefix(&src, "")?;
    Ok((model, store, normalizer, grid))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub images: usize,
    pub heldout: usize,
    pub distinct_codes: usize,
    pub history: Vec<PretrainEpoch>,
}

pub struct MimArtifact {
    pub model: MimModel,
    pub store: ParamStore<f32>,
    pub normalizer: Normalizer,
    pub summary: PretrainSummary,
}

/// Masked-image pretraining on the images of `data`; only `images/` is read.
pub fn pretrain_phase(cfg: &RunConfig, data: &Path, vqvae_dir: &Path, out: &Path, log: Log) -> Result<MimArtifact> {
    let (vq, vq_store, normalizer, vq_grid) = load_vqvae(vqvae_dir)?;
    let grid = cfg.image.grid()?;
    if vq_grid != grid {
        return Err(Error::ConfigMismatch(format!("tokenizer grid {vq_grid:?} differs from encoder grid {grid:?}")));
    }
    let images: Vec<Tensor<f32>> = load_images(data, cfg.image.height, cfg.image.width)?
        .into_iter()
        .map(|(_, x)| normalizer.apply(&x))
        .collect();
    let mut targets = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        targets.extend(vq.tokenize_batch(&vq_store, &refs)?);
    }
    fs::create_dir_all(out.parent().unwrap_or(Path::new("."))).map_err(|e| Error::io(out, e))?;
    let mut all_codes: Vec<u32> = targets.iter().flat_map(|t| t.codes.iter().copied()).collect();
    all_codes.sort_unstable();
    all_codes.dedup();
    log(&format!("pretrain: {} images, {} distinct codes in use", images.len(), all_codes.len()));

    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4e1d));
    let n_held = ((images.len() as f64 * cfg.data.heldout_fraction).round() as usize).min(images.len() - 1);
    let (held_idx, train_idx) = order.split_at(n_held);
    let pick = |idx: &[usize]| -> (Vec<Tensor<f32>>, Vec<TokenGrid>) {
        let mut ii = idx.to_vec();
        ii.sort_unstable();
        (ii.iter().map(|&i| images[i].clone()).collect(), ii.iter().map(|&i| targets[i].clone()).collect())
    };
    let (tr_img, tr_tg) = pick(train_idx);
    let (ho_img, ho_tg) = pick(held_idx);
    let heldout = (!ho_img.is_empty()).then_some(PretrainData { images: &ho_img, targets: &ho_tg });
    let (model, store, history) = pretrain(
        PretrainData { images: &tr_img, targets: &tr_tg },
        heldout,
        grid,
        &cfg.model,
        vq.codebook_size(),
        &cfg.pretrain,
        cfg.seed,
        |e| {
            log(&format!(
                "pretrain epoch {} loss {:.4} acc {:.4} heldout acc {}",
                e.epoch,
                e.loss,
                e.masked_accuracy,
                e.heldout_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
            ))
        },
    )?;
    let config = json!({
        "image": cfg.image,
        "model": cfg.model,
        "codebook_size": vq.codebook_size(),
        "normalizer": normalizer,
    });
    checkpoint::save(out, &store, TAG_MIM, cfg.seed, config)?;
    write_jsonl(&out.join("progress.jsonl"), &history)?;
    write_json(&out.join("targets.json"), &targets.iter().map(TokenGrid::to_matrix).collect::<Vec<_>>())?;
    let summary = PretrainSummary { images: tr_img.len(), heldout: ho_img.len(), distinct_codes: all_codes.len(), history };
    Ok(MimArtifact { model, store, normalizer, summary })
}

pub fn load_mim(dir: &Path) -> Result<(MimModel, ParamStore<f32>, Normalizer)> {
    let (src, m) = checkpoint::load::<f32>(dir)?;
    check_tag(&m, TAG_MIM, dir)?;
    let image: crate::config::ImageConfig = field(&m.config, "image")?;
    let layers: LayerConfig = field(&m.config, "model")?;
    let k: usize = field(&m.config, "codebook_size")?;
    let normalizer: Normalizer = field(&m.config, "normalizer")?;
    let mut store = ParamStore::new();
    let model = MimModel::new(&mut store, image.grid()?, &layers, k, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_prefix(&src, "")?;
    Ok((model, store, normalizer))
}

/// Encoder initialization for fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "checkpoint")]
pub enum InitSpec {
    Scratch,
    Mim(PathBuf),
}

impl std::str::FromStr for InitSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "scratch" => Ok(Self::Scratch),
            Some(("mim", p)) if !p.is_empty() => Ok(Self::Mim(PathBuf::from(p))),
            _ => Err(Error::Config(format!("unknown init {s:?} (expected scratch or mim:<checkpoint>)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub init: String,
    pub schedule: Schedule,
    pub train: usize,
    pub val: usize,
    pub history: Vec<FinetuneEpoch>,
    pub report: Option<TedsReport>,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

fn to_samples(items: Vec<LabeledImage>, normalizer: &Normalizer) -> Vec<Sample> {
    items.into_iter().map(|x| Sample { id: x.id, image: normalizer.apply(&x.image), tokens: x.tokens }).collect()
}

fn capped(val: &[Sample], cap: Option<usize>) -> &[Sample] {
    &val[..cap.map_or(val.len(), |c| c.min(val.len()))]
}

/// Fine-tunes on the labeled dataset and scores the validation split.
pub fn finetune_phase(
    cfg: &RunConfig,
    data: &Path,
    init: &InitSpec,
    schedule: Schedule,
    out: &Path,
    log: Log,
) -> Result<FinetuneSummary> {
    let grid = cfg.image.grid()?;
    let labeled = load_labeled(data, cfg.image.height, cfg.image.width)?;
    if labeled.report.unknown_tokens > 0 {
        log(&format!("finetune: {} tokens outside the vocabulary mapped to <unk>", labeled.report.unknown_tokens));
    }
    let pretrained = match init {
        InitSpec::Scratch => None,
        InitSpec::Mim(p) => Some(load_mim(p)?),
    };
    let normalizer = match &pretrained {
        Some((m, _, n)) => {
            if m.encoder.grid != grid {
                return Err(Error::CheckpointMismatch(format!("encoder grid {:?} vs {:?}", m.encoder.grid, grid)));
            }
            n.clone()
        }
        None => {
            let imgs: Vec<Tensor<f32>> = labeled.train.iter().map(|x| x.image.clone()).collect();
            normalizer_for(cfg, &imgs)
        }
    };
    let train = to_samples(labeled.train, &normalizer);
    let val = to_samples(labeled.val, &normalizer);
    let val = capped(&val, cfg.eval.max_samples);
    let init_name = match init {
        InitSpec::Scratch => "scratch".to_string(),
        InitSpec::Mim(_) => "mim".to_string(),
    };
    log(&format!("finetune[{init_name}/{schedule:?}]: {} train, {} val", train.len(), val.len()));
    let result = finetune(
        &train,
        val,
        grid,
        &cfg.model,
        match &pretrained {
            Some((_, s, _)) => Init::Pretrained(s),
            None => Init::Scratch,
        },
        schedule,
        &cfg.finetune,
        cfg.seed,
        |e| {
            log(&format!(
                "finetune[{init_name}/{schedule:?}] epoch {} loss {:.4} lr {:.2e} teds {}",
                e.epoch,
                e.loss,
                e.lr,
                e.teds_all.map_or("-".into(), |t| format!("{t:.2}"))
            ))
        },
    )?;
    let report = if val.is_empty() { None } else { Some(evaluate_model(&result.model, &result.store, val)?) };
    let config = json!({
        "image": cfg.image,
        "model": cfg.model,
        "normalizer": normalizer,
        "schedule": schedule,
        "init": init_name,
    });
    checkpoint::save(out, &result.store, TAG_TSR, cfg.seed, config)?;
    write_jsonl(&out.join("metrics.jsonl"), &result.history)?;
    Ok(FinetuneSummary {
        init: init_name,
        schedule,
        train: train.len(),
        val: val.len(),
        history: result.history,
        report,
        encoder_hash_before: result.encoder_hash_before,
        encoder_hash_after: result.encoder_hash_after,
    })
}

pub fn load_tsr(dir: &Path) -> Result<(TsrModel, ParamStore<f32>, Normalizer, crate::config::ImageConfig)> {
    let (src, m) = checkpoint::load::<f32>(dir)?;
    check_tag(&m, TAG_TSR, dir)?;
    let image: crate::config::ImageConfig = field(&m.config, "image")?;
    let layers: LayerConfig = field(&m.config, "model")?;
    let normalizer: Normalizer = field(&m.config, "normalizer")?;
    let mut store = ParamStore::new();
    let model = TsrModel::new(&mut store, image.grid()?, &layers, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_prefix(&src, "")?;
    Ok((model, store, normalizer, image))
}

/// Greedy-decodes the validation split of `data` with a saved model.
pub fn evaluate_checkpoint(model_dir: &Path, data: &Path, max_samples: Option<usize>) -> Result<(TedsReport, Vec<(String, crate::grammar::TokenSeq)>)> {
    let (model, store, normalizer, image) = load_tsr(model_dir)?;
    let labeled = load_labeled(data, image.height, image.width)?;
    let val = to_samples(if labeled.val.is_empty() { labeled.train } else { labeled.val }, &normalizer);
    let val = capped(&val, max_samples);
    let preds = crate::tsr::predict(&model, &store, val)?;
    let pairs: Vec<crate::teds::EvalPair> = val
        .iter()
        .zip(&preds)
        .map(|(s, p)| crate::teds::EvalPair::new(s.id.clone(), p.clone(), s.tokens.clone()))
        .collect();
    let report = crate::teds::evaluate_corpus(&pairs)?;
    Ok((report, val.iter().map(|s| s.id.clone()).zip(preds).collect()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecipeMetrics {
    pub config_hash: String,
    pub seed: u64,
    pub labeled: DatasetSummary,
    pub unlabeled: DatasetSummary,
    pub vqvae_final_loss: f64,
    pub pretrain: PretrainSummary,
    pub scratch: FinetuneSummary,
    pub pretrained_full: FinetuneSummary,
    pub pretrained_frozen: FinetuneSummary,
}

impl RecipeMetrics {
    fn all(s: &FinetuneSummary) -> f64 {
        s.report.as_ref().map_or(0.0, |r| r.mean_all)
    }

    /// Pretrained-and-fully-finetuned All-TEDS minus scratch All-TEDS.
    pub fn ssp_gain(&self) -> f64 {
        Self::all(&self.pretrained_full) - Self::all(&self.scratch)
    }

    /// Absolute All-TEDS difference between the frozen and full schedules.
    pub fn schedule_gap(&self) -> f64 {
        (Self::all(&self.pretrained_frozen) - Self::all(&self.pretrained_full)).abs()
    }

    pub fn heldout_mim_accuracy(&self) -> Option<f64> {
        self.pretrain.history.last().and_then(|e| e.heldout_accuracy)
    }

    pub fn table(&self) -> String {
        let empty = TedsReport { samples: vec![], mean_simple: None, mean_complex: None, mean_all: 0.0 };
        let r = |s: &FinetuneSummary| s.report.clone().unwrap_or_else(|| empty.clone());
        let (a, b, c) = (r(&self.scratch), r(&self.pretrained_frozen), r(&self.pretrained_full));
        format_table(&[("LinearProj (from scratch)", &a), ("LinearProj (frozen)", &b), ("LinearProj", &c)])
    }
}

/// Paths of the recipe's artifacts under one run directory.
pub struct RecipeLayout {
    pub root: PathBuf,
}

impl RecipeLayout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.output_root().join(cfg.artifact_name("recipe")) }
    }
    pub fn labeled(&self) -> PathBuf {
        self.root.join("data-labeled")
    }
    pub fn unlabeled(&self) -> PathBuf {
        self.root.join("data-unlabeled")
    }
    pub fn vqvae(&self) -> PathBuf {
        self.root.join("vqvae")
    }
    pub fn mim(&self) -> PathBuf {
        self.root.join("mim")
    }
    pub fn tsr(&self, name: &str) -> PathBuf {
        self.root.join(format!("tsr-{name}"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
}

/// Synthetic data, tokenizer, pretraining, three fine-tuning runs and the comparison table.
pub fn recipe(cfg: &RunConfig, layout: &RecipeLayout, log: Log) -> Result<RecipeMetrics> {
    cfg.validate()?;
    let mut labeled_synth = cfg.synth.clone();
    labeled_synth.val_fraction = cfg.data.val_fraction;
    let labeled = synth_phase(&layout.labeled(), cfg.data.labeled, &labeled_synth)?;
    let unlabeled_synth = SynthConfig { seed: cfg.synth.seed.wrapping_add(0x1000), ..cfg.synth.clone() };
    let unlabeled = synth_phase(&layout.unlabeled(), cfg.data.pretrain_images, &unlabeled_synth)?;
    // Pretraining never needs annotations.
    let labels = layout.unlabeled().join(crate::dataset::LABELS_FILE);
    fs::remove_file(&labels).map_err(|e| Error::io(&labels, e))?;
    log(&format!("data: {} labeled ({} val), {} unlabeled", labeled.total, labeled.val, unlabeled.total));

    let vq = vqvae_phase(cfg, &layout.unlabeled(), &layout.vqvae(), log)?;
    let mim = pretrain_phase(cfg, &layout.unlabeled(), &layout.vqvae(), &layout.mim(), log)?;
    let mim_init = InitSpec::Mim(layout.mim());
    let scratch = finetune_phase(cfg, &layout.labeled(), &InitSpec::Scratch, Schedule::Full, &layout.tsr("scratch"), log)?;
    let full = finetune_phase(cfg, &layout.labeled(), &mim_init, Schedule::Full, &layout.tsr("full"), log)?;
    let frozen = finetune_phase(cfg, &layout.labeled(), &mim_init, Schedule::Frozen, &layout.tsr("frozen"), log)?;
    let metrics = RecipeMetrics {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        labeled,
        unlabeled,
        vqvae_final_loss: vq.history.last().map_or(f64::NAN, |e| e.loss),
        pretrain: mim.summary,
        scratch,
        pretrained_full: full,
        pretrained_frozen: frozen,
    };
    write_json(&layout.metrics(), &metrics)?;
    write_json(&layout.root.join("config.json"), cfg)?;
    fs::write(layout.root.join("table.txt"), metrics.table()).map_err(|e| Error::io(&layout.root, e))?;
    Ok(metrics)
}
