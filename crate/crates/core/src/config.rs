//! One JSON document describing a whole experiment, with dot-path overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoder::PatchGrid;
use crate::error::{Error, Result};
use crate::grammar::VOCAB_SIZE;
use crate::mim::PretrainConfig;
use crate::nn::LayerConfig;
use crate::synth::SynthConfig;
use crate::tsr::{FinetuneConfig, MAX_SEQ_LEN};
use crate::vqvae::VqvaeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Mean and std fitted on the training images.
    Dataset,
    Imagenet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub normalization: Normalization,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, patch: 8, normalization: Normalization::Dataset }
    }
}

impl ImageConfig {
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.height, self.width, 3, self.patch)
    }
}

/// Corpus sizes used by the recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Unlabeled images for the tokenizer and masked-image pretraining.
    pub pretrain_images: usize,
    /// Share of the pretraining images held out for masked-token accuracy.
    pub heldout_fraction: f64,
    /// Labeled tables for fine-tuning and evaluation.
    pub labeled: usize,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { pretrain_images: 2000, heldout_fraction: 0.1, labeled: 1250, val_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Cap on decoded validation samples; `None` decodes all.
    pub max_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Artifact root; falls back to `TSR_OUTPUT_DIR`, then `runs`.
    pub output_dir: Option<String>,
    pub image: ImageConfig,
    pub model: LayerConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub vqvae: VqvaeConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            output_dir: None,
            image: ImageConfig::default(),
            model: LayerConfig::desk(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            vqvae: VqvaeConfig::desk(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::desk(),
            eval: EvalConfig::default(),
        }
    }
}

pub const OUTPUT_ENV: &str = "TSR_OUTPUT_DIR";

impl RunConfig {
    /// Full-size settings: 448×448 inputs, 16-pixel patches, the large model.
    pub fn full_size() -> Self {
        Self {
            image: ImageConfig { height: 448, width: 448, patch: 16, normalization: Normalization::Imagenet },
            model: LayerConfig::default(),
            synth: SynthConfig { height: 448, width: 448, max_rows: 12, max_cols: 8, max_span: 10, ..SynthConfig::default() },
            vqvae: VqvaeConfig::default(),
            finetune: FinetuneConfig::default(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Applies `a.b.c=value` overrides; the value is parsed as JSON and
    /// falls back to a plain string. Unknown paths are rejected.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(&self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not of the form path=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for key in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::Config(format!("unknown config path {path:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("override: {e}")))
    }

    /// Cross-phase consistency checks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let grid = self.image.grid()?;
        self.synth.validate_for_patch(self.image.patch)?;
        if (self.synth.height, self.synth.width) != (self.image.height, self.image.width) {
            return Err(Error::ConfigMismatch(format!(
                "synth renders {}x{} but the model reads {}x{}",
                self.synth.height, self.synth.width, self.image.height, self.image.width
            )));
        }
        self.vqvae.validate(&grid)?;
        let cells = self.synth.max_rows * self.synth.max_cols;
        let worst = 2 + 4 + 2 * self.synth.max_rows + 5 * cells;
        if worst > MAX_SEQ_LEN {
            return Err(Error::ConfigMismatch(format!(
                "synthetic tables up to {worst} tokens exceed the decoder limit of {MAX_SEQ_LEN}"
            )));
        }
        debug_assert_eq!(crate::grammar::vocab().len(), VOCAB_SIZE);
        for (name, r) in [
            ("pretrain.mask_ratio", self.pretrain.mask_ratio),
            ("data.heldout_fraction", self.data.heldout_fraction),
            ("data.val_fraction", self.data.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if self.finetune.epochs == 0 || self.pretrain.epochs == 0 || self.vqvae.epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        Ok(())
    }

    /// Short digest of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..6])
    }

    pub fn output_root(&self) -> std::path::PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var(OUTPUT_ENV).ok())
            .unwrap_or_else(|| "runs".into())
            .into()
    }

    /// Artifact name embedding the config digest and seed.
    pub fn artifact_name(&self, phase: &str) -> String {
        format!("{phase}-{}-s{}", self.hash(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
        RunConfig::full_size().validate().unwrap();
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&["finetune.epochs=3", "model.d_model=32", "synth.seed=9", "output_dir=out"])
            .unwrap();
        assert_eq!(c.finetune.epochs, 3);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.output_dir.as_deref(), Some("out"));
        assert!(matches!(RunConfig::default().with_overrides(&["finetune.nope=1"]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::default().with_overrides(&["seed"]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::default().with_overrides(&["seed=\"x\""]), Err(Error::Config(_))));
    }

    #[test]
    fn cross_phase_checks() {
        let c = RunConfig::default().with_overrides(&["image.patch=7"]).unwrap();
        assert!(matches!(c.validate(), Err(Error::IndivisibleImage { .. })));
        let c = RunConfig::default().with_overrides(&["vqvae.factors=[4,4]"]).unwrap();
        assert!(matches!(c.validate(), Err(Error::ConfigMismatch(_))));
        let c = RunConfig::default().with_overrides(&["synth.max_rows=30", "synth.max_cols=10"]).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert!(a.artifact_name("mim").starts_with("mim-"));
    }
}
