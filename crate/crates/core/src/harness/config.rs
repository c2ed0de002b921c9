use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concepts::BankSpec;
use crate::encoders::{vocab, EncoderConfig, PretrainOptions};
use crate::error::{CilmpError, Result};
use crate::intervention::InterventionMode;
use crate::params::OptimizerConfig;
use crate::prompts::{PromptConfig, PromptMode};

/// Shape of the concept bank; its seed is derived from the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// `L_h`.
    pub seq_len: usize,
    /// `D_h`.
    pub width: usize,
    pub layer_drift: f64,
    pub noise: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        let s = BankSpec::default();
        BankConfig {
            seq_len: s.seq_len,
            width: s.width,
            layer_drift: s.layer_drift,
            noise: s.noise,
        }
    }
}

impl BankConfig {
    pub fn spec(&self, seed: u64) -> BankSpec {
        BankSpec {
            seed,
            seq_len: self.seq_len,
            width: self.width,
            layer_drift: self.layer_drift,
            noise: self.noise,
        }
    }
}

/// The synthetic world: visual attributes, the classes built from them,
/// and how much the concept bank knows about them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Attributes owned by each class.
    pub attributes_per_class: usize,
    /// Leading attributes of each class that appear in tuning images; test
    /// images draw from all of them.
    pub seen_attributes: usize,
    /// Distinct attributes shown by one image.
    pub attributes_per_image: usize,
    /// Attributes owned by no class, used only in pretraining.
    pub background_attributes: usize,
    /// Scale of attribute prototypes in token space.
    pub margin: f64,
    /// Std of per-token Gaussian noise.
    pub noise: f64,
    /// Weight of the true attribute direction in each bank base row; 0
    /// makes the bank independent of the world.
    pub knowledge_corr: f64,
    /// Weight of one direction shared by every bank row, independent of
    /// `knowledge_corr`.
    pub bank_common: f64,
    /// Image-caption pairs for contrastive pretraining.
    pub pretrain_pairs: usize,
    /// Length of every pretraining caption including its end token;
    /// attribute words sit at random positions among filler words.
    pub caption_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_per_class: 16,
            test_per_class: 50,
            attributes_per_class: 4,
            seen_attributes: 4,
            attributes_per_image: 2,
            background_attributes: 8,
            margin: 1.0,
            noise: 0.5,
            knowledge_corr: 0.8,
            bank_common: 1.0,
            pretrain_pairs: 512,
            caption_len: 14,
        }
    }
}

/// Everything one training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub classes: usize,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub bank: BankConfig,
    pub pretrain: PretrainOptions,
    pub prompt: PromptConfig,
    pub mode: PromptMode,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Clamped to the training-set size.
    pub batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            classes: 4,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            bank: BankConfig::default(),
            pretrain: PretrainOptions::default(),
            prompt: PromptConfig::default(),
            mode: PromptMode::Cilmp,
            optimizer: OptimizerConfig::default(),
            epochs: 100,
            batch_size: 64,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CilmpError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CilmpError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Number of vocabulary ids the world needs.
    pub fn vocab_needed(&self) -> usize {
        vocab::FIRST_FREE + self.classes + self.attribute_count()
    }

    pub fn attribute_count(&self) -> usize {
        self.classes * self.data.attributes_per_class + self.data.background_attributes
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.min(self.classes * self.data.train_per_class).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CilmpError::Config(msg));
        let d = &self.data;
        if self.classes < 2 {
            return bad(format!("classes = {}; at least 2 are needed", self.classes));
        }
        if d.train_per_class == 0 || d.test_per_class == 0 {
            return bad("train_per_class and test_per_class must be positive".into());
        }
        if d.attributes_per_class == 0 || d.seen_attributes == 0 || d.seen_attributes > d.attributes_per_class {
            return bad(format!(
                "seen_attributes {} must lie in 1..={}",
                d.seen_attributes, d.attributes_per_class
            ));
        }
        if d.attributes_per_image == 0 || d.attributes_per_image > d.seen_attributes {
            return bad(format!(
                "attributes_per_image {} must lie in 1..={}",
                d.attributes_per_image, d.seen_attributes
            ));
        }
        if d.attributes_per_image > self.encoder.image_tokens {
            return bad("attributes_per_image exceeds image_tokens".into());
        }
        if d.caption_len < d.attributes_per_image + 1 || d.caption_len > self.encoder.text_max_len {
            return bad(format!(
                "caption_len {} must lie in {}..={}",
                d.caption_len,
                d.attributes_per_image + 1,
                self.encoder.text_max_len
            ));
        }
        if !(d.bank_common >= 0.0) {
            return bad(format!("bank_common {} must be non-negative", d.bank_common));
        }
        if !(0.0..=1.0).contains(&d.knowledge_corr) {
            return bad(format!("knowledge_corr {} must lie in [0, 1]", d.knowledge_corr));
        }
        if !(d.margin > 0.0) || !(d.noise >= 0.0) || !d.margin.is_finite() || !d.noise.is_finite() {
            return bad("margin must be positive and noise non-negative".into());
        }
        if d.pretrain_pairs < 2 {
            return bad("pretrain_pairs must be at least 2".into());
        }
        self.encoder.validate()?;
        if self.encoder.vocab_size < self.vocab_needed() {
            return bad(format!(
                "encoder.vocab_size {} is below the {} ids the world needs",
                self.encoder.vocab_size,
                self.vocab_needed()
            ));
        }
        if self.bank.seq_len == 0 || self.bank.width == 0 {
            return bad("bank extents must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bank.layer_drift) || !(self.bank.noise >= 0.0) {
            return bad("bank.layer_drift must lie in [0, 1] and bank.noise be non-negative".into());
        }
        if self.pretrain.batch_size < 2 {
            return bad("pretrain.batch_size must be at least 2".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let p = &self.prompt;
        if p.context_len == 0 || p.r_proj == 0 || p.r_sub == 0 || p.r_z == 0 {
            return bad("prompt lengths and ranks must be positive".into());
        }
        if self.mode.uses_bank() {
            p.positions().validate(self.bank.seq_len)?;
            if self.mode.intervention() != InterventionMode::Identity && p.r_sub > self.bank.width {
                return bad(format!("r_sub {} exceeds the bank width {}", p.r_sub, self.bank.width));
            }
        }
        match self.optimizer {
            OptimizerConfig::Sgd { lr, momentum } if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) => {
                bad(format!("sgd lr {lr} must be positive and momentum {momentum} in [0, 1)"))
            }
            OptimizerConfig::Adam { lr, .. } if !(lr > 0.0) => bad(format!("adam lr {lr} must be positive")),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.prompt.context_len, 4);
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.optimizer, OptimizerConfig::Sgd { lr: 0.0025, momentum: 0.9 });
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 7, "mode": "no_rd", "prompt": {"r_sub": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mode, PromptMode::NoRd);
        assert_eq!(cfg.prompt.r_sub, 2);
        assert_eq!(cfg.prompt.r_proj, 8);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_config_errors() {
        for text in [
            r#"{"sede": 1}"#,
            r#"{"classes": 1}"#,
            r#"{"data": {"knowledge_corr": 1.5}}"#,
            r#"{"mode": "lora"}"#,
            r#"{"prompt": {"prefix_len": 6}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(CilmpError::Config(_))), "{text}");
        }
    }

    #[test]
    fn batch_size_clamps_to_training_set() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.train_per_class = 3;
        assert_eq!(cfg.effective_batch_size(), 12);
    }
}
