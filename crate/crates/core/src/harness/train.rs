use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{generate_dataset, stream, Split, Stream, SyntheticDataset};
use crate::concepts::ConceptBank;
use crate::encoders::Clip;
use crate::error::{CilmpError, Result};
use crate::metrics::{evaluate, EvalBatch, MetricSet};
use crate::params::Optimizer;
use crate::prompts::{PromptMode, PromptModel};

/// Encoders after contrastive pretraining, not yet frozen.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub clip: Clip,
    pub loss_trace: Vec<f64>,
}

/// Checksum pair recorded around prompt tuning, as 16 hex digits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecksumPair {
    pub before: String,
    pub after: String,
}

impl ChecksumPair {
    fn new(before: u64, after: u64) -> Self {
        ChecksumPair {
            before: format!("{before:016x}"),
            after: format!("{after:016x}"),
        }
    }

    pub fn unchanged(&self) -> bool {
        self.before == self.after
    }
}

/// Everything a run produces except timing, so two runs of one config
/// serialise to identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub seed: u64,
    pub mode: PromptMode,
    pub config: ExperimentConfig,
    pub pretrain_loss: Vec<f64>,
    /// Mean tuning loss of every epoch.
    pub loss_trace: Vec<f64>,
    pub metrics: MetricSet,
    pub trainable_param_count: usize,
    pub encoder_checksum: ChecksumPair,
    pub bank_checksum: ChecksumPair,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Wall-clock cost of one run, kept apart from the report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub pretrain_seconds: f64,
    pub tune_seconds: f64,
}

#[derive(Debug)]
pub struct TrainedRun {
    pub report: RunReport,
    pub model: PromptModel,
    pub timing: Timing,
}

/// Phase 1: contrastive pretraining of fresh encoders on the world's pairs.
pub fn pretrain_phase(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> Result<Pretrained> {
    let mut clip = Clip::new(cfg.encoder.clone(), &mut stream(cfg.seed, Stream::EncoderInit))?;
    let mut opts = cfg.pretrain.clone();
    opts.seed ^= stream(cfg.seed, Stream::PretrainOrder).random::<u64>();
    let loss_trace = clip.pretrain(&ds.pretrain_images, &ds.pretrain_captions, &opts)?;
    Ok(Pretrained { clip, loss_trace })
}

/// Builds the prompt model of `cfg.mode` on top of pretrained encoders,
/// freezing them. Shared parameters start from the same values in every mode.
pub fn build_model(cfg: &ExperimentConfig, ds: &SyntheticDataset, bank: &ConceptBank, clip: Clip) -> Result<PromptModel> {
    PromptModel::new(
        clip,
        bank,
        ds.class_tokens.clone(),
        cfg.mode,
        cfg.prompt.clone(),
        &mut stream(cfg.seed, Stream::PromptInit),
    )
}

pub fn evaluate_split(model: &PromptModel, split: &Split) -> Result<MetricSet> {
    let preds = model.predict_batch(&split.image_refs())?;
    evaluate(&EvalBatch::from_predictions(split.labels.clone(), &preds)?)
}

/// Phase 2: prompt tuning with frozen encoders, then evaluation of the
/// last-epoch model on the test split.
pub fn tune_phase(cfg: &ExperimentConfig, ds: &SyntheticDataset, bank: &ConceptBank, pre: &Pretrained) -> Result<TrainedRun> {
    let start = Instant::now();
    let mut model = build_model(cfg, ds, bank, pre.clip.clone())?;
    let encoder_before = model.encoder_checksum();
    let bank_before = model.bank().checksum();
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut rng = stream(cfg.seed, Stream::TuneOrder);
    let n = ds.train.len();
    let batch = cfg.effective_batch_size();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut last_norm = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(batch).enumerate() {
            let images: Vec<_> = idx.iter().map(|&i| &ds.train.images[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| ds.train.labels[i]).collect();
            let stats = model.train_step_stats(&mut opt, &images, &labels).map_err(|e| match e {
                CilmpError::Numerical(msg) => CilmpError::Numerical(format!(
                    "{msg} (mode {}, epoch {epoch}, step {step}, previous gradient norm {last_norm:e})",
                    cfg.mode
                )),
                other => other,
            })?;
            last_norm = stats.grad_norm;
            total += stats.loss;
            steps += 1;
        }
        trace.push(total / steps as f64);
    }
    let metrics = evaluate_split(&model, &ds.test)?;
    let report = RunReport {
        seed: cfg.seed,
        mode: cfg.mode,
        config: cfg.clone(),
        pretrain_loss: pre.loss_trace.clone(),
        loss_trace: trace,
        metrics,
        trainable_param_count: model.trainable_param_count(),
        encoder_checksum: ChecksumPair::new(encoder_before, model.encoder_checksum()),
        bank_checksum: ChecksumPair::new(bank_before, model.bank().checksum()),
    };
    Ok(TrainedRun {
        report,
        model,
        timing: Timing {
            pretrain_seconds: 0.0,
            tune_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Both phases from scratch.
pub fn train_full(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let (ds, bank) = generate_dataset(cfg)?;
    let start = Instant::now();
    let pre = pretrain_phase(cfg, &ds)?;
    let pretrain_seconds = start.elapsed().as_secs_f64();
    let mut run = tune_phase(cfg, &ds, &bank, &pre)?;
    run.timing.pretrain_seconds = pretrain_seconds;
    Ok(run)
}

pub fn train(cfg: &ExperimentConfig) -> Result<RunReport> {
    Ok(train_full(cfg)?.report)
}
