//! Paired-seed ablations and hyper-parameter sweeps.
//!
//! Every cell of a grid shares its seed's world, pretrained encoders and
//! shared-parameter initialisation, so cells differ only in what the grid
//! varies. Seeds run in parallel, capped by `CILMP_THREADS`.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::generate_dataset;
use super::report::{exact, fixed6, CsvTable};
use super::train::{pretrain_phase, tune_phase, Pretrained, RunReport};
use crate::error::{CilmpError, Result};
use crate::metrics::{aggregate, AggregateMetrics, MetricSet, StdKind};
use crate::prompts::PromptMode;

/// Metrics of one (cell, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub mode: PromptMode,
    pub seed: u64,
    pub metrics: MetricSet,
    pub trainable_param_count: usize,
    pub final_loss: f64,
}

/// Aggregate of one grid cell over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub mode: PromptMode,
    pub seeds: usize,
    pub trainable_param_count: usize,
    pub metrics: AggregateMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// In grid order.
    pub cells: Vec<CellSummary>,
    /// Sorted by (cell, seed).
    pub runs: Vec<RunRecord>,
}

/// Largest number of worker threads, from `CILMP_THREADS` when set.
pub fn thread_cap() -> usize {
    let default = std::thread::available_parallelism().map_or(1, usize::from);
    std::env::var("CILMP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(default)
}

/// Pretraining depends on everything but the prompt settings, the mode,
/// the tuning schedule and the bank's informativeness.
fn pretrain_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.data.knowledge_corr = 0.0;
    c.bank = Default::default();
    c.prompt = Default::default();
    c.mode = PromptMode::Cilmp;
    c.optimizer = Default::default();
    c.epochs = 0;
    c.batch_size = 1;
    serde_json::to_string(&c).expect("config serialises")
}

fn run_seed(cells: &[(String, ExperimentConfig)], seed: u64) -> Result<Vec<(usize, RunReport)>> {
    let mut cache: BTreeMap<String, Pretrained> = BTreeMap::new();
    let mut out = Vec::with_capacity(cells.len());
    for (i, (_, base)) in cells.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let (ds, bank) = generate_dataset(&cfg)?;
        let key = pretrain_key(&cfg);
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), pretrain_phase(&cfg, &ds)?);
        }
        let run = tune_phase(&cfg, &ds, &bank, &cache[&key])?;
        out.push((i, run.report));
    }
    Ok(out)
}

/// Runs every cell for every seed. Results do not depend on the thread count.
pub fn run_grid(cells: &[(String, ExperimentConfig)], seeds: &[u64]) -> Result<GridResult> {
    if cells.is_empty() {
        return Err(CilmpError::Config("an ablation needs at least one cell".into()));
    }
    if seeds.len() < 2 {
        return Err(CilmpError::Config("an ablation needs at least two seeds".into()));
    }
    let mut distinct = seeds.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != seeds.len() {
        return Err(CilmpError::Config("ablation seeds must be distinct".into()));
    }
    for (_, c) in cells {
        c.validate()?;
    }
    let workers = thread_cap().min(seeds.len());
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<(u64, Result<Vec<(usize, RunReport)>>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = {
                    let mut n = next.lock().expect("lock");
                    let k = *n;
                    *n += 1;
                    k
                };
                let Some(&seed) = seeds.get(k) else { break };
                let r = run_seed(cells, seed);
                results.lock().expect("lock").push((seed, r));
            });
        }
    });
    let mut results = results.into_inner().expect("lock");
    results.sort_by_key(|(seed, _)| *seed);
    let mut runs = Vec::with_capacity(cells.len() * seeds.len());
    for (_, r) in results {
        for (i, report) in r? {
            runs.push((i, report));
        }
    }
    runs.sort_by_key(|(i, r)| (*i, r.seed));
    let mut summaries = Vec::with_capacity(cells.len());
    for (i, (label, cfg)) in cells.iter().enumerate() {
        let cell: Vec<&RunReport> = runs.iter().filter(|(j, _)| *j == i).map(|(_, r)| r).collect();
        let metrics: Vec<MetricSet> = cell.iter().map(|r| r.metrics).collect();
        summaries.push(CellSummary {
            label: label.clone(),
            mode: cfg.mode,
            seeds: cell.len(),
            trainable_param_count: cell[0].trainable_param_count,
            metrics: aggregate(&metrics, StdKind::Population)?,
        });
    }
    let records = runs
        .into_iter()
        .map(|(i, r)| RunRecord {
            label: cells[i].0.clone(),
            mode: r.mode,
            seed: r.seed,
            metrics: r.metrics,
            trainable_param_count: r.trainable_param_count,
            final_loss: r.loss_trace.last().copied().unwrap_or(f64::NAN),
        })
        .collect();
    Ok(GridResult {
        cells: summaries,
        runs: records,
    })
}

/// One cell per mode, ordered as the modes enum declares them.
pub fn run_ablation(cfg: &ExperimentConfig, modes: &[PromptMode], seeds: &[u64]) -> Result<GridResult> {
    if modes.is_empty() {
        return Err(CilmpError::Config("an ablation needs at least one mode".into()));
    }
    let mut modes = modes.to_vec();
    modes.sort_unstable();
    modes.dedup();
    let cells: Vec<(String, ExperimentConfig)> = modes
        .iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.mode = m;
            (m.name().to_string(), c)
        })
        .collect();
    run_grid(&cells, seeds)
}

/// Hyper-parameter swept by [`run_sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// `L_prefix = L_suffix`.
    Positions,
    /// `r_sub`.
    SubspaceRank,
    /// Context length `L`.
    ContextLen,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 3] = [SweepAxis::Positions, SweepAxis::SubspaceRank, SweepAxis::ContextLen];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Positions => "positions",
            SweepAxis::SubspaceRank => "r_sub",
            SweepAxis::ContextLen => "context_len",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CilmpError::Config(format!("unknown sweep `{s}`; expected positions, r_sub or context_len")))
    }

    pub fn values(self) -> [usize; 4] {
        match self {
            SweepAxis::Positions => [2, 4, 8, 16],
            SweepAxis::SubspaceRank => [1, 4, 8, 16],
            SweepAxis::ContextLen => [1, 4, 8, 16],
        }
    }

    /// `cfg` with the axis set to `v`, or `None` when the value does not fit
    /// the configuration.
    pub fn apply(self, cfg: &ExperimentConfig, v: usize) -> Option<ExperimentConfig> {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Positions => {
                c.prompt.prefix_len = v;
                c.prompt.suffix_len = v;
            }
            SweepAxis::SubspaceRank => c.prompt.r_sub = v,
            SweepAxis::ContextLen => c.prompt.context_len = v,
        }
        let len = c.bank.seq_len + c.prompt.context_len + 2;
        if len > c.encoder.text_max_len {
            c.encoder.text_max_len = len;
        }
        c.validate().ok().map(|()| c)
    }
}

/// Grid over one axis for `cfg.mode`; values that do not fit are skipped
/// and returned separately.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis, seeds: &[u64]) -> Result<(GridResult, Vec<usize>)> {
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for v in axis.values() {
        match axis.apply(cfg, v) {
            Some(c) => cells.push((v.to_string(), c)),
            None => skipped.push(v),
        }
    }
    Ok((run_grid(&cells, seeds)?, skipped))
}

impl GridResult {
    pub fn cell(&self, label: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// One row per cell: means and population std of every metric, `%.6f`.
    pub fn summary_csv(&self, key: &str) -> CsvTable {
        let mut header = vec![key.to_string(), "mode".into(), "seeds".into(), "trainable_params".into()];
        for m in MetricSet::NAMES {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        let mut t = CsvTable::new(header);
        for c in &self.cells {
            let mut row = vec![
                c.label.clone(),
                c.mode.name().to_string(),
                c.seeds.to_string(),
                c.trainable_param_count.to_string(),
            ];
            for s in c.metrics.summaries() {
                row.push(fixed6(s.mean));
                row.push(fixed6(s.std));
            }
            t.push(row).expect("row matches header");
        }
        t
    }

    /// One row per run with values at full precision.
    pub fn runs_csv(&self, key: &str) -> CsvTable {
        let mut header = vec![key.to_string(), "mode".into(), "seed".into(), "trainable_params".into()];
        header.extend(MetricSet::NAMES.iter().map(|s| s.to_string()));
        header.push("final_loss".into());
        let mut t = CsvTable::new(header);
        for r in &self.runs {
            let mut row = vec![
                r.label.clone(),
                r.mode.name().to_string(),
                r.seed.to_string(),
                r.trainable_param_count.to_string(),
            ];
            row.extend(r.metrics.values().iter().map(|&v| exact(v)));
            row.push(exact(r.final_loss));
            t.push(row).expect("row matches header");
        }
        t
    }
}
