//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 on invalid configuration, flags or input
//! files, 3 on a numerical abort, 1 on any other failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::ablation::{run_ablation, run_sweep, SweepAxis};
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::ExperimentConfig;
use super::data::generate_dataset;
use super::report::{exact, fixed6, CsvTable};
use super::train::{evaluate_split, pretrain_phase, train_full, RunReport};
use crate::concepts::{cka_heatmap, ConceptBank};
use crate::error::{CilmpError, Result};
use crate::metrics::MetricSet;
use crate::prompts::PromptMode;

#[derive(Debug, Parser)]
#[command(name = "cilmp", version, about = "Concept-conditioned prompt tuning on a synthetic dual-encoder world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config mode.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "cilmp-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Contrastive pretraining of the encoders only.
    Pretrain(Common),
    /// Concept bank utilities.
    Bank {
        #[command(subcommand)]
        command: BankCommand,
    },
    /// Pretraining, freezing and prompt tuning; writes the report, the loss
    /// trace and a checkpoint.
    Train(Common),
    /// Evaluates a checkpoint on the test split of its world.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Paired-seed ablation over modes, or a sweep over one hyper-parameter.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes.
        #[arg(long, default_value = "cilmp,no_rd,no_conditional,no_intervention")]
        modes: String,
        /// Comma-separated seeds, at least two.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        /// positions, r_sub or context_len; sweeps the config mode instead
        /// of comparing modes.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Summarises report JSON files as one CSV row each.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum BankCommand {
    /// Writes the bank of the configured world.
    Generate(Common),
    /// Prints the shape, class names and checksum of a bank.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Bank file; the configured world's bank when omitted.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Layer-by-layer CKA of one class as an `L_h × L_h` CSV.
    Cka {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long = "class")]
        class: usize,
    },
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &CilmpError) -> i32 {
    match e {
        CilmpError::Numerical(_) => 3,
        CilmpError::Config(_) | CilmpError::Format { .. } | CilmpError::Io(_) | CilmpError::Json(_) => 2,
        _ => 1,
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.mode {
            cfg.mode = PromptMode::parse(m)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }

    fn bank(&self, path: Option<&PathBuf>) -> Result<ConceptBank> {
        match path {
            Some(p) => ConceptBank::load(p),
            None => Ok(generate_dataset(&self.config()?)?.1),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn parse_list<T>(s: &str, what: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(f).collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(CilmpError::Config(format!("empty list of {what}")));
    }
    Ok(items)
}

fn parse_seed(s: &str) -> Result<u64> {
    s.parse().map_err(|_| CilmpError::Config(format!("invalid seed `{s}`")))
}

fn loss_csv(trace: &[f64]) -> CsvTable {
    let mut t = CsvTable::new(["epoch", "loss"]);
    for (i, v) in trace.iter().enumerate() {
        t.push(vec![(i + 1).to_string(), exact(*v)]).expect("two columns");
    }
    t
}

fn metrics_csv(rows: &[(u64, PromptMode, MetricSet)]) -> CsvTable {
    let mut header = vec!["seed".to_string(), "mode".into()];
    header.extend(MetricSet::NAMES.iter().map(|s| s.to_string()));
    let mut t = CsvTable::new(header);
    for (seed, mode, m) in rows {
        let mut row = vec![seed.to_string(), mode.name().to_string()];
        row.extend(m.values().iter().map(|&v| fixed6(v)));
        t.push(row).expect("row matches header");
    }
    t
}

#[derive(Serialize)]
struct PretrainSummary {
    seed: u64,
    loss_trace: Vec<f64>,
    temperature: f64,
    encoder_checksum: String,
}

#[derive(Serialize)]
struct BankSummary {
    classes: usize,
    seq_len: usize,
    width: usize,
    class_names: Vec<String>,
    provenance: String,
    checksum: String,
}

fn bank_summary(bank: &ConceptBank) -> BankSummary {
    BankSummary {
        classes: bank.num_classes(),
        seq_len: bank.seq_len(),
        width: bank.width(),
        class_names: bank.class_names().to_vec(),
        provenance: bank.provenance().to_string(),
        checksum: format!("{:016x}", bank.checksum()),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(common) => {
            let cfg = common.config()?;
            let (ds, _) = generate_dataset(&cfg)?;
            let pre = pretrain_phase(&cfg, &ds)?;
            let out = common.out_dir()?;
            write_json(
                &out.join("pretrain.json"),
                &PretrainSummary {
                    seed: cfg.seed,
                    loss_trace: pre.loss_trace.clone(),
                    temperature: pre.clip.temperature(),
                    encoder_checksum: format!("{:016x}", pre.clip.encoder_checksum()),
                },
            )?;
            loss_csv(&pre.loss_trace).write(out.join("pretrain_loss.csv"))?;
            println!("pretrain loss {:.6} -> {:.6}", pre.loss_trace[0], pre.loss_trace[pre.loss_trace.len() - 1]);
        }
        Command::Bank { command } => bank(command)?,
        Command::Train(common) => {
            let cfg = common.config()?;
            let run = train_full(&cfg)?;
            let out = common.out_dir()?;
            fs::write(out.join("report.json"), run.report.to_json())?;
            write_json(&out.join("timing.json"), &run.timing)?;
            loss_csv(&run.report.loss_trace).write(out.join("loss.csv"))?;
            metrics_csv(&[(cfg.seed, cfg.mode, run.report.metrics)]).write(out.join("metrics.csv"))?;
            save_checkpoint(out.join("checkpoint.bin"), &cfg, &run.model)?;
            println!(
                "{} seed {}: accuracy {}",
                cfg.mode.name(),
                cfg.seed,
                fixed6(run.report.metrics.accuracy)
            );
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            if common.config.is_some() || common.seed.is_some() || common.mode.is_some() {
                ckpt.check_compatible(&common.config()?)?;
            }
            let cfg = ckpt.config.clone();
            let (ds, bank) = generate_dataset(&cfg)?;
            let model = ckpt.restore(&ds, &bank)?;
            let metrics = evaluate_split(&model, &ds.test)?;
            let out = common.out_dir()?;
            write_json(&out.join("eval.json"), &metrics)?;
            let table = metrics_csv(&[(cfg.seed, cfg.mode, metrics)]);
            table.write(out.join("eval.csv"))?;
            print!("{}", table.render());
        }
        Command::Ablate {
            common,
            modes,
            seeds,
            sweep,
        } => {
            let cfg = common.config()?;
            let seeds = parse_list(&seeds, "seeds", parse_seed)?;
            let out = common.out_dir()?;
            let (result, key, name) = match sweep {
                Some(axis) => {
                    let axis = SweepAxis::parse(&axis)?;
                    let (result, skipped) = run_sweep(&cfg, axis, &seeds)?;
                    for v in skipped {
                        eprintln!("skipped {} = {v}: does not fit the configuration", axis.name());
                    }
                    (result, axis.name(), format!("sweep_{}", axis.name()))
                }
                None => {
                    let modes = parse_list(&modes, "modes", PromptMode::parse)?;
                    (run_ablation(&cfg, &modes, &seeds)?, "cell", "ablation".to_string())
                }
            };
            let table = result.summary_csv(key);
            table.write(out.join(format!("{name}.csv")))?;
            result.runs_csv(key).write(out.join(format!("{name}_runs.csv")))?;
            print!("{}", table.render());
        }
        Command::Report { reports, out } => {
            let mut rows = Vec::with_capacity(reports.len());
            for p in &reports {
                let r = RunReport::from_json(&fs::read_to_string(p)?)?;
                rows.push((r.seed, r.mode, r.metrics));
            }
            let table = metrics_csv(&rows);
            match out {
                Some(p) => table.write(p)?,
                None => print!("{}", table.render()),
            }
        }
    }
    Ok(())
}

fn bank(command: BankCommand) -> Result<()> {
    match command {
        BankCommand::Generate(common) => {
            let bank = common.bank(None)?;
            let out = common.out_dir()?;
            bank.save(out.join("bank.bin"))?;
            write_json(&out.join("bank.json"), &bank_summary(&bank))?;
            println!(
                "bank {}x{}x{} checksum {:016x}",
                bank.num_classes(),
                bank.seq_len(),
                bank.width(),
                bank.checksum()
            );
        }
        BankCommand::Inspect { common, bank } => {
            let bank = common.bank(bank.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&bank_summary(&bank))?);
        }
        BankCommand::Cka { common, bank, class } => {
            let bank = common.bank(bank.as_ref())?;
            let m = cka_heatmap(&bank, class)?;
            let n = m.size();
            let mut t = CsvTable::new((0..n).map(|l| format!("layer_{l}")));
            for i in 0..n {
                t.push((0..n).map(|j| fixed6(m.get(i, j))).collect()).expect("square");
            }
            let out = common.out_dir()?;
            t.write(out.join(format!("cka_class_{class}.csv")))?;
            print!("{}", t.render());
        }
    }
    Ok(())
}
