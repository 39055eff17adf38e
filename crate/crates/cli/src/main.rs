use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtseg::checkpoint::Checkpoint;
use mtseg::config::ExperimentConfig;
use mtseg::data::load_corpus;
use mtseg::data::MANIFEST_NAME;
use mtseg::experiment::{self, evaluation_csv, features_tsv, sweep_csv};
use mtseg::losses::LossKind;
use mtseg::teacher::TrainMode;

/// Mean Teacher domain adaptation for binary segmentation.
#[derive(Parser)]
#[command(name = "mtseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-domain corpus (PGM slices and a manifest).
    GenData(Common),
    /// Supervised baseline on domains 1 and 2.
    Train(Common),
    /// Mean Teacher adaptation to the unlabeled target domain.
    Adapt(Common),
    /// EMA teacher with the consistency weight fixed at zero.
    Ablate(Common),
    /// Adaptation over every configured consistency loss and weight.
    Sweep(Common),
    /// Evaluate a checkpoint on all four domains.
    Evaluate(CheckpointArgs),
    /// Write one 256-dimensional feature vector per corpus slice as TSV.
    ExportFeatures(CheckpointArgs),
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines). Without one, desk-scale defaults apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; for gen-data, where the corpus is written.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Corpus directory holding the manifest.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Consistency loss: mse, dice or ce.
    #[arg(long)]
    consistency_loss: Option<LossKind>,
    /// Maximum consistency weight.
    #[arg(long)]
    consistency_weight: Option<f64>,
    /// Binarization threshold for evaluation.
    #[arg(long)]
    threshold: Option<f64>,
    /// Number of seeds to run, starting at the configured seed.
    #[arg(long)]
    repeats: Option<u32>,
    /// Target domain, 3 or 4.
    #[arg(long)]
    adaptation_domain: Option<u8>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl Common {
    fn resolve(&self, mode: Option<TrainMode>) -> mtseg::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| mtseg::Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::desk(),
        };
        if let Some(m) = mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(l) = self.consistency_loss {
            cfg.consistency = l;
            cfg.sweep_losses = vec![l];
        }
        if let Some(w) = self.consistency_weight {
            cfg.schedule.gamma_max = w;
            cfg.sweep_weights = vec![w];
        }
        if self.threshold.is_some() {
            cfg.threshold = self.threshold;
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        if let Some(d) = self.adaptation_domain {
            cfg.adaptation_domain = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_or_print(out_dir: Option<&Path>, name: &str, contents: &str) -> mtseg::Result<()> {
    match out_dir {
        Some(dir) => {
            let path = dir.join(name);
            fs::create_dir_all(dir)
                .and_then(|_| fs::write(&path, contents))
                .map_err(|e| mtseg::Error::Io { path, source: e })
        }
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn train(common: &Common, mode: TrainMode) -> mtseg::Result<()> {
    let cfg = common.resolve(Some(mode))?;
    let runs = experiment::run_protocol(&cfg, |seed, row| {
        eprintln!(
            "seed {seed} epoch {:>3}  task {:.4}  consistency {:.5}  lr {:.2e}  gamma {:.3}  val dice {:.2}",
            row.epoch, row.task_loss, row.consistency_loss, row.lr, row.gamma, row.val.dice
        );
    })?;
    for run in &runs {
        if let Some(why) = &run.outcome.diverged {
            eprintln!("warning: training diverged at {why}");
        }
    }
    print!("{}", evaluation_csv(&runs.last().expect("at least one repeat").evaluation));
    eprintln!("results written to {}", cfg.out_dir.display());
    Ok(())
}

fn corpus_for(args: &CheckpointArgs, ck: &Checkpoint) -> mtseg::Result<Vec<Vec<mtseg::data::SliceSample>>> {
    let dir = args.data_dir.clone().unwrap_or_else(|| ck.config.data_dir.clone());
    load_corpus(&dir.join(MANIFEST_NAME))
}

fn run(cli: Cli) -> mtseg::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let mut cfg = c.resolve(None)?;
            if let Some(d) = &c.out_dir {
                cfg.data_dir = d.clone();
            }
            let manifest = experiment::gen_data(&cfg)?;
            eprintln!("wrote {}", manifest.display());
        }
        Command::Train(c) => train(&c, TrainMode::Baseline)?,
        Command::Adapt(c) => train(&c, TrainMode::Adapt)?,
        Command::Ablate(c) => train(&c, TrainMode::AblateEma)?,
        Command::Sweep(c) => {
            let cfg = c.resolve(Some(TrainMode::Adapt))?;
            let corpus = experiment::load_data(&cfg)?;
            let cells = experiment::run_sweep(&cfg, &corpus, |cell| {
                eprintln!(
                    "{} weight {}: {}  final dice {:.2}  best dice {:.2}",
                    cell.loss, cell.weight, cell.status, cell.final_.dice, cell.best.dice
                );
            })?;
            write_or_print(Some(&cfg.out_dir), "sweep.csv", &sweep_csv(&cells))?;
            print!("{}", sweep_csv(&cells));
        }
        Command::Evaluate(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let corpus = corpus_for(&a, &ck)?;
            let rows = experiment::evaluate_checkpoint(&ck, &corpus, a.threshold)?;
            write_or_print(a.out_dir.as_deref(), "evaluation.csv", &evaluation_csv(&rows))?;
        }
        Command::ExportFeatures(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let corpus = corpus_for(&a, &ck)?;
            let rows = experiment::export_features(&ck, &corpus)?;
            write_or_print(a.out_dir.as_deref(), "features.tsv", &features_tsv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
