//! Experiment protocols behind the command-line tool: corpus generation,
//! training runs, the stability sweep, evaluation and feature export.
//!
//! Every function here is deterministic given its config; files are written
//! with plain `{}` float formatting so identical runs give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{generate_corpus, load_corpus, make_split, write_corpus, DataSplit, SliceSample, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::MetricsRecord;
use crate::teacher::{
    evaluate_model, reported_params, train_loop, EpochLog, TrainMode, TrainOutcome, TrainState, EPOCH_LOG_HEADER,
    EVAL_CHUNK,
};
use crate::tensor::Tensor;
use crate::unet::{ModelParams, UNet};

pub const EVAL_HEADER: &str =
    "domain,partition,variant,threshold,dice,miou,recall,precision,specificity,hausdorff,n_slices,empty_hausdorff";
pub const SWEEP_HEADER: &str = "loss,weight,status,best_epoch,final_dice,best_dice,final_miou,best_miou,final_recall,best_recall,final_precision,best_precision,final_hausdorff,best_hausdorff";

/// Generates the synthetic corpus and writes it under `cfg.data_dir`.
/// Returns the manifest path.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let c = cfg.corpus;
    let corpus = generate_corpus(c.n_subjects, c.slices_per_subject, c.image_size, cfg.seed)?;
    write_corpus(&cfg.data_dir, &corpus)?;
    Ok(cfg.data_dir.join(MANIFEST_NAME))
}

/// Loads the corpus from `cfg.data_dir`, rejecting a missing manifest or
/// slices the model cannot process.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Vec<Vec<SliceSample>>> {
    let manifest = cfg.data_dir.join(MANIFEST_NAME);
    if !manifest.is_file() {
        return Err(Error::io(
            &manifest,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus manifest not found; run gen-data first"),
        ));
    }
    let corpus = load_corpus(&manifest)?;
    check_sizes(cfg, &corpus)?;
    Ok(corpus)
}

fn check_sizes(cfg: &ExperimentConfig, corpus: &[Vec<SliceSample>]) -> Result<()> {
    let m = cfg.model.size_multiple();
    for s in corpus.iter().flatten() {
        let (h, w) = s.size();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "corpus",
                format!("slice {:?} is {h}x{w}; the model needs multiples of {m}", s.key()),
            ));
        }
    }
    Ok(())
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub domain: u8,
    pub partition: &'static str,
    pub variant: String,
    pub threshold: f64,
    pub record: MetricsRecord,
}

impl EvalRow {
    pub fn csv_row(&self) -> String {
        let r = &self.record;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.domain,
            self.partition,
            self.variant,
            self.threshold,
            r.dice,
            r.miou,
            r.recall,
            r.precision,
            r.specificity,
            r.hausdorff,
            r.n_slices,
            r.empty_hausdorff
        )
    }
}

/// Labeled evaluation slices per domain: the training slices of domains 1
/// and 2, then the validation and test partitions, which hold domains 3 and
/// 4 minus the unlabeled target pool.
pub fn domain_eval_sets(split: &DataSplit) -> Vec<(u8, &'static str, Vec<SliceSample>)> {
    let mut sets = Vec::new();
    for d in 1..=4u8 {
        for (partition, pool) in [("train", &split.train_labeled), ("validation", &split.validation), ("test", &split.test)] {
            let slices: Vec<_> = pool.iter().filter(|s| s.domain_id == d).cloned().collect();
            if !slices.is_empty() {
                sets.push((d, partition, slices));
            }
        }
    }
    sets
}

/// Models reported by a mode: ablation reports both networks.
pub fn variants<'a>(
    mode: TrainMode,
    student: &'a ModelParams<f32>,
    teacher: &'a ModelParams<f32>,
) -> Vec<(String, &'a ModelParams<f32>)> {
    match mode {
        TrainMode::AblateEma => vec![("student".into(), student), ("teacher".into(), teacher)],
        m => vec![(m.to_string(), reported_params(m, student, teacher))],
    }
}

pub fn evaluate_variants(
    net: &UNet,
    split: &DataSplit,
    variants: &[(String, &ModelParams<f32>)],
    threshold: f64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (domain, partition, slices) in domain_eval_sets(split) {
        for (name, params) in variants {
            rows.push(EvalRow {
                domain,
                partition,
                variant: name.clone(),
                threshold,
                record: evaluate_model(net, params, &slices, threshold)?,
            });
        }
    }
    Ok(rows)
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome<f32>,
    pub evaluation: Vec<EvalRow>,
}

impl RunResult {
    pub fn dice(&self, domain: u8, variant: &str) -> Option<f64> {
        self.evaluation
            .iter()
            .find(|r| r.domain == domain && r.variant == variant)
            .map(|r| r.record.dice)
    }
}

/// Trains the configured mode from scratch and evaluates the final models
/// on every domain.
pub fn run_training(
    cfg: &ExperimentConfig,
    corpus: &[Vec<SliceSample>],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<RunResult> {
    cfg.validate()?;
    let net = UNet::new(cfg.model)?;
    let split = make_split(corpus, cfg.adaptation_domain)?;
    let tc = cfg.train_config();
    let state = TrainState::<f32>::new(&net, &tc)?;
    let outcome = train_loop(&net, &split, &tc, state, on_epoch)?;
    let vs = variants(cfg.mode, &outcome.state.student, &outcome.state.teacher);
    let evaluation = evaluate_variants(&net, &split, &vs, tc.threshold)?;
    Ok(RunResult { outcome, evaluation })
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_LOG_HEADER}\n");
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

pub fn evaluation_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for row in rows {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `config.txt`, `epoch_log.csv`, `evaluation.csv`, `final.ckpt` and
/// `best.ckpt` (when any epoch completed) into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, run: &RunResult) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    write_file(&dir.join("epoch_log.csv"), epoch_log_csv(&run.outcome.log))?;
    write_file(&dir.join("evaluation.csv"), evaluation_csv(&run.evaluation))?;
    Checkpoint::from_state(&run.outcome.state, cfg).save(&dir.join("final.ckpt"))?;
    if let Some(best) = &run.outcome.best {
        Checkpoint::from_state(&best.state, cfg).save(&dir.join("best.ckpt"))?;
    }
    if let Some(why) = &run.outcome.diverged {
        write_file(&dir.join("DIVERGED"), format!("{why}\n"))?;
    }
    Ok(())
}

/// Runs `cfg.repeats` seeds (`seed`, `seed + 1`, ...) of the configured
/// mode, writing each run to `out_dir` (one repeat) or `out_dir/seed_<n>`,
/// plus a `summary.csv` of mean and standard deviation when repeating.
pub fn run_protocol(cfg: &ExperimentConfig, mut on_epoch: impl FnMut(u64, &EpochLog)) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let corpus = load_data(cfg)?;
    let mut runs = Vec::new();
    for k in 0..cfg.repeats as u64 {
        let seed = cfg.seed + k;
        let run_cfg = ExperimentConfig { seed, ..cfg.clone() };
        let run = run_training(&run_cfg, &corpus, |row| on_epoch(seed, row))?;
        let dir = if cfg.repeats == 1 {
            cfg.out_dir.clone()
        } else {
            cfg.out_dir.join(format!("seed_{seed}"))
        };
        write_run(&dir, &run_cfg, &run)?;
        runs.push(run);
    }
    if cfg.repeats > 1 {
        write_file(&cfg.out_dir.join("summary.csv"), summary_csv(&runs))?;
    }
    Ok(runs)
}

/// Mean and sample standard deviation of Dice and Hausdorff across runs,
/// per evaluation row.
pub fn summary_csv(runs: &[RunResult]) -> String {
    let mut s = String::from("domain,partition,variant,runs,dice_mean,dice_std,hausdorff_mean,hausdorff_std\n");
    let Some(first) = runs.first() else { return s };
    for (i, row) in first.evaluation.iter().enumerate() {
        let pick = |f: fn(&MetricsRecord) -> f64| -> Vec<f64> { runs.iter().map(|r| f(&r.evaluation[i].record)).collect() };
        let (dm, ds) = mean_std(&pick(|r| r.dice));
        let (hm, hs) = mean_std(&pick(|r| r.hausdorff));
        let _ = writeln!(
            s,
            "{},{},{},{},{dm},{ds},{hm},{hs}",
            row.domain,
            row.partition,
            row.variant,
            runs.len()
        );
    }
    s
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Outcome of one sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Ok,
    Diverged(String),
    /// Final validation Dice of zero.
    Collapsed,
}

impl std::fmt::Display for CellStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellStatus::Ok => f.write_str("ok"),
            CellStatus::Diverged(_) => f.write_str("diverged"),
            CellStatus::Collapsed => f.write_str("collapsed"),
        }
    }
}

/// Final-epoch and best-epoch validation metrics of one (loss, weight) cell.
/// `best` holds the running best of each metric separately (maximum for
/// overlap scores, minimum for Hausdorff), so it never trails `final_`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub loss: LossKind,
    pub weight: f64,
    pub status: CellStatus,
    pub final_: MetricsRecord,
    pub best: MetricsRecord,
    /// Epoch of the best validation Dice.
    pub best_epoch: Option<u32>,
}

impl SweepCell {
    pub fn from_log(loss: LossKind, weight: f64, log: &[EpochLog], diverged: Option<String>) -> Self {
        let final_ = log.last().map(|r| r.val).unwrap_or_default();
        let mut best = MetricsRecord {
            hausdorff: f64::INFINITY,
            ..MetricsRecord::default()
        };
        let mut best_epoch = None;
        for row in log {
            let v = &row.val;
            if best_epoch.is_none() || v.dice > best.dice {
                best_epoch = Some(row.epoch);
            }
            best.dice = best.dice.max(v.dice);
            best.miou = best.miou.max(v.miou);
            best.recall = best.recall.max(v.recall);
            best.precision = best.precision.max(v.precision);
            best.specificity = best.specificity.max(v.specificity);
            best.hausdorff = best.hausdorff.min(v.hausdorff);
            best.n_slices = v.n_slices;
        }
        if log.is_empty() {
            best.hausdorff = 0.0;
        }
        let status = match diverged {
            Some(why) => CellStatus::Diverged(why),
            None if final_.dice == 0.0 => CellStatus::Collapsed,
            None => CellStatus::Ok,
        };
        Self {
            loss,
            weight,
            status,
            final_,
            best,
            best_epoch,
        }
    }

    pub fn csv_row(&self) -> String {
        let (f, b) = (&self.final_, &self.best);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.loss,
            self.weight,
            self.status,
            self.best_epoch.map_or(String::new(), |e| e.to_string()),
            f.dice,
            b.dice,
            f.miou,
            b.miou,
            f.recall,
            b.recall,
            f.precision,
            b.precision,
            f.hausdorff,
            b.hausdorff
        )
    }
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for c in cells {
        s.push_str(&c.csv_row());
        s.push('\n');
    }
    s
}

/// Adapts with every (loss, weight) pair of the config, validating on the
/// configured validation partition. Failing cells are recorded, not fatal.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    corpus: &[Vec<SliceSample>],
    mut on_cell: impl FnMut(&SweepCell),
) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    let net = UNet::new(cfg.model)?;
    let split = make_split(corpus, cfg.adaptation_domain)?;
    let mut cells = Vec::new();
    for &loss in &cfg.sweep_losses {
        for &weight in &cfg.sweep_weights {
            let mut cell_cfg = cfg.clone();
            cell_cfg.mode = TrainMode::Adapt;
            cell_cfg.consistency = loss;
            cell_cfg.schedule.gamma_max = weight;
            let tc = cell_cfg.train_config();
            let cell = match TrainState::<f32>::new(&net, &tc).and_then(|s| train_loop(&net, &split, &tc, s, |_| {})) {
                Ok(out) => SweepCell::from_log(loss, weight, &out.log, out.diverged),
                Err(e) => SweepCell::from_log(loss, weight, &[], Some(e.to_string())),
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Evaluates the models stored in a checkpoint on every domain. The
/// threshold defaults to the checkpoint mode's own.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    corpus: &[Vec<SliceSample>],
    threshold: Option<f64>,
) -> Result<Vec<EvalRow>> {
    let cfg = &ck.config;
    check_compatible(ck, corpus)?;
    let net = UNet::new(cfg.model)?;
    let split = make_split(corpus, cfg.adaptation_domain)?;
    let tau = threshold.unwrap_or_else(|| cfg.threshold_or_default());
    evaluate_variants(&net, &split, &variants(cfg.mode, &ck.student, &ck.teacher), tau)
}

fn check_compatible(ck: &Checkpoint, corpus: &[Vec<SliceSample>]) -> Result<()> {
    let want = ck.config.corpus.image_size;
    for s in corpus.iter().flatten() {
        if s.size() != (want, want) {
            return Err(Error::invalid(
                "checkpoint",
                format!("model was trained on {want}x{want} slices but {:?} is {:?}", s.key(), s.size()),
            ));
        }
    }
    Ok(())
}

/// A slice's identity and its feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub domain_id: u8,
    pub subject_id: u32,
    pub slice_index: u32,
    pub features: Vec<f32>,
}

/// Feature vectors of the checkpoint's reported model for every slice.
pub fn export_features(ck: &Checkpoint, corpus: &[Vec<SliceSample>]) -> Result<Vec<FeatureRow>> {
    check_compatible(ck, corpus)?;
    let net = UNet::new(ck.config.model)?;
    let params = reported_params(ck.config.mode, &ck.student, &ck.teacher);
    let slices: Vec<&SliceSample> = corpus.iter().flatten().collect();
    let mut rows = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(EVAL_CHUNK) {
        let x = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let (n, c, h, w) = (chunk.len(), 1, x.shape()[2], x.shape()[3]);
        let x = x.reshape(&[n, c, h, w])?;
        for (s, features) in chunk.iter().zip(net.export_features(params, &x)?) {
            rows.push(FeatureRow {
                domain_id: s.domain_id,
                subject_id: s.subject_id,
                slice_index: s.slice_index,
                features,
            });
        }
    }
    Ok(rows)
}

pub fn features_tsv(rows: &[FeatureRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = write!(s, "{}\t{}\t{}", r.domain_id, r.subject_id, r.slice_index);
        for v in &r.features {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

/// Ratio of the distance between the centroids of the training domains
/// (1, 2) and the unseen domains (3, 4) to the mean distance of each
/// domain's centroid from its group's centroid. Smaller means the feature
/// space mixes seen and unseen domains more.
pub fn separation_ratio(rows: &[FeatureRow]) -> Option<f64> {
    let dim = rows.first()?.features.len();
    let centroid = |pred: &dyn Fn(u8) -> bool| -> Option<Vec<f64>> {
        let sel: Vec<_> = rows.iter().filter(|r| pred(r.domain_id)).collect();
        if sel.is_empty() {
            return None;
        }
        let mut c = vec![0.0; dim];
        for r in &sel {
            for (a, &v) in c.iter_mut().zip(&r.features) {
                *a += v as f64;
            }
        }
        Some(c.into_iter().map(|a| a / sel.len() as f64).collect())
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let seen = centroid(&|d| d <= 2)?;
    let unseen = centroid(&|d| d >= 3)?;
    let mut within = 0.0;
    for d in 1..=4u8 {
        let c = centroid(&|x| x == d)?;
        within += dist(&c, if d <= 2 { &seen } else { &unseen });
    }
    within /= 4.0;
    (within > 0.0).then(|| dist(&seen, &unseen) / within)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;

    fn tiny_cfg(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.data_dir = dir.join("data");
        c.out_dir = dir.join("out");
        c.model = UNetConfig {
            depth: 1,
            base_channels: 4,
            groups: 2,
            dropout_rate: 0.5,
        };
        c.corpus.n_subjects = 4;
        c.corpus.slices_per_subject = 2;
        c.corpus.image_size = 16;
        c.schedule.total_epochs = 2;
        c.schedule.rampup_epochs = 1;
        c.batch_size = 4;
        c
    }

    #[test]
    fn missing_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_data(&tiny_cfg(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn ablation_reports_both_networks_per_domain() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.mode = TrainMode::AblateEma;
        gen_data(&cfg).unwrap();
        let runs = run_protocol(&cfg, |_, _| {}).unwrap();
        assert_eq!(runs[0].outcome.log.len(), 2);
        let variants: Vec<_> = runs[0].evaluation.iter().map(|r| (r.domain, r.variant.as_str())).collect();
        let domains: std::collections::BTreeSet<_> = variants.iter().map(|v| v.0).collect();
        assert_eq!(domains.len(), 4);
        assert_eq!(variants.iter().filter(|v| v.1 == "teacher").count(), variants.len() / 2);
        for f in ["config.txt", "epoch_log.csv", "evaluation.csv", "final.ckpt", "best.ckpt"] {
            assert!(cfg.out_dir.join(f).is_file(), "{f}");
        }
        let log = fs::read_to_string(cfg.out_dir.join("epoch_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
    }

    #[test]
    fn sweep_best_never_trails_final() {
        let log: Vec<EpochLog> = [(40.0, 3.0), (60.0, 5.0), (55.0, 2.0)]
            .iter()
            .enumerate()
            .map(|(i, &(dice, hd))| EpochLog {
                epoch: i as u32,
                task_loss: 0.0,
                consistency_loss: 0.0,
                lr: 0.0,
                gamma: 0.0,
                val: MetricsRecord {
                    dice,
                    miou: dice / 2.0 + 50.0,
                    hausdorff: hd,
                    ..MetricsRecord::default()
                },
            })
            .collect();
        let c = SweepCell::from_log(LossKind::Mse, 5.0, &log, None);
        assert_eq!((c.final_.dice, c.best.dice, c.best_epoch), (55.0, 60.0, Some(1)));
        assert_eq!((c.final_.hausdorff, c.best.hausdorff), (2.0, 2.0));
        assert_eq!(c.status, CellStatus::Ok);
        let d = SweepCell::from_log(LossKind::Dice, 5.0, &[], Some("nan".into()));
        assert_eq!(d.status.to_string(), "diverged");
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[2.0, 4.0, 6.0]), (4.0, 2.0));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
