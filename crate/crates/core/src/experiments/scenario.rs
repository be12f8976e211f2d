//! Scenario runs: train `repeats × levels` models, calibrate, measure, aggregate.
//!
//! Repeat `r` uses seed `seed + r` for its training sample, test sample,
//! initialization and shuffling at every level, so levels are compared on
//! paired runs. Metrics are always measured on the clean training sample.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{SyntheticSpec, SyntheticTask};
use super::stats::{mean, sample_std, spearman};
use crate::error::{Error, Result};
use crate::fisher::{compute_metrics, FrobeniusMode, MetricOptions, MetricReport, SamplerConfig, DEFAULT_TARGET_PEAK};
use crate::net::{evaluate, Activation, Dataset, NetworkSpec, ParamVector};
use crate::persist::{fmt_f64, write_atomic, write_json};
use crate::regularizer::{train, RegConfig, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Level: confusion-set size as a fraction of `n_train`.
    Confusion,
    /// Level: mini-batch size.
    BatchSize,
    /// Level: standard deviation of the per-epoch Gaussian input jitter.
    Augmentation,
    /// Levels: the `β` grid searched on a validation split.
    RegularizerAb,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Confusion => "confusion",
            ScenarioKind::BatchSize => "batch_size",
            ScenarioKind::Augmentation => "augmentation",
            ScenarioKind::RegularizerAb => "regularizer_ab",
        }
    }

    pub fn default_levels(self) -> Vec<f64> {
        match self {
            ScenarioKind::Confusion => vec![0.0, 0.1, 0.25, 0.5],
            ScenarioKind::BatchSize => vec![16.0, 32.0, 64.0, 128.0],
            ScenarioKind::Augmentation => vec![0.0, 0.05, 0.1, 0.2],
            ScenarioKind::RegularizerAb => vec![1.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0, 75.0, 100.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    /// Empty means the scenario's default levels.
    pub levels: Vec<f64>,
    pub repeats: usize,
    pub data: SyntheticSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub schedule: TrainSchedule,
    pub reg: RegConfig,
    pub sampler: SamplerConfig,
    /// Softmax calibration target before measuring; `None` measures the raw model.
    pub target_peak: Option<f64>,
    pub frobenius: FrobeniusMode,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Share of the training sample held out to pick `β`.
    pub validation_fraction: f64,
    pub min_train_acc: f64,
    /// Converged runs must end within this factor of the level's lowest train loss.
    pub max_loss_ratio: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: ScenarioKind::Confusion,
            levels: Vec::new(),
            repeats: 5,
            data: SyntheticSpec::default(),
            hidden: vec![64],
            activation: Activation::Tanh,
            schedule: TrainSchedule::default(),
            reg: RegConfig::default(),
            sampler: SamplerConfig::default(),
            target_peak: Some(DEFAULT_TARGET_PEAK),
            frobenius: FrobeniusMode::Exact,
            seed: 0,
            label_smoothing: 0.0,
            validation_fraction: 0.2,
            min_train_acc: 0.99,
            max_loss_ratio: 2.0,
        }
    }
}

impl ScenarioConfig {
    pub fn levels(&self) -> Vec<f64> {
        if self.levels.is_empty() {
            self.scenario.default_levels()
        } else {
            self.levels.clone()
        }
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        let mut sizes = vec![self.data.d];
        sizes.extend(&self.hidden);
        sizes.push(self.data.k);
        NetworkSpec::new(sizes, self.activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        self.data.validate()?;
        self.schedule.validate()?;
        self.reg.validate()?;
        self.network()?;
        let levels = self.levels();
        if levels.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("levels must be finite and >= 0: {levels:?}")));
        }
        match self.scenario {
            ScenarioKind::BatchSize => {
                if levels.iter().any(|l| l.fract() != 0.0 || *l < 1.0) {
                    return Err(Error::Config("batch-size levels must be positive integers".into()));
                }
            }
            ScenarioKind::RegularizerAb => {
                if levels.iter().any(|&b| b <= 0.0) {
                    return Err(Error::Config("the beta grid must be positive".into()));
                }
                if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
                    return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
                }
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            sampler: self.sampler,
            target_peak: self.target_peak,
            frobenius: self.frobenius,
        }
    }

    fn run_seed(&self, repeat: usize) -> u64 {
        self.seed.wrapping_add(repeat as u64)
    }
}

/// One trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scenario: String,
    pub level: f64,
    pub repeat: usize,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub test_err: f64,
    pub gamma_hat: f64,
    pub robustness: f64,
    pub frobenius: f64,
    pub spectral_radius: f64,
    pub converged: bool,
    pub metrics: Option<MetricReport>,
    /// Why the metrics are missing, when they are.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        MeanStd {
            mean: mean(xs),
            std: sample_std(xs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAggregate {
    pub level: f64,
    pub converged: usize,
    pub excluded: usize,
    pub test_err: MeanStd,
    pub gamma_hat: MeanStd,
    pub robustness: MeanStd,
    pub frobenius: MeanStd,
    pub spectral_radius: MeanStd,
    pub final_train_loss: MeanStd,
}

/// Arm-level outcome of the regularizer comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbSummary {
    pub best_beta: f64,
    /// Mean validation error per `β` of the grid.
    pub validation_err: Vec<(f64, f64)>,
    pub no_reg_test_err: MeanStd,
    pub no_reg_gamma_hat: MeanStd,
    pub reg_test_err: MeanStd,
    pub reg_gamma_hat: MeanStd,
    pub paired_repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub config: ScenarioConfig,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<LevelAggregate>,
    /// Spearman correlation of each metric with test error over converged runs.
    pub rank_correlations: BTreeMap<String, Option<f64>>,
    /// The same correlations over level means.
    pub level_rank_correlations: BTreeMap<String, Option<f64>>,
    pub ab: Option<AbSummary>,
    pub notes: Vec<String>,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "scenario",
    "level",
    "repeat",
    "seed",
    "final_train_loss",
    "final_train_acc",
    "test_err",
    "gamma_hat",
    "robustness",
    "frobenius",
    "spectral_radius",
    "converged",
];

const METRICS: [&str; 4] = ["gamma_hat", "robustness", "frobenius", "spectral_radius"];

fn metric_of(row: &RunRow, name: &str) -> f64 {
    match name {
        "gamma_hat" => row.gamma_hat,
        "robustness" => row.robustness,
        "frobenius" => row.frobenius,
        "spectral_radius" => row.spectral_radius,
        _ => unreachable!("unknown metric {name}"),
    }
}

impl ScenarioResult {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                fmt_f64(r.level),
                r.repeat.to_string(),
                r.seed.to_string(),
                fmt_f64(r.final_train_loss),
                fmt_f64(r.final_train_acc),
                fmt_f64(r.test_err),
                fmt_f64(r.gamma_hat),
                fmt_f64(r.robustness),
                fmt_f64(r.frobenius),
                fmt_f64(r.spectral_radius),
                r.converged.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
    }

    /// `<out_dir>/<scenario>.csv` and `<out_dir>/<scenario>.json`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        write_atomic(&out_dir.join(format!("{}.csv", self.scenario)), &self.to_csv()?)?;
        write_json(&out_dir.join(format!("{}.json", self.scenario)), self)
    }

    pub fn aggregate(&self, level: f64) -> Option<&LevelAggregate> {
        self.aggregates.iter().find(|a| a.level == level)
    }
}

/// Apply the convergence gate in place and aggregate converged rows per level.
pub fn aggregate_rows(rows: &mut [RunRow], levels: &[f64], min_acc: f64, max_ratio: f64) -> Result<Vec<LevelAggregate>> {
    levels
        .iter()
        .map(|&level| {
            let candidates: Vec<usize> = (0..rows.len())
                .filter(|&i| rows[i].level == level && rows[i].error.is_none() && rows[i].final_train_acc >= min_acc)
                .collect();
            let floor = candidates
                .iter()
                .map(|&i| rows[i].final_train_loss)
                .fold(f64::INFINITY, f64::min);
            for row in rows.iter_mut().filter(|r| r.level == level) {
                row.converged = row.error.is_none()
                    && row.final_train_acc >= min_acc
                    && row.final_train_loss <= max_ratio * floor;
            }
            let kept: Vec<&RunRow> = rows.iter().filter(|r| r.level == level && r.converged).collect();
            let total = rows.iter().filter(|r| r.level == level).count();
            if kept.is_empty() {
                return Err(Error::Scenario(format!("no converged run at level {level}")));
            }
            let col = |f: &dyn Fn(&RunRow) -> f64| MeanStd::of(&kept.iter().map(|r| f(r)).collect::<Vec<_>>());
            Ok(LevelAggregate {
                level,
                converged: kept.len(),
                excluded: total - kept.len(),
                test_err: col(&|r| r.test_err),
                gamma_hat: col(&|r| r.gamma_hat),
                robustness: col(&|r| r.robustness),
                frobenius: col(&|r| r.frobenius),
                spectral_radius: col(&|r| r.spectral_radius),
                final_train_loss: col(&|r| r.final_train_loss),
            })
        })
        .collect()
}

fn correlations(rows: &[RunRow], aggregates: &[LevelAggregate]) -> (BTreeMap<String, Option<f64>>, BTreeMap<String, Option<f64>>) {
    let kept: Vec<&RunRow> = rows.iter().filter(|r| r.converged).collect();
    let err: Vec<f64> = kept.iter().map(|r| r.test_err).collect();
    let level_err: Vec<f64> = aggregates.iter().map(|a| a.test_err.mean).collect();
    let mut by_row = BTreeMap::new();
    let mut by_level = BTreeMap::new();
    for name in METRICS {
        let vals: Vec<f64> = kept.iter().map(|r| metric_of(r, name)).collect();
        by_row.insert(name.to_string(), spearman(&vals, &err));
        let means: Vec<f64> = aggregates
            .iter()
            .map(|a| match name {
                "gamma_hat" => a.gamma_hat.mean,
                "robustness" => a.robustness.mean,
                "frobenius" => a.frobenius.mean,
                _ => a.spectral_radius.mean,
            })
            .collect();
        by_level.insert(name.to_string(), spearman(&means, &level_err));
    }
    (by_row, by_level)
}

struct RunSpec<'a> {
    cfg: &'a ScenarioConfig,
    net: &'a NetworkSpec,
    level: f64,
    repeat: usize,
    train_set: Dataset,
    clean: &'a Dataset,
    test: &'a Dataset,
    schedule: TrainSchedule,
    reg: RegConfig,
}

fn run_one(r: RunSpec<'_>) -> Result<RunRow> {
    let seed = r.cfg.run_seed(r.repeat);
    let init = ParamVector::init(r.net, seed);
    let (params, record) = train(r.net, &init, &r.train_set, Some(r.test), &r.schedule, &r.reg, seed)?;
    let last = record.last().expect("at least one epoch");
    let test_err = last.test_err.expect("test set supplied");
    let (metrics, error) = match compute_metrics(r.net, &params, r.clean, &r.cfg.metric_options()) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let pick = |f: fn(&MetricReport) -> f64| metrics.as_ref().map_or(f64::NAN, f);
    Ok(RunRow {
        scenario: r.cfg.scenario.name().into(),
        level: r.level,
        repeat: r.repeat,
        seed,
        final_train_loss: last.train_loss,
        final_train_acc: last.train_acc,
        test_err,
        gamma_hat: pick(|m| m.gamma_hat),
        robustness: pick(|m| m.robustness),
        frobenius: pick(|m| m.frobenius),
        spectral_radius: pick(|m| m.spectral_radius),
        converged: false,
        metrics,
        error,
    })
}

struct Repeat {
    train: Dataset,
    test: Dataset,
}

fn repeats(cfg: &ScenarioConfig, task: &SyntheticTask) -> Result<Vec<Repeat>> {
    (0..cfg.repeats)
        .map(|r| {
            let (train, test) = task.datasets(cfg.run_seed(r))?;
            let train = if cfg.label_smoothing > 0.0 { train.relabeled(cfg.label_smoothing)? } else { train };
            Ok(Repeat { train, test })
        })
        .collect()
}

fn confusion_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng
}

fn finish(cfg: &ScenarioConfig, mut rows: Vec<RunRow>, levels: &[f64], ab: Option<AbSummary>) -> Result<ScenarioResult> {
    let aggregates = aggregate_rows(&mut rows, levels, cfg.min_train_acc, cfg.max_loss_ratio)?;
    let (rank_correlations, level_rank_correlations) = correlations(&rows, &aggregates);
    let mut notes = vec![format!(
        "learning rate divided by {} at epochs {:?}",
        1.0 / cfg.schedule.lr_decay,
        cfg.schedule.milestones()
    )];
    if cfg.scenario == ScenarioKind::Augmentation {
        notes.push("augmentation levels are Gaussian input-jitter standard deviations, redrawn every epoch".into());
    }
    if cfg.scenario == ScenarioKind::Confusion {
        notes.push("confusion inputs are fresh draws from the task with uniformly random labels; metrics use the clean training sample".into());
    }
    let excluded: usize = aggregates.iter().map(|a| a.excluded).sum();
    if excluded > 0 {
        notes.push(format!("{excluded} non-converged runs excluded from aggregates"));
    }
    Ok(ScenarioResult {
        scenario: cfg.scenario.name().into(),
        config: cfg.clone(),
        rows,
        aggregates,
        rank_correlations,
        level_rank_correlations,
        ab,
        notes,
    })
}

/// Train and measure every (level, repeat) pair of a confusion, batch-size or
/// augmentation scenario.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    if cfg.scenario == ScenarioKind::RegularizerAb {
        return regularizer_ab_test(cfg);
    }
    let net = cfg.network()?;
    let task = SyntheticTask::new(&cfg.data)?;
    let reps = repeats(cfg, &task)?;
    let levels = cfg.levels();
    let jobs: Vec<(f64, usize)> = levels
        .iter()
        .flat_map(|&l| (0..cfg.repeats).map(move |r| (l, r)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(level, repeat)| {
            let rep = &reps[repeat];
            let mut schedule = cfg.schedule.clone();
            let train_set = match cfg.scenario {
                ScenarioKind::Confusion => {
                    let size = (level * cfg.data.n_train as f64).round() as usize;
                    let mut rng = confusion_rng(cfg.run_seed(repeat));
                    let set = task.confusion_set(&rep.train, size, &mut rng)?;
                    if cfg.label_smoothing > 0.0 { set.relabeled(cfg.label_smoothing)? } else { set }
                }
                ScenarioKind::BatchSize => {
                    schedule.batch_size = level as usize;
                    rep.train.clone()
                }
                ScenarioKind::Augmentation => {
                    schedule.jitter_std = level;
                    rep.train.clone()
                }
                ScenarioKind::RegularizerAb => unreachable!("dispatched above"),
            };
            run_one(RunSpec {
                cfg,
                net: &net,
                level,
                repeat,
                train_set,
                clean: &rep.train,
                test: &rep.test,
                schedule,
                reg: RegConfig { beta: 0.0, ..cfg.reg },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finish(cfg, rows, &levels, None)
}

/// Pick `β` from the grid by validation error, then compare paired `β = 0` and
/// `β = β*` runs on the full training sample.
pub fn regularizer_ab_test(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    let cfg = &ScenarioConfig {
        scenario: ScenarioKind::RegularizerAb,
        ..cfg.clone()
    };
    cfg.validate()?;
    let net = cfg.network()?;
    let task = SyntheticTask::new(&cfg.data)?;
    let reps = repeats(cfg, &task)?;
    let grid = cfg.levels();

    let splits: Vec<(Dataset, Dataset)> = reps
        .iter()
        .map(|rep| {
            let n_val = ((rep.train.len() as f64) * cfg.validation_fraction).round() as usize;
            let n_fit = rep.train.len() - n_val;
            if n_val == 0 || n_fit < cfg.schedule.batch_size {
                return Err(Error::Config("validation split leaves too few samples".into()));
            }
            let fit: Vec<usize> = (0..n_fit).collect();
            let val: Vec<usize> = (n_fit..rep.train.len()).collect();
            Ok((rep.train.subset(&fit)?, rep.train.subset(&val)?))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(f64, usize)> = grid.iter().flat_map(|&b| (0..cfg.repeats).map(move |r| (b, r))).collect();
    let val_errs = jobs
        .par_iter()
        .map(|&(beta, r)| {
            let seed = cfg.run_seed(r);
            let (fit, val) = &splits[r];
            let reg = RegConfig { beta, ..cfg.reg };
            let (params, _) = train(&net, &ParamVector::init(&net, seed), fit, None, &cfg.schedule, &reg, seed)?;
            Ok(1.0 - evaluate(&net, &params, val)?.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let validation_err: Vec<(f64, f64)> = grid
        .iter()
        .enumerate()
        .map(|(g, &b)| (b, mean(&val_errs[g * cfg.repeats..(g + 1) * cfg.repeats])))
        .collect();
    let best_beta = validation_err
        .iter()
        .fold((f64::NAN, f64::INFINITY), |best, &(b, e)| if e < best.1 { (b, e) } else { best })
        .0;

    let arms = [0.0, best_beta];
    let jobs: Vec<(f64, usize)> = arms.iter().flat_map(|&b| (0..cfg.repeats).map(move |r| (b, r))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(beta, repeat)| {
            let rep = &reps[repeat];
            run_one(RunSpec {
                cfg,
                net: &net,
                level: beta,
                repeat,
                train_set: rep.train.clone(),
                clean: &rep.train,
                test: &rep.test,
                schedule: cfg.schedule.clone(),
                reg: RegConfig { beta, ..cfg.reg },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // Paired comparison: only repeats whose runs survive the gate in both arms.
    let mut gated = rows.clone();
    aggregate_rows(&mut gated, &arms, cfg.min_train_acc, cfg.max_loss_ratio)?;
    let paired: Vec<usize> = (0..cfg.repeats)
        .filter(|&r| gated.iter().filter(|row| row.repeat == r).all(|row| row.converged))
        .collect();
    let arm = |beta: f64, f: fn(&RunRow) -> f64| {
        let xs: Vec<f64> = paired
            .iter()
            .map(|&r| f(gated.iter().find(|row| row.level == beta && row.repeat == r).expect("paired row")))
            .collect();
        MeanStd::of(&xs)
    };
    if paired.is_empty() {
        return Err(Error::Scenario("no repeat converged in both arms".into()));
    }
    let ab = AbSummary {
        best_beta,
        validation_err,
        no_reg_test_err: arm(0.0, |r| r.test_err),
        no_reg_gamma_hat: arm(0.0, |r| r.gamma_hat),
        reg_test_err: arm(best_beta, |r| r.test_err),
        reg_gamma_hat: arm(best_beta, |r| r.gamma_hat),
        paired_repeats: paired.len(),
    };
    finish(cfg, rows, &arms, Some(ab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ScenarioKind) -> ScenarioConfig {
        ScenarioConfig {
            scenario: kind,
            repeats: 2,
            data: SyntheticSpec {
                n_train: 100,
                n_test: 100,
                d: 10,
                k: 2,
                noise_std: 1.0,
                ..SyntheticSpec::default()
            },
            hidden: vec![16],
            schedule: TrainSchedule {
                epochs: 40,
                batch_size: 16,
                ..TrainSchedule::default()
            },
            sampler: SamplerConfig {
                n_prime: 20,
                trials: 3,
                seed: 0,
            },
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn single_run_has_zero_std() {
        let cfg = ScenarioConfig {
            levels: vec![0.0],
            repeats: 1,
            ..small(ScenarioKind::Confusion)
        };
        let res = run_scenario(&cfg).unwrap();
        assert_eq!(res.rows.len(), 1);
        let agg = &res.aggregates[0];
        assert_eq!((agg.gamma_hat.std, agg.test_err.std), (0.0, 0.0));
        assert_eq!(agg.gamma_hat.mean, res.rows[0].gamma_hat);
    }

    #[test]
    fn scenario_is_deterministic_and_aggregates_recompute() {
        let cfg = ScenarioConfig {
            levels: vec![0.0, 0.1],
            ..small(ScenarioKind::Confusion)
        };
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        for agg in &a.aggregates {
            let g: Vec<f64> = a.rows.iter().filter(|r| r.level == agg.level && r.converged).map(|r| r.gamma_hat).collect();
            let m = g.iter().sum::<f64>() / g.len() as f64;
            assert!((agg.gamma_hat.mean - m).abs() < 1e-12);
        }
        let text = String::from_utf8(a.to_csv().unwrap()).unwrap();
        assert!(text.starts_with(&CSV_COLUMNS.join(",")));
        assert_eq!(text.lines().count(), 1 + 4);
    }

    #[test]
    fn batch_and_augmentation_levels_run() {
        for (kind, levels) in [(ScenarioKind::BatchSize, vec![8.0, 16.0]), (ScenarioKind::Augmentation, vec![0.0, 0.1])] {
            let cfg = ScenarioConfig {
                levels,
                repeats: 1,
                ..small(kind)
            };
            let res = run_scenario(&cfg).unwrap();
            assert_eq!(res.aggregates.len(), 2);
        }
    }

    #[test]
    fn gate_excludes_unfit_runs() {
        let row = |level: f64, acc: f64, loss: f64| RunRow {
            scenario: "x".into(),
            level,
            repeat: 0,
            seed: 0,
            final_train_loss: loss,
            final_train_acc: acc,
            test_err: 0.1,
            gamma_hat: 1.0,
            robustness: 1.0,
            frobenius: 1.0,
            spectral_radius: 1.0,
            converged: false,
            metrics: None,
            error: None,
        };
        let mut rows = vec![row(0.0, 1.0, 0.01), row(0.0, 1.0, 0.05), row(0.0, 0.9, 0.001)];
        let agg = aggregate_rows(&mut rows, &[0.0], 0.99, 2.0).unwrap();
        assert_eq!((agg[0].converged, agg[0].excluded), (1, 2));
        let mut none = vec![row(1.0, 0.5, 0.1)];
        assert!(matches!(aggregate_rows(&mut none, &[1.0], 0.99, 2.0), Err(Error::Scenario(_))));
    }

    #[test]
    fn ab_arms_are_paired() {
        let cfg = ScenarioConfig {
            levels: vec![1.0, 10.0],
            reg: RegConfig {
                m: 4,
                activate_after_epoch: Some(0),
                ..RegConfig::default()
            },
            ..small(ScenarioKind::RegularizerAb)
        };
        let res = regularizer_ab_test(&cfg).unwrap();
        let ab = res.ab.as_ref().unwrap();
        assert!(ab.best_beta == 1.0 || ab.best_beta == 10.0);
        let seeds = |beta: f64| -> Vec<u64> { res.rows.iter().filter(|r| r.level == beta).map(|r| r.seed).collect() };
        assert_eq!(seeds(0.0), seeds(ab.best_beta));

        // The no-regularizer arm is exactly a plain training run.
        let net = cfg.network().unwrap();
        let task = SyntheticTask::new(&cfg.data).unwrap();
        let (train_set, test) = task.datasets(cfg.seed).unwrap();
        let (_, rec) = train(&net, &ParamVector::init(&net, cfg.seed), &train_set, Some(&test), &cfg.schedule, &RegConfig::disabled(), cfg.seed).unwrap();
        let row = res.rows.iter().find(|r| r.level == 0.0 && r.repeat == 0).unwrap();
        assert_eq!(row.final_train_loss, rec.last().unwrap().train_loss);
    }
}
