//! Monte Carlo sweeps over (strategy, σ, NWC checkpoint).
//!
//! The schedulable unit is one (σ, run) pair. Within a unit every strategy
//! sees the same device draws, so strategy comparisons use common random
//! numbers. Units run on a rayon pool and their results are gathered by
//! index, so the output does not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nvcim_core::device::{calibrate_damped, NoiseModel, RewriteMode, RngStream};
use nvcim_core::nn::{evaluate_accuracy, Dataset, Network};
use nvcim_core::quant::{QuantConfig, QuantizedWeight};
use nvcim_core::stats;
use nvcim_core::swim::{
    magnitude_order, random_order, InSituOptions, InSituSession, Mapping, ProgramSession,
    RunDraws, SensitivityRank, Strategy,
};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Rewrite};
use crate::Error;

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "NVCIM_WORKERS";

pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.parse().ok().filter(|&w| w > 0)
}

/// Everything a sweep evaluates against.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    /// Trained, quantized network.
    pub net: &'a Network,
    /// Training data for in-situ updates.
    pub train: &'a Dataset,
    /// Training-set subset for the accuracy reported as `train_acc`.
    pub check: &'a Dataset,
    pub test: &'a Dataset,
    pub rank: &'a SensitivityRank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub sigma: f64,
    /// Index into the checkpoint list (0 for the single-point strategies).
    pub group_index: usize,
    pub nwc_target: f64,
    pub nwc: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seed: u64,
    pub run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub strategy: Strategy,
    pub sigma: f64,
    pub run: usize,
    pub message: String,
}

/// Mean and spread of one cell over its Monte Carlo runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MCStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub count: usize,
    /// Half-width of the normal-approximation 95% interval for the mean.
    pub half_width: f64,
    /// Set when `count == 1`, i.e. `std` carries no information.
    pub single_run: bool,
}

impl MCStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let count = xs.len();
        let std = stats::std_dev(xs);
        Self {
            mean: stats::mean(xs),
            std,
            count,
            half_width: if count > 0 {
                1.96 * std / (count as f64).sqrt()
            } else {
                f64::NAN
            },
            single_run: count == 1,
        }
    }

    pub fn std_error(&self) -> f64 {
        self.std / (self.count as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub strategy: Strategy,
    pub sigma: f64,
    pub nwc_target: f64,
    pub test: MCStats,
    pub train_mean: f64,
    pub nwc_mean: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub failures: Vec<Failure>,
    pub cells: Vec<Cell>,
    /// Rewrite factor used when damped mode was calibrated at start-up.
    pub alpha: Option<f64>,
}

impl SweepResult {
    pub fn cell(&self, strategy: Strategy, sigma: f64, nwc_target: f64) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.sigma == sigma && c.nwc_target == nwc_target)
    }
}

/// Device model for the configured rewrite mode at noise level `sigma`,
/// plus the calibrated α if calibration ran.
pub fn noise_model(cfg: &ExperimentConfig) -> Result<(NoiseModel, Option<f64>), Error> {
    let (mode, alpha) = match cfg.rewrite {
        Rewrite::Memoryless => (RewriteMode::Memoryless, None),
        Rewrite::Damped(a) => (RewriteMode::Damped { alpha: a }, None),
        Rewrite::DampedCalibrated => {
            let cal = calibrate_damped(
                cfg.calibration_sigma,
                cfg.tau,
                cfg.max_pulses,
                cfg.calibration_pulses,
                20_000,
                &RngStream::new(cfg.seed).named("calibration"),
            )?;
            (RewriteMode::Damped { alpha: cal.alpha }, Some(cal.alpha))
        }
    };
    let model = NoiseModel::new(cfg.calibration_sigma, cfg.tau, cfg.max_pulses, mode)?;
    Ok((model, alpha))
}

/// Random stream for one (σ, run) unit.
pub fn run_stream(seed: u64, sigma: f64, run: usize) -> RngStream {
    RngStream::new(seed)
        .named("sweep")
        .child(sigma.to_bits())
        .child(run as u64)
}

struct Unit {
    sigma: f64,
    run: usize,
}

struct UnitOutput {
    records: Vec<RunRecord>,
    failures: Vec<Failure>,
}

struct Evaluator<'a> {
    data: SweepData<'a>,
}

impl Evaluator<'_> {
    fn accs(&self, net: &Network) -> Result<(f64, f64), Error> {
        Ok((evaluate_accuracy(net, self.data.check)?, evaluate_accuracy(net, self.data.test)?))
    }
}

fn wv_checkpoints(cfg: &ExperimentConfig) -> Vec<(usize, f64)> {
    let mut cps: Vec<(usize, f64)> = cfg.checkpoints.iter().copied().enumerate().collect();
    cps.sort_by(|a, b| a.1.total_cmp(&b.1));
    cps
}

#[allow(clippy::too_many_arguments)]
fn run_unit(
    cfg: &ExperimentConfig,
    data: SweepData<'_>,
    codes: &[QuantizedWeight],
    quant: QuantConfig,
    base_noise: &NoiseModel,
    unit: &Unit,
) -> UnitOutput {
    let mut out = UnitOutput {
        records: Vec::new(),
        failures: Vec::new(),
    };
    let stream = run_stream(cfg.seed, unit.sigma, unit.run);
    let noise = match base_noise.with_sigma(unit.sigma) {
        Ok(n) => n,
        Err(e) => {
            for &s in &cfg.strategies {
                out.failures.push(Failure {
                    strategy: s,
                    sigma: unit.sigma,
                    run: unit.run,
                    message: e.to_string(),
                });
            }
            return out;
        }
    };
    let mapping = Mapping { quant, noise };
    let draws = RunDraws::simulate(codes, &mapping, &stream.named("devices").weights());
    let eval = Evaluator { data };
    let mut none_acc: Option<(f64, f64)> = None;
    let mut full_acc: Option<(f64, f64)> = None;
    let record = |strategy, group_index, nwc_target, nwc, (train_acc, test_acc): (f64, f64)| RunRecord {
        strategy,
        sigma: unit.sigma,
        group_index,
        nwc_target,
        nwc,
        train_acc,
        test_acc,
        seed: cfg.seed,
        run: unit.run,
    };

    for &strategy in &cfg.strategies {
        let result: Result<Vec<RunRecord>, Error> = (|| {
            let mut recs = Vec::new();
            match strategy {
                Strategy::NoneVerify => {
                    let acc = match none_acc {
                        Some(a) => a,
                        None => {
                            let s = ProgramSession::new(data.net, codes, quant, &draws, Vec::new())?;
                            *none_acc.insert(eval.accs(s.network())?)
                        }
                    };
                    recs.push(record(strategy, 0, 0.0, 0.0, acc));
                }
                Strategy::AllVerify => {
                    let acc = match full_acc {
                        Some(a) => a,
                        None => {
                            let order: Vec<usize> = (0..codes.len()).collect();
                            let mut s = ProgramSession::new(data.net, codes, quant, &draws, order)?;
                            s.verify_next(usize::MAX, None);
                            *full_acc.insert(eval.accs(s.network())?)
                        }
                    };
                    recs.push(record(strategy, 0, 1.0, 1.0, acc));
                }
                Strategy::Swim | Strategy::Magnitude | Strategy::Random => {
                    let order = match strategy {
                        Strategy::Swim => data.rank.order().to_vec(),
                        Strategy::Magnitude => magnitude_order(data.net.weights()),
                        _ => random_order(codes.len(), &stream.named("order")),
                    };
                    let mut s = ProgramSession::new(data.net, codes, quant, &draws, order)?;
                    for (gi, target) in wv_checkpoints(cfg) {
                        s.advance_to_nwc(target);
                        let acc = if s.verified() == 0 && none_acc.is_some() {
                            none_acc.expect("checked")
                        } else if s.remaining() == 0 && full_acc.is_some() {
                            full_acc.expect("checked")
                        } else {
                            let a = eval.accs(s.network())?;
                            if s.verified() == 0 {
                                none_acc = Some(a);
                            } else if s.remaining() == 0 {
                                full_acc = Some(a);
                            }
                            a
                        };
                        recs.push(record(strategy, gi, target, s.nwc()?, acc));
                    }
                }
                Strategy::InSitu => {
                    let s = ProgramSession::new(data.net, codes, quant, &draws, Vec::new())?;
                    let mapped = s.into_mapped(Vec::new());
                    let opts = InSituOptions {
                        lr: cfg.in_situ_lr,
                        iterations: 0,
                        batch: cfg.in_situ_batch,
                        grad_floor: 0.0,
                    };
                    let mut session = InSituSession::new(mapped, data.train, &opts, &noise, &stream)?;
                    for (gi, target) in wv_checkpoints(cfg) {
                        while session.nwc() < target {
                            if session.iterations() >= cfg.in_situ_max_iterations {
                                return Err(Error::Invalid(format!(
                                    "in-situ training hit {} iterations before NWC {target}",
                                    cfg.in_situ_max_iterations
                                )));
                            }
                            session.step()?;
                        }
                        let acc = eval.accs(session.network())?;
                        recs.push(record(strategy, gi, target, session.nwc(), acc));
                    }
                }
            }
            Ok(recs)
        })();
        match result {
            Ok(r) => out.records.extend(r),
            Err(e) => out.failures.push(Failure {
                strategy,
                sigma: unit.sigma,
                run: unit.run,
                message: e.to_string(),
            }),
        }
    }
    out
}

/// Runs every (σ, run) unit and aggregates per-cell statistics.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: SweepData<'_>,
    workers: Option<usize>,
) -> Result<SweepResult, Error> {
    cfg.validate().map_err(Error::Invalid)?;
    let quant = match data.net.quant() {
        Some(m) => QuantConfig::new(m.weight_bits, m.device_bits, m.w_max)?,
        None => QuantConfig::for_network(data.net, cfg.bits_weight, cfg.bits_device)?,
    };
    let codes = nvcim_core::quant::quantize_weights(data.net.weights(), &quant)?.codes;
    if data.rank.len() != codes.len() {
        return Err(nvcim_core::Error::RankMismatch {
            expected: codes.len(),
            found: data.rank.len(),
        }
        .into());
    }
    let (base_noise, alpha) = noise_model(cfg)?;
    let units: Vec<Unit> = cfg
        .sigmas
        .iter()
        .flat_map(|&sigma| (0..cfg.runs).map(move |run| Unit { sigma, run }))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let outputs: Vec<UnitOutput> = pool.install(|| {
        units
            .par_iter()
            .map(|u| run_unit(cfg, data, &codes, quant, &base_noise, u))
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outputs {
        records.extend(o.records);
        failures.extend(o.failures);
    }
    let cells = aggregate(cfg, &records, &failures);
    Ok(SweepResult {
        records,
        failures,
        cells,
        alpha,
    })
}

fn strategy_rank(s: Strategy) -> usize {
    Strategy::ALL.iter().position(|&x| x == s).expect("known strategy")
}

/// Cells ordered by σ (config order), then strategy, then NWC target.
pub fn aggregate(cfg: &ExperimentConfig, records: &[RunRecord], failures: &[Failure]) -> Vec<Cell> {
    let sigma_rank = |s: f64| cfg.sigmas.iter().position(|&x| x == s).unwrap_or(usize::MAX);
    type Key = (usize, usize, u64);
    let key = |st: Strategy, sigma: f64, nwc: f64| -> Key {
        (sigma_rank(sigma), strategy_rank(st), nwc.to_bits())
    };
    let mut groups: BTreeMap<Key, (Strategy, f64, f64, Vec<&RunRecord>)> = BTreeMap::new();
    for r in records {
        groups
            .entry(key(r.strategy, r.sigma, r.nwc_target))
            .or_insert_with(|| (r.strategy, r.sigma, r.nwc_target, Vec::new()))
            .3
            .push(r);
    }
    let mut cells: Vec<Cell> = groups
        .into_values()
        .map(|(strategy, sigma, nwc_target, rs)| {
            let test: Vec<f64> = rs.iter().map(|r| r.test_acc).collect();
            let train: Vec<f64> = rs.iter().map(|r| r.train_acc).collect();
            let nwc: Vec<f64> = rs.iter().map(|r| r.nwc).collect();
            Cell {
                strategy,
                sigma,
                nwc_target,
                test: MCStats::from_samples(&test),
                train_mean: stats::mean(&train),
                nwc_mean: stats::mean(&nwc),
                failures: failures
                    .iter()
                    .filter(|f| f.strategy == strategy && f.sigma == sigma)
                    .count(),
            }
        })
        .collect();
    cells.sort_by(|a, b| {
        (sigma_rank(a.sigma), strategy_rank(a.strategy))
            .cmp(&(sigma_rank(b.sigma), strategy_rank(b.strategy)))
            .then(a.nwc_target.total_cmp(&b.nwc_target))
    });
    cells
}

pub const RUNS_HEADER: &str = "strategy,sigma,group_index,nwc_target,nwc,train_acc,test_acc,seed,run";
pub const CELLS_HEADER: &str =
    "strategy,sigma,nwc_target,mean_test_acc,std_test_acc,runs,half_width,single_run,mean_train_acc,mean_nwc,failures";
pub const FAILURES_HEADER: &str = "strategy,sigma,run,message";

pub fn runs_csv(records: &[RunRecord]) -> String {
    let mut s = String::from(RUNS_HEADER);
    s.push('\n');
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.strategy, r.sigma, r.group_index, r.nwc_target, r.nwc, r.train_acc, r.test_acc, r.seed, r.run
        )
        .expect("string write");
    }
    s
}

pub fn cells_csv(cells: &[Cell]) -> String {
    let mut s = String::from(CELLS_HEADER);
    s.push('\n');
    for c in cells {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.strategy,
            c.sigma,
            c.nwc_target,
            c.test.mean,
            c.test.std,
            c.test.count,
            c.test.half_width,
            c.test.single_run,
            c.train_mean,
            c.nwc_mean,
            c.failures
        )
        .expect("string write");
    }
    s
}

pub fn failures_csv(failures: &[Failure]) -> String {
    let mut s = String::from(FAILURES_HEADER);
    s.push('\n');
    for f in failures {
        let msg = f.message.replace(['\n', ','], " ");
        writeln!(s, "{},{},{},{}", f.strategy, f.sigma, f.run, msg).expect("string write");
    }
    s
}

/// Writes `runs.csv`, `cells.csv`, `failures.csv` and `meta.txt` into `dir`.
pub fn write_outputs(
    result: &SweepResult,
    cfg: &ExperimentConfig,
    meta: &[(String, String)],
    dir: &Path,
) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("runs.csv"), runs_csv(&result.records))?;
    std::fs::write(dir.join("cells.csv"), cells_csv(&result.cells))?;
    std::fs::write(dir.join("failures.csv"), failures_csv(&result.failures))?;
    let mut m = cfg.to_text();
    if let Some(a) = result.alpha {
        writeln!(m, "# calibrated damped alpha = {a}").expect("string write");
    }
    for (k, v) in meta {
        writeln!(m, "# {k} = {v}").expect("string write");
    }
    std::fs::write(dir.join("meta.txt"), m)?;
    Ok(())
}
