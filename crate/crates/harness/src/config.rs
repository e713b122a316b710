//! Experiment configuration: a flat, versioned `key = value` text format.
//!
//! ```text
//! # comments and blank lines are ignored
//! version = 1
//! model = lenet
//! sigmas = 0.1, 0.15, 0.2
//! ```
//!
//! Every key is optional except `version`, which must be `1`. Unknown and
//! repeated keys are errors. Lists are comma separated.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `model` | `lenet`, `mlp-toy`, `convnet`, `resnet18` | `lenet` |
//! | `model_path` | trained network file | `runs/lenet.nvnet` |
//! | `bits_weight`, `bits_device` | M and K | `4`, `4` |
//! | `tau` | write-verify threshold, device units | `0.06` |
//! | `max_pulses` | per-device pulse cap | `1000` |
//! | `rewrite` | `memoryless`, `damped:<alpha>` or `damped-calibrated` | `memoryless` |
//! | `calibration_sigma`, `calibration_pulses` | damped calibration point | `0.1`, `10` |
//! | `strategies` | any of `swim magnitude random in-situ all-verify none` | all |
//! | `sigmas` | device-unit noise grid | `0.1, 0.15, 0.2` |
//! | `checkpoints` | NWC values recorded per strategy | `0.1, 0.3, 0.5, 0.7, 0.9, 1.0` |
//! | `runs` | Monte Carlo runs per σ | `100` |
//! | `seed` | global seed | `1` |
//! | `granularity` | weights per verify group, `0` = 5% of n | `0` |
//! | `delta_acc` | accuracy budget for `program`, `inf` allowed | `0.001` |
//! | `check_subset` | training images used for in-loop accuracy checks, `0` = all | `1000` |
//! | `test_subset` | test images used at checkpoints, `0` = all | `0` |
//! | `sensitivity_subset` | training images for the H_ii pass, `0` = all | `0` |
//! | `sensitivity_rule` | `diagonal` or `exact` | `diagonal` |
//! | `in_situ_lr`, `in_situ_batch` | in-situ SGD step and batch | `0.01`, `128` |
//! | `in_situ_max_iterations` | safety cap on in-situ steps | `10000` |
//! | `out` | output directory | `runs/sweep` |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nvcim_core::device::{DEFAULT_MAX_PULSES, DEFAULT_TAU};
use nvcim_core::nn::SecondOrderRule;
use nvcim_core::swim::Strategy;

use crate::models::ModelId;
use crate::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rewrite {
    Memoryless,
    Damped(f64),
    /// Damped mode with `α` tuned to the calibration target at start-up.
    DampedCalibrated,
}

impl Rewrite {
    fn render(&self) -> String {
        match self {
            Rewrite::Memoryless => "memoryless".into(),
            Rewrite::Damped(a) => format!("damped:{a}"),
            Rewrite::DampedCalibrated => "damped-calibrated".into(),
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "memoryless" => Ok(Rewrite::Memoryless),
            "damped-calibrated" => Ok(Rewrite::DampedCalibrated),
            _ => {
                let a = s
                    .strip_prefix("damped:")
                    .ok_or_else(|| format!("unknown rewrite mode `{s}`"))?;
                let a: f64 = a.trim().parse().map_err(|e| format!("bad alpha `{a}`: {e}"))?;
                if !(a > 0.0 && a <= 1.0) {
                    return Err(format!("alpha must be in (0, 1], got {a}"));
                }
                Ok(Rewrite::Damped(a))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelId,
    pub model_path: PathBuf,
    pub bits_weight: u32,
    pub bits_device: u32,
    pub tau: f64,
    pub max_pulses: u32,
    pub rewrite: Rewrite,
    pub calibration_sigma: f64,
    pub calibration_pulses: f64,
    pub strategies: Vec<Strategy>,
    pub sigmas: Vec<f64>,
    pub checkpoints: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    pub granularity: usize,
    pub delta_acc: f64,
    pub check_subset: usize,
    pub test_subset: usize,
    pub sensitivity_subset: usize,
    pub sensitivity_rule: SecondOrderRule,
    pub in_situ_lr: f64,
    pub in_situ_batch: usize,
    pub in_situ_max_iterations: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelId::LeNet,
            model_path: PathBuf::from("runs/lenet.nvnet"),
            bits_weight: 4,
            bits_device: 4,
            tau: DEFAULT_TAU,
            max_pulses: DEFAULT_MAX_PULSES,
            rewrite: Rewrite::Memoryless,
            calibration_sigma: 0.1,
            calibration_pulses: 10.0,
            strategies: Strategy::ALL.to_vec(),
            sigmas: vec![0.1, 0.15, 0.2],
            checkpoints: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            runs: 100,
            seed: 1,
            granularity: 0,
            delta_acc: 0.001,
            check_subset: 1000,
            test_subset: 0,
            sensitivity_subset: 0,
            sensitivity_rule: SecondOrderRule::Diagonal,
            in_situ_lr: 0.01,
            in_situ_batch: 128,
            in_situ_max_iterations: 10_000,
            out: PathBuf::from("runs/sweep"),
        }
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("bad value `{v}`: {e}"))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn rule_name(r: SecondOrderRule) -> &'static str {
    match r {
        SecondOrderRule::Diagonal => "diagonal",
        SecondOrderRule::Exact => "exact",
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        let mut version = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |reason: String| Error::Config {
                line: line_no,
                reason,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value, &mut version).map_err(err)?;
        }
        match version {
            Some(CONFIG_VERSION) => {}
            Some(v) => {
                return Err(Error::Config {
                    line: 0,
                    reason: format!("unsupported config version {v} (expected {CONFIG_VERSION})"),
                })
            }
            None => {
                return Err(Error::Config {
                    line: 0,
                    reason: "missing `version` key".into(),
                })
            }
        }
        cfg.validate().map_err(|reason| Error::Config { line: 0, reason })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str, version: &mut Option<u32>) -> Result<(), String> {
        match key {
            "version" => *version = Some(num(v)?),
            "model" => self.model = v.parse()?,
            "model_path" => self.model_path = PathBuf::from(v),
            "bits_weight" => self.bits_weight = num(v)?,
            "bits_device" => self.bits_device = num(v)?,
            "tau" => self.tau = num(v)?,
            "max_pulses" => self.max_pulses = num(v)?,
            "rewrite" => self.rewrite = Rewrite::parse(v)?,
            "calibration_sigma" => self.calibration_sigma = num(v)?,
            "calibration_pulses" => self.calibration_pulses = num(v)?,
            "strategies" => {
                self.strategies = list(v, |s| s.parse::<Strategy>().map_err(|e| e.to_string()))?
            }
            "sigmas" => self.sigmas = list(v, num)?,
            "checkpoints" => self.checkpoints = list(v, num)?,
            "runs" => self.runs = num(v)?,
            "seed" => self.seed = num(v)?,
            "granularity" => self.granularity = num(v)?,
            "delta_acc" => self.delta_acc = num(v)?,
            "check_subset" => self.check_subset = num(v)?,
            "test_subset" => self.test_subset = num(v)?,
            "sensitivity_subset" => self.sensitivity_subset = num(v)?,
            "sensitivity_rule" => {
                self.sensitivity_rule = match v {
                    "diagonal" => SecondOrderRule::Diagonal,
                    "exact" => SecondOrderRule::Exact,
                    other => return Err(format!("unknown sensitivity rule `{other}`")),
                }
            }
            "in_situ_lr" => self.in_situ_lr = num(v)?,
            "in_situ_batch" => self.in_situ_batch = num(v)?,
            "in_situ_max_iterations" => self.in_situ_max_iterations = num(v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.runs == 0 {
            return Err("runs must be at least 1".into());
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err("sigmas must be a non-empty list of finite values >= 0".into());
        }
        if self.strategies.is_empty() {
            return Err("at least one strategy is required".into());
        }
        if self.checkpoints.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err("checkpoints must be finite and >= 0".into());
        }
        let wv = self.strategies.iter().any(|s| s.is_write_verify());
        if wv && self.checkpoints.iter().any(|c| *c > 1.0) {
            return Err("write-verify checkpoints must lie in [0, 1]".into());
        }
        if !(self.tau > 0.0) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if self.max_pulses == 0 {
            return Err("max_pulses must be at least 1".into());
        }
        if self.delta_acc.is_nan() || self.delta_acc < 0.0 {
            return Err(format!("delta_acc must be >= 0, got {}", self.delta_acc));
        }
        if self.in_situ_batch == 0 {
            return Err("in_situ_batch must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical text form; [`ExperimentConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("version", CONFIG_VERSION.to_string());
        kv("model", self.model.to_string());
        kv("model_path", self.model_path.display().to_string());
        kv("bits_weight", self.bits_weight.to_string());
        kv("bits_device", self.bits_device.to_string());
        kv("tau", self.tau.to_string());
        kv("max_pulses", self.max_pulses.to_string());
        kv("rewrite", self.rewrite.render());
        kv("calibration_sigma", self.calibration_sigma.to_string());
        kv("calibration_pulses", self.calibration_pulses.to_string());
        kv("strategies", join(&self.strategies));
        kv("sigmas", join(&self.sigmas));
        kv("checkpoints", join(&self.checkpoints));
        kv("runs", self.runs.to_string());
        kv("seed", self.seed.to_string());
        kv("granularity", self.granularity.to_string());
        kv("delta_acc", self.delta_acc.to_string());
        kv("check_subset", self.check_subset.to_string());
        kv("test_subset", self.test_subset.to_string());
        kv("sensitivity_subset", self.sensitivity_subset.to_string());
        kv("sensitivity_rule", rule_name(self.sensitivity_rule).to_string());
        kv("in_situ_lr", self.in_situ_lr.to_string());
        kv("in_situ_batch", self.in_situ_batch.to_string());
        kv("in_situ_max_iterations", self.in_situ_max_iterations.to_string());
        kv("out", self.out.display().to_string());
        s
    }
}
