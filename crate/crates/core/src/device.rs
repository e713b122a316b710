//! Noisy device programming: one-shot writes, the write-verify loop and
//! pulse accounting.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quant::{compose, DeviceStack, QuantConfig, QuantizedWeight};

/// How a rejected device is re-pulsed during write-verify.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewriteMode {
    /// Every pulse redraws the device around its target.
    Memoryless,
    /// Every pulse moves the device a fraction `alpha` of the way towards its
    /// target and adds fresh programming noise.
    Damped { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
    tau: f64,
    max_pulses: u32,
    mode: RewriteMode,
}

pub const DEFAULT_TAU: f64 = 0.06;
pub const DEFAULT_MAX_PULSES: u32 = 1000;

impl NoiseModel {
    pub fn new(sigma: f64, tau: f64, max_pulses: u32, mode: RewriteMode) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::NoiseModel(format!("sigma must be >= 0, got {sigma}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::NoiseModel(format!("tau must be > 0, got {tau}")));
        }
        if max_pulses == 0 {
            return Err(Error::NoiseModel("max_pulses must be >= 1".into()));
        }
        if let RewriteMode::Damped { alpha } = mode {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::NoiseModel(format!("alpha must be in (0, 1], got {alpha}")));
            }
        }
        Ok(Self {
            sigma,
            tau,
            max_pulses,
            mode,
        })
    }

    /// Memoryless model with the default threshold and pulse cap.
    pub fn memoryless(sigma: f64) -> Result<Self> {
        Self::new(sigma, DEFAULT_TAU, DEFAULT_MAX_PULSES, RewriteMode::Memoryless)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn max_pulses(&self) -> u32 {
        self.max_pulses
    }

    pub fn mode(&self) -> RewriteMode {
        self.mode
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(sigma, self.tau, self.max_pulses, self.mode)
    }
}

/// Labelled random stream. The generator key is a hash of the global seed
/// and the label path, so streams never depend on creation order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    labels: Vec<u64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            labels: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn child(&self, label: u64) -> Self {
        let mut labels = self.labels.clone();
        labels.push(label);
        Self {
            seed: self.seed,
            labels,
        }
    }

    /// Child keyed by a text label (hashed to 64 bits).
    pub fn named(&self, label: &str) -> Self {
        let digest = Sha256::digest(label.as_bytes());
        self.child(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(b"nvcim-stream");
        h.update(self.seed.to_le_bytes());
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        let key: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(key)
    }

    /// Per-weight generators sharing this stream's key.
    pub fn weights(&self) -> WeightStreams {
        WeightStreams { base: self.rng() }
    }
}

/// Cheap access to one independent ChaCha stream per weight index.
#[derive(Debug, Clone)]
pub struct WeightStreams {
    base: ChaCha8Rng,
}

impl WeightStreams {
    pub fn get(&self, index: usize) -> ChaCha8Rng {
        let mut r = self.base.clone();
        r.set_stream(index as u64);
        r.set_word_pos(0);
        r
    }
}

#[inline]
fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One unverified pulse per device: `actual = target + N(0, σ²)`.
pub fn program_once<R: rand::Rng + ?Sized>(stack: &mut DeviceStack, model: &NoiseModel, rng: &mut R) {
    for (a, t) in stack.actuals.iter_mut().zip(&stack.targets) {
        *a = t + model.sigma * normal(rng);
    }
    stack.mark_programmed();
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub pulses: Vec<u32>,
    /// Devices that hit the pulse cap without meeting the threshold.
    pub capped: Vec<bool>,
}

impl VerifyOutcome {
    pub fn total(&self) -> u64 {
        self.pulses.iter().map(|&p| p as u64).sum()
    }

    pub fn accepted(&self) -> bool {
        !self.capped.iter().any(|&c| c)
    }
}

/// Pulse, read and compare each device until it lies within `τ` of its
/// target or the cap is reached. At least one pulse is always issued.
pub fn write_verify<R: rand::Rng + ?Sized>(
    stack: &mut DeviceStack,
    model: &NoiseModel,
    rng: &mut R,
) -> VerifyOutcome {
    let n = stack.targets.len();
    let mut pulses = vec![0u32; n];
    let mut capped = vec![false; n];
    for d in 0..n {
        let target = stack.targets[d];
        let mut actual = stack.actuals[d];
        let mut count = 0;
        loop {
            count += 1;
            actual = match model.mode {
                RewriteMode::Memoryless => target + model.sigma * normal(rng),
                RewriteMode::Damped { alpha } => {
                    actual + alpha * (target - actual) + model.sigma * normal(rng)
                }
            };
            if (actual - target).abs() <= model.tau {
                break;
            }
            if count >= model.max_pulses {
                capped[d] = true;
                break;
            }
        }
        stack.actuals[d] = actual;
        pulses[d] = count;
    }
    stack.mark_programmed();
    VerifyOutcome { pulses, capped }
}

/// Composed weight value; reading never costs a pulse.
pub fn read(stack: &DeviceStack, cfg: &QuantConfig) -> Result<f64> {
    if !stack.is_programmed() {
        return Err(Error::Unprogrammed(stack.weight_index));
    }
    Ok(compose(stack, cfg))
}

/// Per-weight pulse record for one programming run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramLog {
    pub pulses: Vec<u64>,
    /// Whether the weight went through write-verify and every device met
    /// the threshold.
    pub accepted: Vec<bool>,
    /// Pulses needed to write-verify every weight under the same streams.
    pub denominator: u64,
}

impl ProgramLog {
    pub fn new(weights: usize, denominator: u64) -> Self {
        Self {
            pulses: vec![0; weights],
            accepted: vec![false; weights],
            denominator,
        }
    }

    pub fn total(&self) -> u64 {
        self.pulses.iter().sum()
    }

    pub fn nwc(&self) -> Result<f64> {
        nwc(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("weight_index,pulses,accepted\n");
        for (i, (p, a)) in self.pulses.iter().zip(&self.accepted).enumerate() {
            let _ = writeln!(out, "{i},{p},{}", *a as u8);
        }
        out
    }
}

pub fn nwc(log: &ProgramLog) -> Result<f64> {
    if log.denominator == 0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(log.total() as f64 / log.denominator as f64)
}

/// Empirical pulse and residual statistics of the write-verify loop on
/// freshly programmed single devices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyStats {
    pub mean_pulses: f64,
    pub residual_std: f64,
    pub capped: usize,
}

pub fn verify_stats(model: &NoiseModel, devices: usize, stream: &RngStream) -> VerifyStats {
    let unit = QuantConfig::new(4, 4, 1.0).expect("static config");
    let mut rng = stream.rng();
    let mut pulses = 0u64;
    let mut sq = 0.0;
    let mut capped = 0;
    for _ in 0..devices {
        let mut stack = DeviceStack::new(0, QuantizedWeight { sign: 1, code: 0 }, &unit);
        program_once(&mut stack, model, &mut rng);
        let out = write_verify(&mut stack, model, &mut rng);
        pulses += out.total();
        capped += out.capped.iter().filter(|&&c| c).count();
        sq += stack.actuals[0] * stack.actuals[0];
    }
    VerifyStats {
        mean_pulses: pulses as f64 / devices as f64,
        residual_std: (sq / devices as f64).sqrt(),
        capped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampedCalibration {
    pub alpha: f64,
    pub stats: VerifyStats,
}

/// Bisects (in log space) for the damping factor whose mean pulse count
/// matches `target_mean`. Every probe reuses the same random stream.
pub fn calibrate_damped(
    sigma: f64,
    tau: f64,
    max_pulses: u32,
    target_mean: f64,
    devices: usize,
    stream: &RngStream,
) -> Result<DampedCalibration> {
    let probe = |alpha: f64| -> Result<VerifyStats> {
        let m = NoiseModel::new(sigma, tau, max_pulses, RewriteMode::Damped { alpha })?;
        Ok(verify_stats(&m, devices, stream))
    };
    let (mut lo, mut hi) = (1e-4f64.ln(), 0.0f64);
    if probe(1.0)?.mean_pulses > target_mean {
        return Err(Error::NoiseModel(format!(
            "no damping reaches a mean of {target_mean} pulses"
        )));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if probe(mid.exp())?.mean_pulses > target_mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = hi.exp();
    Ok(DampedCalibration {
        alpha,
        stats: probe(alpha)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;
    use rand::Rng;

    fn stack(code: u32, cfg: &QuantConfig) -> DeviceStack {
        DeviceStack::new(0, QuantizedWeight { sign: 1, code }, cfg)
    }

    #[test]
    fn zero_sigma_is_exact() {
        let cfg = QuantConfig::new(8, 4, 1.0).unwrap();
        let m = NoiseModel::memoryless(0.0).unwrap();
        let mut s = stack(200, &cfg);
        let mut rng = RngStream::new(1).rng();
        assert_eq!(read(&s, &cfg), Err(Error::Unprogrammed(0)));
        program_once(&mut s, &m, &mut rng);
        assert_eq!(s.actuals, s.targets);
        let q = quantize(read(&s, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(q.code, 200);
        let out = write_verify(&mut s, &m, &mut rng);
        assert_eq!(out.pulses, vec![1, 1]);
        assert!(out.accepted());
        assert_eq!(read(&s, &cfg).unwrap(), read(&s, &cfg).unwrap());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = RngStream::new(7).child(3);
        let a: Vec<u64> = (0..4).map(|_| s.rng().random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(s.rng().random::<u64>(), RngStream::new(7).child(4).rng().random::<u64>());
        let w = s.weights();
        assert_eq!(w.get(5).random::<u64>(), w.get(5).random::<u64>());
        assert_ne!(w.get(5).random::<u64>(), w.get(6).random::<u64>());
    }

    #[test]
    fn cap_is_flagged() {
        let cfg = QuantConfig::new(4, 4, 1.0).unwrap();
        let m = NoiseModel::new(10.0, 1e-6, 3, RewriteMode::Memoryless).unwrap();
        let mut s = stack(7, &cfg);
        let out = write_verify(&mut s, &m, &mut RngStream::new(0).rng());
        assert_eq!(out.pulses, vec![3]);
        assert_eq!(out.capped, vec![true]);
        assert!(!out.accepted());
    }

    #[test]
    fn accepted_devices_lie_within_tau() {
        let cfg = QuantConfig::new(8, 2, 1.0).unwrap();
        let m = NoiseModel::memoryless(0.2).unwrap();
        let mut rng = RngStream::new(2).rng();
        for code in 0..256 {
            let mut s = stack(code, &cfg);
            program_once(&mut s, &m, &mut rng);
            let out = write_verify(&mut s, &m, &mut rng);
            assert!(out.accepted());
            for (a, t) in s.actuals.iter().zip(&s.targets) {
                assert!((a - t).abs() <= m.tau());
            }
            let w = read(&s, &cfg).unwrap();
            let desired = code as f64 * cfg.scale();
            assert!((w - desired).abs() <= m.tau() * cfg.scale() * cfg.noise_gain().sqrt() * 2.0);
        }
    }

    #[test]
    fn nwc_accounting() {
        let mut log = ProgramLog::new(4, 10);
        assert_eq!(log.nwc().unwrap(), 0.0);
        log.pulses = vec![2, 3, 1, 4];
        assert_eq!(log.nwc().unwrap(), 1.0);
        log.denominator = 0;
        assert_eq!(log.nwc(), Err(Error::ZeroDenominator));
        assert!(log.to_csv().starts_with("weight_index,pulses,accepted\n0,2,0\n"));
    }

    #[test]
    fn model_validation() {
        assert!(NoiseModel::new(-0.1, 0.06, 10, RewriteMode::Memoryless).is_err());
        assert!(NoiseModel::new(0.1, 0.0, 10, RewriteMode::Memoryless).is_err());
        assert!(NoiseModel::new(0.1, 0.06, 0, RewriteMode::Memoryless).is_err());
        assert!(NoiseModel::new(0.1, 0.06, 10, RewriteMode::Damped { alpha: 0.0 }).is_err());
        assert!(NoiseModel::new(0.1, 0.06, 10, RewriteMode::Damped { alpha: 1.0 }).is_ok());
    }
}
