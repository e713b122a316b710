//! Sensitivity ranking, selective write-verify and the comparison
//! strategies, all sharing one pulse-accounting scheme.
//!
//! Every programming run draws its device noise from per-weight random
//! streams, so the outcome of verifying weight `i` in a given run does not
//! depend on the order in which a strategy visits the weights. Strategies
//! compared on the same run therefore see identical device behaviour and
//! share one NWC denominator.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::device::{program_once, write_verify, NoiseModel, ProgramLog, RngStream, WeightStreams};
use crate::error::{Error, Result};
use crate::nn::{
    backward, dataset_second, evaluate_accuracy, forward, Dataset, Network, SecondOrderOptions,
};
use crate::quant::{compose, quantize_weights, DeviceStack, QuantConfig, QuantizedWeight};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Swim,
    Magnitude,
    Random,
    InSitu,
    AllVerify,
    NoneVerify,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Swim,
        Strategy::Magnitude,
        Strategy::Random,
        Strategy::InSitu,
        Strategy::AllVerify,
        Strategy::NoneVerify,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Swim => "swim",
            Strategy::Magnitude => "magnitude",
            Strategy::Random => "random",
            Strategy::InSitu => "in-situ",
            Strategy::AllVerify => "all-verify",
            Strategy::NoneVerify => "none",
        }
    }

    pub fn is_write_verify(&self) -> bool {
        matches!(
            self,
            Strategy::Swim | Strategy::Magnitude | Strategy::Random | Strategy::AllVerify
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Plan(format!("unknown strategy `{s}`")))
    }
}

/// Weight indices in write-verify priority order plus the keys that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRank {
    order: Vec<usize>,
    second: Vec<f64>,
    magnitude: Vec<f64>,
}

impl SensitivityRank {
    /// Sorts by second derivative descending, then by `|w|` descending,
    /// then by index.
    pub fn from_keys(second: Vec<f64>, weights: &[f64]) -> Result<Self> {
        if second.len() != weights.len() {
            return Err(Error::RankMismatch {
                expected: weights.len(),
                found: second.len(),
            });
        }
        if second.iter().any(|h| !h.is_finite()) {
            return Err(Error::NonFinite("second derivative"));
        }
        let magnitude: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
        let mut order: Vec<usize> = (0..second.len()).collect();
        order.sort_by(|&a, &b| {
            second[b]
                .total_cmp(&second[a])
                .then(magnitude[b].total_cmp(&magnitude[a]))
                .then(a.cmp(&b))
        });
        Ok(Self {
            order,
            second,
            magnitude,
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn second(&self) -> &[f64] {
        &self.second
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `(H_ii, |w_i|)` for weight `i`.
    pub fn key(&self, i: usize) -> (f64, f64) {
        (self.second[i], self.magnitude[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityOptions {
    pub batch: usize,
    pub second: SecondOrderOptions,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            batch: 256,
            second: SecondOrderOptions::default(),
        }
    }
}

/// One forward and second-derivative pass over `data`, then ranking.
pub fn sensitivity_rank(
    net: &Network,
    data: &Dataset,
    opts: &SensitivityOptions,
) -> Result<SensitivityRank> {
    let h = dataset_second(net, data, opts.batch, &opts.second)?;
    SensitivityRank::from_keys(h.second, net.weights())
}

/// Largest `|w|` first; ties by index.
pub fn magnitude_order(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    order
}

/// Uniform permutation drawn from `stream`.
pub fn random_order(n: usize, stream: &RngStream) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.rng());
    order
}

/// `⌈5% · n⌉`.
pub fn default_granularity(n: usize) -> usize {
    n.div_ceil(20).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgramPlan {
    pub strategy: Strategy,
    /// Weights write-verified between accuracy checks.
    pub granularity: usize,
    /// Stop once the accuracy drop on the check set is at most this much.
    /// `None` disables the accuracy stop.
    pub delta_acc: Option<f64>,
    /// Stop once this fraction of the full write-verify pulse count is spent.
    pub nwc_budget: Option<f64>,
}

impl ProgramPlan {
    pub fn new(strategy: Strategy, n: usize) -> Self {
        Self {
            strategy,
            granularity: default_granularity(n),
            delta_acc: None,
            nwc_budget: None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.granularity == 0 || self.granularity > n {
            return Err(Error::Plan(format!(
                "granularity {} outside 1..={n}",
                self.granularity
            )));
        }
        if let Some(d) = self.delta_acc {
            if d.is_nan() || d < 0.0 {
                return Err(Error::Plan(format!("accuracy budget must be >= 0, got {d}")));
            }
        }
        if let Some(b) = self.nwc_budget {
            if b.is_nan() || b < 0.0 {
                return Err(Error::Plan(format!("NWC budget must be >= 0, got {b}")));
            }
        }
        Ok(())
    }
}

/// Device model shared by every strategy in a comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mapping {
    pub quant: QuantConfig,
    pub noise: NoiseModel,
}

impl Mapping {
    pub fn codes(&self, net: &Network) -> Result<Vec<QuantizedWeight>> {
        Ok(quantize_weights(net.weights(), &self.quant)?.codes)
    }
}

/// Data used while programming: `check` drives the accuracy stop, `test`
/// is only logged.
#[derive(Debug, Clone, Copy)]
pub struct Checks<'a> {
    pub check: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    /// Groups verified so far (iterations, for in-situ training).
    pub step: usize,
    pub nwc: f64,
    pub check_acc: f64,
    pub test_acc: Option<f64>,
}

/// Every random outcome of one programming run, drawn up front: the
/// one-shot actuals and, for every weight, what write-verify would produce.
#[derive(Debug, Clone)]
pub struct RunDraws {
    devices: usize,
    initial: Vec<f64>,
    verified: Vec<f64>,
    pulses: Vec<u32>,
    accepted: Vec<bool>,
    denominator: u64,
}

impl RunDraws {
    pub fn simulate(codes: &[QuantizedWeight], mapping: &Mapping, streams: &WeightStreams) -> Self {
        let d = mapping.quant.devices_per_weight();
        let n = codes.len();
        let mut initial = Vec::with_capacity(n * d);
        let mut verified = Vec::with_capacity(n * d);
        let mut pulses = Vec::with_capacity(n);
        let mut accepted = Vec::with_capacity(n);
        for (i, &q) in codes.iter().enumerate() {
            let mut rng = streams.get(i);
            let mut stack = DeviceStack::new(i, q, &mapping.quant);
            program_once(&mut stack, &mapping.noise, &mut rng);
            initial.extend_from_slice(&stack.actuals);
            let out = write_verify(&mut stack, &mapping.noise, &mut rng);
            verified.extend_from_slice(&stack.actuals);
            pulses.push(out.total() as u32);
            accepted.push(out.accepted());
        }
        let denominator = pulses.iter().map(|&p| p as u64).sum();
        Self {
            devices: d,
            initial,
            verified,
            pulses,
            accepted,
            denominator,
        }
    }

    pub fn len(&self) -> usize {
        self.pulses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pulses.is_empty()
    }

    /// Pulses needed to write-verify every weight in this run.
    pub fn denominator(&self) -> u64 {
        self.denominator
    }

    pub fn pulses(&self, i: usize) -> u32 {
        self.pulses[i]
    }

    fn initial(&self, i: usize) -> &[f64] {
        &self.initial[i * self.devices..(i + 1) * self.devices]
    }

    fn verified(&self, i: usize) -> &[f64] {
        &self.verified[i * self.devices..(i + 1) * self.devices]
    }
}

fn composed(sign: i8, actuals: &[f64], cfg: &QuantConfig) -> f64 {
    let mag: f64 = actuals.iter().enumerate().map(|(i, a)| a * cfg.place(i)).sum();
    sign as f64 * cfg.scale() * mag
}

/// A network in the middle of being programmed: all weights one-shot
/// written, a prefix of `order` write-verified.
#[derive(Debug, Clone)]
pub struct ProgramSession<'a> {
    net: Network,
    codes: &'a [QuantizedWeight],
    cfg: QuantConfig,
    draws: &'a RunDraws,
    order: Vec<usize>,
    cursor: usize,
    log: ProgramLog,
    total: u64,
}

impl<'a> ProgramSession<'a> {
    pub fn new(
        base: &Network,
        codes: &'a [QuantizedWeight],
        cfg: QuantConfig,
        draws: &'a RunDraws,
        order: Vec<usize>,
    ) -> Result<Self> {
        let n = base.weight_count();
        if codes.len() != n || draws.len() != n || order.len() > n {
            return Err(Error::RankMismatch {
                expected: n,
                found: codes.len().min(draws.len()),
            });
        }
        let mut net = base.clone();
        for (i, w) in net.weights_mut().iter_mut().enumerate() {
            *w = composed(codes[i].sign, draws.initial(i), &cfg);
        }
        Ok(Self {
            net,
            codes,
            cfg,
            draws,
            order,
            cursor: 0,
            log: ProgramLog::new(n, draws.denominator()),
            total: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn verified(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.order.len() - self.cursor
    }

    pub fn pulses(&self) -> u64 {
        self.total
    }

    pub fn nwc(&self) -> Result<f64> {
        if self.log.denominator == 0 {
            return Err(Error::ZeroDenominator);
        }
        Ok(self.total as f64 / self.log.denominator as f64)
    }

    fn verify_one(&mut self) {
        let i = self.order[self.cursor];
        self.cursor += 1;
        self.net.weights_mut()[i] = composed(self.codes[i].sign, self.draws.verified(i), &self.cfg);
        let p = self.draws.pulses(i) as u64;
        self.log.pulses[i] = p;
        self.log.accepted[i] = self.draws.accepted[i];
        self.total += p;
    }

    /// Verifies up to `count` further weights, stopping early once the
    /// pulse budget (if any) is used up. Returns how many were verified.
    pub fn verify_next(&mut self, count: usize, pulse_budget: Option<u64>) -> usize {
        let mut done = 0;
        while done < count && self.cursor < self.order.len() {
            if pulse_budget.is_some_and(|b| self.total >= b) {
                break;
            }
            self.verify_one();
            done += 1;
        }
        done
    }

    /// Verifies weights in order until the spent pulses reach `nwc` times
    /// the full write-verify cost.
    pub fn advance_to_nwc(&mut self, nwc: f64) {
        let budget = (nwc * self.log.denominator as f64).ceil() as u64;
        self.verify_next(usize::MAX, Some(budget));
    }

    pub fn budget_exhausted(&self, pulse_budget: Option<u64>) -> bool {
        pulse_budget.is_some_and(|b| self.total >= b)
    }

    pub fn into_mapped(self, trajectory: Vec<TrajectoryPoint>) -> MappedNetwork {
        let n = self.net.weight_count();
        let verified: Vec<bool> = {
            let mut v = vec![false; n];
            for &i in &self.order[..self.cursor] {
                v[i] = true;
            }
            v
        };
        let stacks = (0..n)
            .map(|i| {
                let mut s = DeviceStack::new(i, self.codes[i], &self.cfg);
                let src = if verified[i] {
                    self.draws.verified(i)
                } else {
                    self.draws.initial(i)
                };
                s.actuals.copy_from_slice(src);
                s.mark_programmed();
                s
            })
            .collect();
        MappedNetwork {
            net: self.net,
            stacks,
            quant: self.cfg,
            log: self.log,
            trajectory,
        }
    }
}

/// A programmed network: its weights are always the composed device values.
#[derive(Debug, Clone)]
pub struct MappedNetwork {
    net: Network,
    stacks: Vec<DeviceStack>,
    quant: QuantConfig,
    pub log: ProgramLog,
    pub trajectory: Vec<TrajectoryPoint>,
}

impl MappedNetwork {
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn stacks(&self) -> &[DeviceStack] {
        &self.stacks
    }

    pub fn quant(&self) -> &QuantConfig {
        &self.quant
    }

    pub fn nwc(&self) -> Result<f64> {
        self.log.nwc()
    }

    fn recompose(&mut self, i: usize) {
        self.net.weights_mut()[i] = compose(&self.stacks[i], &self.quant);
    }
}

fn point(step: usize, nwc: f64, net: &Network, checks: &Checks<'_>) -> Result<TrajectoryPoint> {
    Ok(TrajectoryPoint {
        step,
        nwc,
        check_acc: evaluate_accuracy(net, checks.check)?,
        test_acc: checks.test.map(|t| evaluate_accuracy(net, t)).transpose()?,
    })
}

/// The selective write-verify loop over an arbitrary priority order.
pub fn program_in_order(
    net: &Network,
    order: Vec<usize>,
    plan: &ProgramPlan,
    mapping: &Mapping,
    checks: &Checks<'_>,
    stream: &RngStream,
) -> Result<MappedNetwork> {
    let n = net.weight_count();
    plan.validate(n)?;
    let codes = mapping.codes(net)?;
    let draws = RunDraws::simulate(&codes, mapping, &stream.named("devices").weights());
    let clean = evaluate_accuracy(net, checks.check)?;
    let mut session = ProgramSession::new(net, &codes, mapping.quant, &draws, order)?;
    let budget = plan
        .nwc_budget
        .map(|b| (b * draws.denominator() as f64).ceil() as u64);
    let mut trajectory = vec![point(0, 0.0, session.network(), checks)?];
    let mut group = 0;
    while session.remaining() > 0 && !session.budget_exhausted(budget) {
        session.verify_next(plan.granularity, budget);
        group += 1;
        let p = point(group, session.nwc()?, session.network(), checks)?;
        trajectory.push(p);
        if plan.delta_acc.is_some_and(|d| clean - p.check_acc <= d) {
            break;
        }
    }
    Ok(session.into_mapped(trajectory))
}

/// Selective write-verify in sensitivity order.
pub fn swim_program(
    net: &Network,
    rank: &SensitivityRank,
    plan: &ProgramPlan,
    mapping: &Mapping,
    checks: &Checks<'_>,
    stream: &RngStream,
) -> Result<MappedNetwork> {
    if rank.len() != net.weight_count() {
        return Err(Error::RankMismatch {
            expected: net.weight_count(),
            found: rank.len(),
        });
    }
    program_in_order(net, rank.order().to_vec(), plan, mapping, checks, stream)
}

pub fn baseline_magnitude(
    net: &Network,
    plan: &ProgramPlan,
    mapping: &Mapping,
    checks: &Checks<'_>,
    stream: &RngStream,
) -> Result<MappedNetwork> {
    program_in_order(net, magnitude_order(net.weights()), plan, mapping, checks, stream)
}

pub fn baseline_random(
    net: &Network,
    plan: &ProgramPlan,
    mapping: &Mapping,
    checks: &Checks<'_>,
    stream: &RngStream,
) -> Result<MappedNetwork> {
    let order = random_order(net.weight_count(), &stream.named("order"));
    program_in_order(net, order, plan, mapping, checks, stream)
}

/// One-shot programming only; nothing is verified.
pub fn program_unverified(
    net: &Network,
    mapping: &Mapping,
    checks: &Checks<'_>,
    stream: &RngStream,
) -> Result<MappedNetwork> {
    let plan = ProgramPlan {
        nwc_budget: Some(0.0),
        ..ProgramPlan::new(Strategy::NoneVerify, net.weight_count())
    };
    program_in_order(net, Vec::new(), &plan, mapping, checks, stream)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InSituOptions {
    /// Learning rate in weight units.
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    /// Weights whose gradient magnitude is below this are not rewritten.
    pub grad_floor: f64,
}

impl Default for InSituOptions {
    fn default() -> Self {
        Self {
            lr: 0.01,
            iterations: 10,
            batch: 128,
            grad_floor: 0.0,
        }
    }
}

/// Splits a non-negative magnitude (device units) into device targets:
/// integer digits in base `2^K` with the fractional remainder on the least
/// significant device.
fn split_magnitude(mag: f64, cfg: &QuantConfig) -> Vec<f64> {
    let whole = mag.floor();
    let q = QuantizedWeight {
        sign: 1,
        code: whole as u32,
    };
    let mut t: Vec<f64> = crate::quant::slice(q, cfg).into_iter().map(f64::from).collect();
    t[0] += mag - whole;
    t
}

/// In-situ fine-tuning in progress: gradients are taken at the noisy
/// weights, and each updated weight is rewritten once (without verify)
/// towards its new value. Writes are charged against the same denominator
/// as the write-verify strategies.
#[derive(Debug, Clone)]
pub struct InSituSession<'a> {
    mapped: MappedNetwork,
    data: &'a Dataset,
    opts: InSituOptions,
    noise: NoiseModel,
    desired: Vec<f64>,
    writes: u64,
    order_stream: RngStream,
    noise_stream: RngStream,
    perm: Vec<usize>,
    epoch: u64,
    pos: usize,
    iteration: usize,
}

impl<'a> InSituSession<'a> {
    pub fn new(
        mapped: MappedNetwork,
        data: &'a Dataset,
        opts: &InSituOptions,
        noise: &NoiseModel,
        stream: &RngStream,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if mapped.log.denominator == 0 {
            return Err(Error::ZeroDenominator);
        }
        let cfg = mapped.quant;
        let desired = mapped
            .stacks
            .iter()
            .map(|s| s.sign as f64 * s.target_magnitude(&cfg))
            .collect();
        let writes = mapped.log.total();
        Ok(Self {
            mapped,
            data,
            opts: *opts,
            noise: *noise,
            desired,
            writes,
            order_stream: stream.named("in-situ-batches"),
            noise_stream: stream.named("in-situ-writes"),
            perm: Vec::new(),
            epoch: 0,
            pos: 0,
            iteration: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.mapped.net
    }

    pub fn iterations(&self) -> usize {
        self.iteration
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn nwc(&self) -> f64 {
        self.writes as f64 / self.mapped.log.denominator as f64
    }

    /// One mini-batch gradient step followed by the device rewrites.
    pub fn step(&mut self) -> Result<()> {
        let batch = self.opts.batch.clamp(1, self.data.len());
        if self.pos + batch > self.perm.len() {
            self.perm = random_order(self.data.len(), &self.order_stream.child(self.epoch));
            self.epoch += 1;
            self.pos = 0;
        }
        let mb = self.data.subset(&self.perm[self.pos..self.pos + batch]);
        self.pos += batch;
        let (_, cache) = forward(&self.mapped.net, &mb.inputs)?;
        let g = backward(&self.mapped.net, &cache, &mb.targets())?;
        if !g.loss.is_finite() || g.grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: self.iteration,
                loss: g.loss,
            });
        }
        let cfg = self.mapped.quant;
        let max = cfg.max_code() as f64;
        let scale = cfg.scale();
        let mut rng = self.noise_stream.child(self.iteration as u64).rng();
        for (i, grad) in g.grads.iter().enumerate() {
            if grad.abs() < self.opts.grad_floor {
                continue;
            }
            let d = (self.desired[i] - self.opts.lr * grad / scale).clamp(-max, max);
            self.desired[i] = d;
            let stack = &mut self.mapped.stacks[i];
            stack.sign = if d < 0.0 { -1 } else { 1 };
            stack.targets = split_magnitude(d.abs(), &cfg);
            program_once(stack, &self.noise, &mut rng);
            let p = stack.targets.len() as u64;
            self.mapped.log.pulses[i] += p;
            self.writes += p;
            self.mapped.recompose(i);
        }
        self.iteration += 1;
        Ok(())
    }

    pub fn into_mapped(self) -> MappedNetwork {
        self.mapped
    }
}

/// Runs `opts.iterations` in-situ steps, recording accuracy after each.
pub fn in_situ_train(
    mapped: MappedNetwork,
    data: &Dataset,
    opts: &InSituOptions,
    noise: &NoiseModel,
    checks: &Checks<'_>,
    stream: &RngStream,
) -> Result<MappedNetwork> {
    let mut trajectory = mapped.trajectory.clone();
    let mut session = InSituSession::new(mapped, data, opts, noise, stream)?;
    if trajectory.is_empty() {
        trajectory.push(point(0, session.nwc(), session.network(), checks)?);
    }
    for it in 0..opts.iterations {
        session.step()?;
        trajectory.push(point(it + 1, session.nwc(), session.network(), checks)?);
    }
    let mut mapped = session.into_mapped();
    mapped.trajectory = trajectory;
    Ok(mapped)
}
