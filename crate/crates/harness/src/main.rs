use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nvcim_core::device::RngStream;
use nvcim_core::nn::{evaluate_accuracy, load_network, save_network, Network};
use nvcim_core::quant::QuantConfig;
use nvcim_core::swim::{
    baseline_magnitude, baseline_random, program_unverified, swim_program, Checks, InSituOptions,
    InSituSession, Mapping, MappedNetwork, ProgramPlan, Strategy,
};
use nvcim_harness::config::ExperimentConfig;
use nvcim_harness::correlate::{correlation_study, CorrelationOptions};
use nvcim_harness::experiment::{load_data, prepare, rank_for, subset_meta, Data};
use nvcim_harness::models::{self, ModelId};
use nvcim_harness::sweep::{self, run_sweep, write_outputs, SweepData};
use nvcim_harness::train::{train_model, TrainOptions};
use nvcim_harness::report;

#[derive(Parser)]
#[command(name = "nvcim", version, about = "Selective write-verify experiments on simulated NVM crossbars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantization-aware training; writes the model to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Per-weight second derivatives and the programming order they imply.
    Rank {
        #[command(flatten)]
        common: Common,
    },
    /// One programming run with the first --strategy at the first --sigma.
    Program {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo sweep over strategies, noise levels and NWC checkpoints.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Single-weight perturbation study.
    Correlate {
        #[command(flatten)]
        common: Common,
        /// Weights studied; 0 = all.
        #[arg(long, default_value_t = 500)]
        sample: usize,
        /// Perturbation std in units of the weight quantization step.
        #[arg(long, default_value_t = 8.0)]
        noise_lsb: f64,
    },
    /// Tables and curve data from one or more cells.csv files.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelId>,
    /// Trained network file.
    #[arg(long)]
    model_path: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    sigma: Vec<f64>,
    #[arg(long)]
    bits_weight: Option<u32>,
    #[arg(long)]
    bits_device: Option<u32>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    granularity: Option<usize>,
    #[arg(long)]
    delta_acc: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    test_subset: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.model {
            c.model = m;
        }
        if let Some(p) = &self.model_path {
            c.model_path = p.clone();
        }
        if !self.sigma.is_empty() {
            c.sigmas = self.sigma.clone();
        }
        if !self.strategy.is_empty() {
            c.strategies = self.strategy.clone();
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(bits_weight, bits_device, tau, granularity, delta_acc, runs, seed, test_subset);
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        c.validate().map_err(anyhow::Error::msg)?;
        Ok(c)
    }
}

fn log_data(data: &Data) {
    for (k, v) in &data.meta {
        eprintln!("{k}: {v}");
    }
}

fn load_model(cfg: &ExperimentConfig) -> Result<Network> {
    let net = load_network(&cfg.model_path)
        .with_context(|| format!("loading model {}", cfg.model_path.display()))?;
    eprintln!("model: {} ({} weights)", cfg.model_path.display(), net.weight_count());
    Ok(net)
}

fn quant_of(net: &Network, cfg: &ExperimentConfig) -> Result<QuantConfig> {
    Ok(match net.quant() {
        Some(m) => QuantConfig::new(m.weight_bits, m.device_bits, m.w_max)?,
        None => QuantConfig::for_network(net, cfg.bits_weight, cfg.bits_device)?,
    })
}

fn train(common: &Common, epochs: usize, lr: f64, batch: usize) -> Result<()> {
    let cfg = common.config()?;
    let data = load_data(cfg.model, cfg.seed)?;
    log_data(&data);
    let mut net = models::build(cfg.model, Some(cfg.bits_weight));
    let stream = RngStream::new(cfg.seed);
    net.init_he(&mut stream.named("init").rng());
    let opts = TrainOptions {
        epochs,
        batch,
        lr,
        weight_bits: Some(cfg.bits_weight),
        device_bits: cfg.bits_device,
        ..TrainOptions::default()
    };
    let t = Instant::now();
    let out = train_model(net, &data.train, &opts, &stream, |r| {
        eprintln!(
            "epoch {} lr {:.4} loss {:.4} ({:.0?})",
            r.epoch + 1,
            r.lr,
            r.mean_loss,
            t.elapsed()
        );
    })?;
    let acc = evaluate_accuracy(&out.net, &data.test)?;
    let path = common.out.clone().unwrap_or(cfg.model_path);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_network(&out.net, &path)?;
    println!("test accuracy {:.4}  saved {}", acc, path.display());
    Ok(())
}

fn rank(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let data = load_data(cfg.model, cfg.seed)?;
    log_data(&data);
    let net = load_model(&cfg)?;
    let r = rank_for(&net, &data.train, &cfg)?;
    let mut s = String::from("rank,weight_index,second,magnitude\n");
    for (k, &i) in r.order().iter().enumerate() {
        let (h, m) = r.key(i);
        writeln!(s, "{k},{i},{h},{m}")?;
    }
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("rank.csv");
    std::fs::write(&path, s)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn trajectory_csv(m: &MappedNetwork) -> String {
    let mut s = String::from("step,nwc,check_acc,test_acc\n");
    for p in &m.trajectory {
        let test = p.test_acc.map(|t| t.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{}", p.step, p.nwc, p.check_acc, test).expect("string write");
    }
    s
}

fn program(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let strategy = cfg.strategies[0];
    let sigma = cfg.sigmas[0];
    let data = load_data(cfg.model, cfg.seed)?;
    log_data(&data);
    let net = load_model(&cfg)?;
    let prep = prepare(&net, &data, &cfg)?;
    let (base, alpha) = sweep::noise_model(&cfg)?;
    if let Some(a) = alpha {
        eprintln!("calibrated damped alpha {a:.4}");
    }
    let mapping = Mapping {
        quant: quant_of(&net, &cfg)?,
        noise: base.with_sigma(sigma)?,
    };
    let checks = Checks {
        check: &prep.check,
        test: Some(&prep.test),
    };
    let mut plan = ProgramPlan::new(strategy, net.weight_count());
    if cfg.granularity > 0 {
        plan.granularity = cfg.granularity;
    }
    plan.delta_acc = Some(cfg.delta_acc);
    let stream = sweep::run_stream(cfg.seed, sigma, 0);
    let mapped = match strategy {
        Strategy::Swim => swim_program(&net, &prep.rank, &plan, &mapping, &checks, &stream)?,
        Strategy::Magnitude => baseline_magnitude(&net, &plan, &mapping, &checks, &stream)?,
        Strategy::Random => baseline_random(&net, &plan, &mapping, &checks, &stream)?,
        Strategy::AllVerify => {
            plan.delta_acc = None;
            swim_program(&net, &prep.rank, &plan, &mapping, &checks, &stream)?
        }
        Strategy::NoneVerify => program_unverified(&net, &mapping, &checks, &stream)?,
        Strategy::InSitu => in_situ(&net, &cfg, &mapping, &checks, &data, &stream)?,
    };
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("program_log.csv"), mapped.log.to_csv())?;
    std::fs::write(cfg.out.join("trajectory.csv"), trajectory_csv(&mapped))?;
    let test = evaluate_accuracy(mapped.network(), &prep.test)?;
    println!(
        "{strategy} sigma {sigma}: nwc {:.4} test accuracy {:.4}  wrote {}",
        mapped.nwc()?,
        test,
        cfg.out.display()
    );
    Ok(())
}

/// Unverified programming followed by in-situ training until the NWC
/// reaches the largest checkpoint.
fn in_situ(
    net: &Network,
    cfg: &ExperimentConfig,
    mapping: &Mapping,
    checks: &Checks<'_>,
    data: &Data,
    stream: &RngStream,
) -> Result<MappedNetwork> {
    let mapped = program_unverified(net, mapping, checks, stream)?;
    let mut trajectory = mapped.trajectory.clone();
    let opts = InSituOptions {
        lr: cfg.in_situ_lr,
        iterations: 0,
        batch: cfg.in_situ_batch,
        grad_floor: 0.0,
    };
    let target = cfg.checkpoints.iter().copied().fold(0.0, f64::max);
    let mut session = InSituSession::new(mapped, &data.train, &opts, &mapping.noise, stream)?;
    while session.nwc() < target {
        if session.iterations() >= cfg.in_situ_max_iterations {
            bail!("in-situ training hit {} iterations", cfg.in_situ_max_iterations);
        }
        session.step()?;
        let mut p = *trajectory.last().expect("initial point");
        p.step = session.iterations();
        p.nwc = session.nwc();
        p.check_acc = evaluate_accuracy(session.network(), checks.check)?;
        p.test_acc = None;
        trajectory.push(p);
    }
    let mut out = session.into_mapped();
    out.trajectory = trajectory;
    Ok(out)
}

fn run_sweep_cmd(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let data = load_data(cfg.model, cfg.seed)?;
    log_data(&data);
    let net = load_model(&cfg)?;
    let prep = prepare(&net, &data, &cfg)?;
    let workers = sweep::workers_from_env();
    let t = Instant::now();
    let result = run_sweep(
        &cfg,
        SweepData {
            net: &net,
            train: &data.train,
            check: &prep.check,
            test: &prep.test,
            rank: &prep.rank,
        },
        workers,
    )?;
    eprintln!(
        "{} records, {} failures in {:.1?}",
        result.records.len(),
        result.failures.len(),
        t.elapsed()
    );
    write_outputs(&result, &cfg, &subset_meta(&data, &prep), &cfg.out)?;
    let table = report::report(&[cfg.out.join("cells.csv")], &cfg.out)?;
    print!("{table}");
    Ok(())
}

fn correlate(common: &Common, sample: usize, noise_lsb: f64) -> Result<()> {
    let mut cfg = common.config()?;
    if common.runs.is_none() && common.config.is_none() {
        cfg.runs = 100;
    }
    let data = load_data(cfg.model, cfg.seed)?;
    log_data(&data);
    let net = load_model(&cfg)?;
    let q = quant_of(&net, &cfg)?;
    let rank = rank_for(&net, &data.train, &cfg)?;
    let test = if cfg.test_subset > 0 && cfg.test_subset < data.test.len() {
        data.test.head(cfg.test_subset)
    } else {
        data.test.clone()
    };
    let opts = CorrelationOptions {
        sample,
        runs: cfg.runs,
        noise_std: noise_lsb * q.scale(),
    };
    let res = correlation_study(&net, &test, rank.second(), &opts, &RngStream::new(cfg.seed))?;
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("correlation.csv");
    std::fs::write(&path, res.to_csv())?;
    println!(
        "clean {:.4}  pearson(H, drop) {:.3}  pearson(|w|, drop) {:.3}  wrote {}",
        res.clean_accuracy,
        res.pearson_second,
        res.pearson_magnitude,
        path.display()
    );
    Ok(())
}

fn report_cmd(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let table = report::report(inputs, out)?;
    print!("{table}");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train {
            common,
            epochs,
            lr,
            batch,
        } => train(common, *epochs, *lr, *batch),
        Command::Rank { common } => rank(common),
        Command::Program { common } => program(common),
        Command::Sweep { common } => run_sweep_cmd(common),
        Command::Correlate {
            common,
            sample,
            noise_lsb,
        } => correlate(common, *sample, *noise_lsb),
        Command::Report { inputs, out } => report_cmd(inputs, out),
    }
}
