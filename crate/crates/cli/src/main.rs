use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nystrom_tron::allreduce::tcp::read_hosts;
use nystrom_tron::basis::{read_basis_file, select_random, write_basis_file, BasisPolicy};
use nystrom_tron::data::{open_dataset, shard_random, Dataset};
use nystrom_tron::driver::{evaluate, predict, preset, train_files, train_local, train_tcp, BasisChoice, TrainConfig};
use nystrom_tron::reference::{approx_error, cross_gram, gram, nystrom_reconstruct, pseudo_inverse, DEFAULT_CUTOFF_REL};
use nystrom_tron::{HyperParams, Loss, ModelState, TrainReport, TronConfig};

#[derive(Parser)]
#[command(name = "nystrom-tron", version, about = "Distributed Nyström kernel machine trainer")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model.
    Train(TrainArgs),
    /// Write one predicted label per line.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the accuracy of a model on a labelled file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Nyström approximation error for a list of basis sizes, as CSV.
    ApproxError {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sigma: f64,
        /// Comma-separated basis sizes.
        #[arg(short, value_delimiter = ',', required = true)]
        m: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train once per basis size and print timings and results as CSV.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// `m=200,400,800`
        #[arg(long)]
        sweep: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Random,
    Kmeans,
    Auto,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Local,
    Tcp,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    SquaredHinge,
    SquaredError,
}

#[derive(Args, Clone)]
struct CommonArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Named hyperparameters: vehicle, covtype, ccat, mnist8m.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum, default_value_t = BasisArg::Auto)]
    basis: BasisArg,
    /// Fixed basis points to use instead of selecting them.
    #[arg(long)]
    basis_file: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    kmeans_iters: usize,
    #[arg(short, default_value_t = 1)]
    p: usize,
    #[arg(long, default_value_t = 2)]
    fanout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LossArg::SquaredHinge)]
    loss: LossArg,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Seconds a worker waits for a peer.
    #[arg(long, default_value_t = 3600)]
    timeout: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(short)]
    m: Option<usize>,
    /// Comma-separated increasing basis sizes; overrides `-m`.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<usize>,
    #[arg(long, value_enum, default_value_t = TransportArg::Local)]
    transport: TransportArg,
    /// One `host:port` per line; line k is worker k.
    #[arg(long)]
    hosts: Option<PathBuf>,
    /// This process's worker id in a TCP job.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Per-iteration solver trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the basis points that were used.
    #[arg(long)]
    save_basis: Option<PathBuf>,
}

fn params(c: &CommonArgs) -> Result<HyperParams> {
    let base = match &c.preset {
        Some(name) => Some(preset(name).with_context(|| format!("unknown preset `{name}`"))?),
        None => None,
    };
    let lambda = c.lambda.or(base.map(|b| b.lambda)).context("--lambda or --preset is required")?;
    let sigma = c.sigma.or(base.map(|b| b.sigma)).context("--sigma or --preset is required")?;
    Ok(HyperParams::new(lambda, sigma)?)
}

fn config(c: &CommonArgs, stages: Vec<usize>) -> Result<TrainConfig> {
    let params = params(c)?;
    let basis = match &c.basis_file {
        Some(path) => {
            let (mut b, _) = read_basis_file(path)?;
            if b.sigma != params.sigma {
                log::warn!("basis file was written for sigma={}, using it with sigma={}", b.sigma, params.sigma);
                b.sigma = params.sigma;
            }
            BasisChoice::Given(b)
        }
        None => BasisChoice::Policy(match c.basis {
            BasisArg::Random => BasisPolicy::Random,
            BasisArg::Kmeans => BasisPolicy::KMeans,
            BasisArg::Auto => BasisPolicy::auto(),
        }),
    };
    let mut cfg = TrainConfig::new(params, 1, c.p);
    cfg.stages = stages;
    cfg.basis = basis;
    cfg.loss = match c.loss {
        LossArg::SquaredHinge => Loss::SquaredHinge,
        LossArg::SquaredError => Loss::SquaredError,
    };
    cfg.kmeans_iters = c.kmeans_iters;
    cfg.fanout = c.fanout;
    cfg.seed = c.seed;
    cfg.tron = TronConfig { eps_rel: c.eps, max_iter: c.max_iter, ..TronConfig::default() };
    cfg.timeout = Duration::from_secs(c.timeout);
    Ok(cfg)
}

fn write_outputs(args: &TrainArgs, model: &ModelState, report: &TrainReport) -> Result<()> {
    if let Some(path) = &args.model {
        model.save(path)?;
    }
    if let Some(path) = &args.report {
        fs::write(path, report.to_json())?;
    }
    if let Some(path) = &args.trace {
        fs::write(path, report.tron_trace.to_csv())?;
    }
    if let Some(path) = &args.save_basis {
        write_basis_file(path, &model.basis, args.common.seed)?;
    }
    println!("objective {:.10e}", report.final_objective);
    println!(
        "iterations {} (accepted {}, rejected {})",
        report.tron_trace.records.len(),
        report.tron_trace.accepted(),
        report.tron_trace.rejected()
    );
    for step in 1..=4u8 {
        println!("step {step} {:.3}s", report.step_time(step));
    }
    if report.kmeans_time > 0.0 {
        println!("kmeans {:.3}s", report.kmeans_time);
    }
    if let Some(acc) = report.test_accuracy {
        println!("test accuracy {acc:.4}");
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let stages = if !args.stages.is_empty() {
        args.stages.clone()
    } else {
        vec![args.m.context("-m or --stages is required")?]
    };
    let cfg = config(&args.common, stages)?;
    let test = args.common.test.as_deref();
    match args.transport {
        TransportArg::Local => {
            let (model, report) = train_files(&args.common.data, test, &cfg)?;
            write_outputs(&args, &model, &report)
        }
        TransportArg::Tcp => {
            let hosts = read_hosts(args.hosts.as_ref().context("--hosts is required with --transport tcp")?)?;
            let rank = args.rank.context("--rank is required with --transport tcp")?;
            if hosts.len() != cfg.p {
                bail!("hosts file lists {} workers but -p is {}", hosts.len(), cfg.p);
            }
            match train_tcp(rank, &hosts, &args.common.data, test, &cfg)? {
                Some((model, report)) => write_outputs(&args, &model, &report),
                None => Ok(()),
            }
        }
    }
}

fn load(path: &Path) -> Result<Dataset> {
    open_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn approx(data: &Path, sigma: f64, ms: &[usize], seed: u64) -> Result<()> {
    let data = load(data)?;
    let points: Vec<_> = data.examples.iter().map(|e| e.features.clone()).collect();
    let k = gram(&points, sigma);
    let shards = shard_random(&data.examples, 1, seed)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "m,frobenius_rel,spectral_rel")?;
    for &m in ms {
        let basis = select_random(&shards, m, seed, sigma)?;
        let w_plus = pseudo_inverse(&gram(&basis.points, sigma), DEFAULT_CUTOFF_REL)?;
        let e = approx_error(&k, &nystrom_reconstruct(&cross_gram(&points, &basis.points, sigma), &w_plus))?;
        writeln!(out, "{m},{:e},{:e}", e.frobenius_rel, e.spectral_rel)?;
    }
    Ok(())
}

fn bench(common: &CommonArgs, sweep: &str) -> Result<()> {
    let list = sweep.strip_prefix("m=").context("--sweep must look like m=200,400")?;
    let ms = list
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad basis size `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    let data = load(&common.data)?;
    let test = common.test.as_deref().map(load).transpose()?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "m,step1,step2,step3,step4,kmeans_time,final_objective,iterations,test_accuracy")?;
    for m in ms {
        let cfg = config(common, vec![m])?;
        let (_, r) = train_local(&data, test.as_ref().map(|t| t.examples.as_slice()), &cfg)?;
        writeln!(
            out,
            "{m},{:.6},{:.6},{:.6},{:.6},{:.6},{:.10e},{},{}",
            r.step_time(1),
            r.step_time(2),
            r.step_time(3),
            r.step_time(4),
            r.kmeans_time,
            r.final_objective,
            r.tron_trace.records.len(),
            r.test_accuracy.map_or(String::new(), |a| format!("{a:.6}"))
        )?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match cli.cmd {
        Command::Train(args) => train(args),
        Command::Predict { model, data, out } => {
            let model = ModelState::load(&model)?;
            let data = load(&data)?;
            let mut text = String::new();
            for label in predict(&model, &data.examples) {
                text.push_str(if label > 0.0 { "+1\n" } else { "-1\n" });
            }
            fs::write(out, text)?;
            Ok(())
        }
        Command::Evaluate { model, data } => {
            let model = ModelState::load(&model)?;
            println!("accuracy {:.6}", evaluate(&model, &load(&data)?.examples));
            Ok(())
        }
        Command::ApproxError { data, sigma, m, seed } => approx(&data, sigma, &m, seed),
        Command::Bench { common, sweep } => bench(&common, &sweep),
    }
}
