//! Command line front end: simulation, fitting, diagnostics, prediction and
//! the JSON service.

pub mod server;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use artmix::diagnostics::DiagnosticReport;
use artmix::fit::fit;
use artmix::kernel::{history_similarity, regimen_kernel, KernelConfig, MatchMode};
use artmix::mcmc::{BaselineMode, McmcConfig};
use artmix::model::LongitudinalDataset;
use artmix::predict::{predict_scenario, FittedModel, Scenario};
use artmix::regimen::{DrugDictionary, Regimen, RegimenHistory};
use artmix::simulate::{generate_dataset, GroundTruth, PartitionTruth, SimConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(
    name = "artmix",
    version,
    about = "Drug-combination mixture models for longitudinal outcomes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model to a visits CSV and write a model directory.
    Fit(FitArgs),
    /// Generate a synthetic dataset with its ground truth.
    Simulate(SimulateArgs),
    /// Predict outcomes for one scenario.
    Predict(PredictArgs),
    /// Subset-tree similarity of two regimens or histories.
    Kernel(KernelArgs),
    /// Posterior summaries of a fitted model.
    Diagnose(DiagnoseArgs),
    /// Serve the JSON API (and optionally a static UI bundle).
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    DdcrpSt,
    DpLinear,
    NormalLinear,
}

impl From<Baseline> for BaselineMode {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::DdcrpSt => BaselineMode::DdcrpSt,
            Baseline::DpLinear => BaselineMode::DpLinear,
            Baseline::NormalLinear => BaselineMode::NormalLinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Matching {
    Strict,
    ClassRelaxed,
}

impl From<Matching> for MatchMode {
    fn from(m: Matching) -> Self {
        match m {
            Matching::Strict => MatchMode::Strict,
            Matching::ClassRelaxed => MatchMode::ClassRelaxed,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Visits CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Drug dictionary CSV (`code,class,name`); the built-in one otherwise.
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    /// JSON file with sampler settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long = "burn-in")]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long = "rep-threshold")]
    pub rep_threshold: Option<usize>,
    #[arg(long = "match-mode", value_enum)]
    pub match_mode: Option<Matching>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory for `dataset.csv` and `truth.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with simulation settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Condition the prior partition on exactly this many clusters.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "rep-threshold")]
    pub rep_threshold: Option<usize>,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Scenario JSON file, or `-` for stdin.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = server::DEFAULT_LEVEL)]
    pub level: f64,
    #[arg(long, default_value_t = server::DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    /// Regimen as `CODE+CODE`, or with `--history` episodes separated by `;`.
    pub a: String,
    pub b: String,
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long = "match-mode", value_enum, default_value_t = Matching::Strict)]
    pub match_mode: Matching,
    /// Treat the arguments as regimen histories.
    #[arg(long)]
    pub history: bool,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth JSON written by `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Directory with the built UI bundle.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

fn dictionary(path: Option<&Path>) -> Result<DrugDictionary> {
    match path {
        Some(p) => DrugDictionary::from_csv_path(p)
            .with_context(|| format!("reading dictionary {}", p.display())),
        None => Ok(DrugDictionary::wihs()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = if path == Path::new("-") {
        std::io::read_to_string(std::io::stdin())?
    } else {
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
    };
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Sampler settings from the optional config file with flag overrides.
pub fn mcmc_config(args: &FitArgs) -> Result<McmcConfig> {
    let mut cfg: McmcConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => McmcConfig::default(),
    };
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = args.iters {
        cfg.n_iter = v;
    }
    if let Some(v) = args.burn_in {
        cfg.burn_in = v;
    }
    if let Some(v) = args.thin {
        cfg.thin = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.baseline {
        cfg.baseline_mode = v.into();
    }
    if let Some(v) = args.rep_threshold {
        cfg.rep_threshold = v;
    }
    if let Some(v) = args.match_mode {
        cfg.match_mode = v.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_fit(args: &FitArgs) -> Result<()> {
    let cfg = mcmc_config(args)?;
    let dict = dictionary(args.dictionary.as_deref())?;
    let ds = LongitudinalDataset::from_csv_path(&args.data, &dict)
        .with_context(|| format!("reading {}", args.data.display()))?;
    let f = fit(&ds, &dict, &cfg)?;
    let model = FittedModel::from_fit(&f, &ds, &dict)?;
    model.save_dir(&args.out)?;
    let acc = &f.chain.acceptance;
    eprintln!(
        "stored {} draws for {} individuals (D* = {}); acceptance: permutation {:.3}, correlation {:.3}",
        f.chain.draws.len(),
        ds.n(),
        f.chain.d_star,
        acc.permutation.rate(),
        acc.sigma_omega.rate()
    );
    Ok(())
}

pub fn sim_config(args: &SimulateArgs) -> Result<SimConfig> {
    let mut cfg: SimConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if let Some(k) = args.clusters {
        cfg.partition = PartitionTruth::PriorConditioned {
            clusters: k,
            min_size: (cfg.n / (2 * k.max(1))).max(1),
            max_tries: 1_000_000,
        };
    }
    if let Some(v) = args.eta {
        cfg.eta_true = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.rep_threshold {
        cfg.rep_threshold = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = sim_config(args)?;
    let dict = dictionary(args.dictionary.as_deref())?;
    let sim = generate_dataset(&cfg, &dict)?;
    std::fs::create_dir_all(&args.out)?;
    sim.dataset.write_csv_path(args.out.join("dataset.csv"))?;
    sim.truth.to_json_path(args.out.join("truth.json"))?;
    eprintln!(
        "simulated {} individuals, {} visits, {} clusters",
        sim.dataset.n(),
        sim.dataset.n_visits(),
        sim.truth.r_true
    );
    Ok(())
}

/// Prediction JSON for one scenario file.
pub fn predict_json(args: &PredictArgs) -> Result<String> {
    let model = FittedModel::load_dir(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let sc: Scenario = read_json(&args.scenario)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let p = predict_scenario(&model, &sc, args.level, &mut rng)?;
    Ok(serde_json::to_string_pretty(&p)?)
}

fn parse_history(text: &str, dict: &DrugDictionary) -> Result<RegimenHistory> {
    let episodes = text
        .split(';')
        .map(str::trim)
        .filter(|e| !e.is_empty())
        .map(|e| Regimen::parse(e, dict))
        .collect::<artmix::Result<Vec<_>>>()?;
    if episodes.is_empty() {
        bail!("history `{text}` has no episodes");
    }
    Ok(RegimenHistory::new("cli", episodes))
}

pub fn kernel_value(args: &KernelArgs) -> Result<f64> {
    let dict = dictionary(args.dictionary.as_deref())?;
    let cfg = KernelConfig::new(args.eta, args.match_mode.into())?;
    let v = if args.history {
        history_similarity(
            &parse_history(&args.a, &dict)?,
            &parse_history(&args.b, &dict)?,
            &dict,
            &cfg,
        )?
    } else {
        regimen_kernel(
            &Regimen::parse(&args.a, &dict)?,
            &Regimen::parse(&args.b, &dict)?,
            &dict,
            &cfg,
        )?
    };
    Ok(v)
}

pub fn run_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let model = FittedModel::load_dir(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let truth = args
        .truth
        .as_deref()
        .map(GroundTruth::from_json_path)
        .transpose()?;
    let report = DiagnosticReport::build(&model.chain, args.level, truth.as_ref())?;
    report.write_dir(&model.chain, &model.schema.individual_ids, &args.out)?;
    eprintln!(
        "{} draws; cluster count mode {} (mean {:.2}); least-squares partition has {} clusters",
        report.n_draws,
        report.cluster_count.mode(),
        report.cluster_count.mean(),
        report.map_clusters
    );
    if let Some(ari) = report.map_ari {
        eprintln!("adjusted Rand index against truth: {ari:.3}");
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => run_fit(&a),
        Command::Simulate(a) => run_simulate(&a),
        Command::Predict(a) => {
            println!("{}", predict_json(&a)?);
            Ok(())
        }
        Command::Kernel(a) => {
            println!("{}", kernel_value(&a)?);
            Ok(())
        }
        Command::Diagnose(a) => run_diagnose(&a),
        Command::Serve(a) => {
            let model = FittedModel::load_dir(&a.model)
                .with_context(|| format!("loading {}", a.model.display()))?;
            tokio::runtime::Runtime::new()?.block_on(server::serve(model, a.addr, a.static_dir))
        }
    }
}
