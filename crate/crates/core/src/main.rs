use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use boostlmm::cv::cv_select;
use boostlmm::engine::{boost_fit, BoostConfig, RanefScheme, Sigma2Rule, StartMode};
use boostlmm::io::{self, ModelSpec};
use boostlmm::oracle::ml_fit;
use boostlmm::sim::{run_study, write_cells_csv, Method, SimDesign, StudyConfig};
use boostlmm::{Error, Result};

#[derive(Parser)]
#[command(name = "boostlmm", version, about = "Component-wise boosting for linear mixed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boost for m_stop iterations (or to the CV optimum when --k is given) and export.
    Fit(FitArgs),
    /// Choose m* by cluster-wise k-fold CV (k defaults to 10) and export the refit.
    Cv(FitArgs),
    /// Run the simulation grid and write the per-cell summary table.
    Simulate(SimArgs),
    /// Maximum-likelihood fit of the full model.
    Oracle(FitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Start {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Disentangled,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sigma2 {
    Conditional,
    Em,
}

#[derive(Args)]
struct FitArgs {
    /// Flat key = value file; command-line options take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    response: Option<String>,
    #[arg(long)]
    cluster: Option<String>,
    /// Comma-separated fixed-effect columns; non-numeric columns become dummies.
    #[arg(long, value_delimiter = ',')]
    fixed: Vec<String>,
    /// Columns whose square is added as a fixed effect.
    #[arg(long, value_delimiter = ',')]
    square: Vec<String>,
    /// Random intercept (always included).
    #[arg(long)]
    random_intercept: bool,
    #[arg(long, value_delimiter = ',')]
    random_slope: Vec<String>,
    /// Reference level of a categorical column, as COLUMN=LEVEL.
    #[arg(long)]
    reference: Vec<String>,
    /// Override detection of cluster-constant columns (design names).
    #[arg(long, value_delimiter = ',')]
    cluster_constant: Option<Vec<String>>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    nu_ran: Option<f64>,
    #[arg(long)]
    mstop: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    start: Option<Start>,
    #[arg(long, value_enum)]
    scheme: Option<Scheme>,
    #[arg(long, value_enum)]
    sigma2_rule: Option<Sigma2>,
    #[arg(long)]
    no_correction: bool,
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_delimiter = ',', default_value = "10")]
    p: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.4")]
    tau: Vec<f64>,
    /// Random slopes design instead of random intercepts.
    #[arg(long)]
    slopes: bool,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    mstop: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    nu: f64,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Resolved {
    file: BTreeMap<String, String>,
}

impl Resolved {
    fn value<T: FromStr>(&self, cli: Option<T>, key: &str) -> Result<Option<T>> {
        if cli.is_some() {
            return Ok(cli);
        }
        match self.file.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Input(format!("config key `{key}`: cannot parse `{v}`"))),
            None => Ok(None),
        }
    }

    fn list(&self, cli: &[String], key: &str) -> Vec<String> {
        if !cli.is_empty() {
            return cli.to_vec();
        }
        self.file
            .get(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    fn flag(&self, cli: bool, key: &str) -> Result<bool> {
        Ok(cli || self.value::<bool>(None, key)?.unwrap_or(false))
    }

    fn required<T: FromStr>(&self, cli: Option<T>, key: &str) -> Result<T> {
        self.value(cli, key)?
            .ok_or_else(|| Error::Input(format!("missing required option --{key}")))
    }
}

struct Job {
    data_path: PathBuf,
    spec: ModelSpec,
    config: BoostConfig,
    k: Option<usize>,
    out: PathBuf,
}

fn resolve(args: FitArgs) -> Result<Job> {
    let r = Resolved {
        file: match &args.config {
            Some(p) => io::read_config(p)?,
            None => BTreeMap::new(),
        },
    };
    let mut reference = HashMap::new();
    for item in r.list(&args.reference, "reference") {
        let (col, level) = item
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("--reference expects COLUMN=LEVEL, got `{item}`")))?;
        reference.insert(col.to_string(), level.to_string());
    }
    let cc = r.list(&args.cluster_constant.clone().unwrap_or_default(), "cluster-constant");
    let spec = ModelSpec {
        response: r.required(args.response, "response")?,
        cluster: r.required(args.cluster, "cluster")?,
        fixed: r.list(&args.fixed, "fixed"),
        square: r.list(&args.square, "square"),
        random_slopes: r.list(&args.random_slope, "random-slope"),
        reference,
        cluster_constant: if args.cluster_constant.is_some() || r.file.contains_key("cluster-constant") {
            Some(cc)
        } else {
            None
        },
        standardize: r.flag(args.standardize, "standardize")?,
    };
    let start = match r.value(args.start.map(|s| if matches!(s, Start::A) { "a" } else { "b" }.to_string()), "start")? {
        None => StartMode::ZeroRanef,
        Some(s) if s == "a" => StartMode::ZeroRanef,
        Some(s) if s == "b" => StartMode::MlIntercept,
        Some(s) => return Err(Error::Input(format!("start must be a or b, got `{s}`"))),
    };
    let scheme = match r.value(args.scheme.map(|s| matches!(s, Scheme::Joint)), "joint")? {
        Some(true) => RanefScheme::Joint,
        _ => RanefScheme::Disentangled,
    };
    let sigma2_rule = match r.value(args.sigma2_rule.map(|s| matches!(s, Sigma2::Em)), "sigma2-em")? {
        Some(true) => Sigma2Rule::Em,
        _ => Sigma2Rule::Conditional,
    };
    let defaults = BoostConfig::default();
    let config = BoostConfig {
        nu: r.value(args.nu, "nu")?.unwrap_or(defaults.nu),
        nu_ran: r.value(args.nu_ran, "nu-ran")?,
        m_stop: r.value(args.mstop, "mstop")?.unwrap_or(defaults.m_stop),
        start_mode: start,
        correction_enabled: !r.flag(args.no_correction, "no-correction")?,
        ranef_scheme: scheme,
        sigma2_rule,
        check_sigma2: false,
        seed: r.value(args.seed, "seed")?.unwrap_or(defaults.seed),
    };
    Ok(Job {
        data_path: r.required(args.data, "data")?,
        spec,
        config,
        k: r.value(args.k, "k")?,
        out: r.value(args.out, "out")?.unwrap_or_else(|| PathBuf::from("boostlmm_out")),
    })
}

fn run_fit(args: FitArgs, default_k: Option<usize>) -> Result<()> {
    let job = resolve(args)?;
    let ingested = io::ingest_csv(&job.data_path, &job.spec)?;
    let data = &ingested.data;
    info!(
        "{} observations in {} clusters, {} fixed effects",
        data.n_obs(),
        data.n_clusters(),
        data.p()
    );
    match job.k.or(default_k) {
        Some(k) => {
            let res = cv_select(data, &job.config, k, job.config.seed)?;
            info!("cross-validation chose m* = {}", res.curve.m_star);
            io::export_results(
                &res.trace,
                Some(&res.curve),
                res.curve.m_star,
                data,
                ingested.scaling.as_ref(),
                &job.out,
            )
        }
        None => {
            let trace = boost_fit(data, &job.config)?;
            io::export_results(&trace, None, trace.iterations(), data, ingested.scaling.as_ref(), &job.out)
        }
    }
}

fn run_oracle(args: FitArgs) -> Result<()> {
    let job = resolve(args)?;
    let ingested = io::ingest_csv(&job.data_path, &job.spec)?;
    let fit = ml_fit(&ingested.data)?;
    let (beta0, beta) = match &ingested.scaling {
        Some(sc) => sc.back_transform(fit.state.beta0, &fit.state.beta),
        None => (fit.state.beta0, fit.state.beta.clone()),
    };
    let coefficients: Vec<serde_json::Value> = ingested
        .data
        .x_names()
        .iter()
        .zip(beta.iter())
        .map(|(n, &b)| serde_json::json!({ "name": n, "estimate": io::round12(b) }))
        .collect();
    let q: Vec<Vec<f64>> = fit
        .state
        .q
        .row_iter()
        .map(|r| r.iter().map(|&v| io::round12(v)).collect())
        .collect();
    let out = serde_json::json!({
        "intercept": io::round12(beta0),
        "coefficients": coefficients,
        "Q": q,
        "random_effects": ingested.data.z_names(),
        "sigma2": io::round12(fit.state.sigma2),
        "loglik": io::round12(fit.loglik),
    });
    fs::create_dir_all(&job.out)?;
    fs::write(job.out.join("estimates.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    io::write_ranef(&fit.state, &ingested.data, &job.out.join("ranef.csv"))
}

fn run_simulate(args: SimArgs) -> Result<()> {
    let mut designs = Vec::new();
    for &p in &args.p {
        for &tau in &args.tau {
            designs.push(SimDesign {
                replicates: args.replicates,
                seed: args.seed,
                ..SimDesign::new(p, tau, args.slopes)
            });
        }
    }
    let methods = if args.methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        args.methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?
    };
    let study = StudyConfig {
        methods,
        m_stop: args.mstop,
        k: args.k,
        nu: args.nu,
    };
    let result = run_study(&designs, &study)?;
    match args.out {
        Some(path) => write_cells_csv(&result.cells, fs::File::create(path)?),
        None => write_cells_csv(&result.cells, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(a) => run_fit(a, None),
        Command::Cv(a) => run_fit(a, Some(10)),
        Command::Simulate(a) => run_simulate(a),
        Command::Oracle(a) => run_oracle(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
