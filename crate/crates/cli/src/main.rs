//! `dpem calibrate` prints per-mechanism budgets for a mixture-model run;
//! `dpem fit` runs a cross-validated sweep and writes JSONL results plus a
//! plot-ready summary CSV.
//!
//! Exit codes: 0 success, 2 bad flags, 3 unattainable budget, 4 data error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dpem::accountant::{self, calibrate, CompositionPlan, Method, PrivacyBudget, Scenario};
use dpem::data::BoundedDataset;
use dpem::experiment::{run_sweep, KMeansVariant, ModelSpec, SweepConfig};
use dpem::io::{self, summarize, write_jsonl, write_summary_csv};
use dpem::mog::Estimator;
use dpem::par::Exec;

const EXIT_FLAGS: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser)]
#[command(name = "dpem", version, about = "Differentially private EM experiments and budget calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-mechanism ε_i and noise multipliers for each composition method.
    Calibrate(CalibrateArgs),
    /// Cross-validated sweep over ε, methods, folds and seeds.
    Fit(FitArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    #[arg(long, default_value_t = 1e-6)]
    delta_i: f64,
    /// EM iterations J.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Mixture components K.
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long, default_value = "ggg")]
    scenario: Scenario,
    /// Comma-separated list of linear, advanced, zcdp, ma, or `all`.
    #[arg(long, default_value = "all")]
    method: String,
    #[arg(long, default_value_t = accountant::DEFAULT_LAMBDA_MAX)]
    lambda_max: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Mog,
    Fa,
    Kmeans,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum, default_value = "mog")]
    model: Model,
    /// Numeric CSV; rows are scaled into the unit ball. Without it a
    /// planted mixture is generated from the --synth-* flags.
    #[arg(long)]
    data: Option<PathBuf>,
    /// The CSV has a header line.
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 2000)]
    synth_n: usize,
    #[arg(long, default_value_t = 2)]
    synth_d: usize,
    #[arg(long, default_value_t = 3)]
    synth_k: usize,
    /// Distance between neighboring planted means before scaling.
    #[arg(long, default_value_t = 3.0)]
    synth_sep: f64,
    /// Components (mog) or clusters (kmeans).
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Latent factors (fa).
    #[arg(long, default_value_t = 1)]
    q: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2,4")]
    eps_list: Vec<f64>,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    #[arg(long, default_value_t = 1e-6)]
    delta_i: f64,
    /// Comma-separated composition methods, or `all` (mog and fa).
    #[arg(long, default_value = "zcdp")]
    method: String,
    /// Comma-separated k-means variants: dpem, dplloyd-zcdp, dplloyd-linear.
    #[arg(long, default_value = "dpem,dplloyd-zcdp,dplloyd-linear")]
    variants: String,
    #[arg(long, default_value = "ggg")]
    scenario: Scenario,
    #[arg(long, default_value = "map")]
    estimator: Estimator,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Replicates per fold.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Master seed; the DPEM_SEED environment variable takes precedence.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores; 1 runs sequentially).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value_t = accountant::DEFAULT_LAMBDA_MAX)]
    lambda_max: u32,
    /// Output directory for results.jsonl, baseline.jsonl and summary.csv.
    #[arg(long, default_value = "dpem-out")]
    out: PathBuf,
}

/// An error paired with the process exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn flags(err: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_FLAGS,
            err: err.into(),
        }
    }

    fn data(err: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_DATA,
            err: err.into(),
        }
    }
}

impl From<dpem::Error> for Failure {
    fn from(e: dpem::Error) -> Self {
        use dpem::Error as E;
        let code = match e {
            E::Unattainable(_) => EXIT_BUDGET,
            E::OutOfRange { .. } | E::InvalidParams(_) => EXIT_FLAGS,
            _ => EXIT_DATA,
        };
        Self {
            code,
            err: e.into(),
        }
    }
}

fn parse_methods(s: &str) -> Result<Vec<Method>, Failure> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Method::ALL.to_vec());
    }
    s.split(',').map(|m| m.trim().parse::<Method>().map_err(Failure::flags)).collect()
}

fn parse_variants(s: &str) -> Result<Vec<KMeansVariant>, Failure> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(KMeansVariant::ALL.to_vec());
    }
    s.split(',')
        .map(|v| v.trim().parse::<KMeansVariant>().map_err(Failure::flags))
        .collect()
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<(), Failure> {
    let total = PrivacyBudget::new(a.eps, a.delta)?;
    let methods = parse_methods(&a.method)?;
    let mut rows = Vec::new();
    for m in methods {
        let plan = CompositionPlan::mog(a.scenario, a.iters, a.components, a.delta_i, m)
            .with_lambda_max(a.lambda_max);
        rows.push((m, calibrate(&plan, &total)?));
    }
    println!(
        "{} J={} K={}: {} releases, total (ε = {}, δ = {:e}), δ_i = {:e}",
        a.scenario,
        a.iters,
        a.components,
        CompositionPlan::mog(a.scenario, a.iters, a.components, a.delta_i, Method::Linear)
            .total_mechanisms(),
        a.eps,
        a.delta,
        a.delta_i
    );
    // noise per unit sensitivity: Laplace scale b/Δ = 1/ε_i, Gaussian σ/Δ
    let vector_label = match a.scenario {
        Scenario::Llg => "b/Δ (π, μ)",
        Scenario::Ggg => "σ/Δ (π, μ)",
    };
    println!(
        "{:<9} {:>14} {:>14} {:>14} {:>12} {:>12}",
        "method", "eps_i", vector_label, "σ/Δ (Σ)", "spent ε", "spent δ"
    );
    for (m, c) in rows {
        let vector = match a.scenario {
            Scenario::Llg => 1.0 / c.eps_i,
            Scenario::Ggg => c.sigma_per_sensitivity,
        };
        println!(
            "{:<9} {:>14.8} {:>14.6} {:>14.6} {:>12.6} {:>12.3e}",
            m.name(),
            c.eps_i,
            vector,
            c.sigma_per_sensitivity,
            c.spend.epsilon,
            c.spend.delta
        );
    }
    Ok(())
}

fn load_data(a: &FitArgs, seed: u64) -> Result<BoundedDataset, Failure> {
    match &a.data {
        Some(path) => {
            let raw = io::load_csv(path, a.header)
                .map_err(|e| Failure::data(anyhow::Error::new(e).context(format!("reading {}", path.display()))))?;
            dpem::data::preprocess(&raw).map_err(Failure::data)
        }
        None => Ok(io::synth_mog(a.synth_n, a.synth_d, a.synth_k, a.synth_sep, seed)?.data),
    }
}

fn master_seed(flag: u64) -> Result<u64, Failure> {
    match std::env::var("DPEM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::flags(anyhow::anyhow!("DPEM_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn cmd_fit(a: &FitArgs) -> Result<(), Failure> {
    let seed = master_seed(a.seed)?;
    let model = match a.model {
        Model::Mog => ModelSpec::Mog {
            k: a.k,
            iters: a.iters,
            scenario: a.scenario,
            estimator: a.estimator,
        },
        Model::Fa => ModelSpec::Fa {
            q: a.q,
            iters: a.iters,
        },
        Model::Kmeans => ModelSpec::KMeans {
            k: a.k,
            iters: a.iters,
            variants: parse_variants(&a.variants)?,
        },
    };
    let cfg = SweepConfig {
        model,
        eps_list: a.eps_list.clone(),
        delta: a.delta,
        delta_i: a.delta_i,
        methods: parse_methods(&a.method)?,
        folds: a.folds,
        seeds: a.seeds,
        master_seed: seed,
        lambda_max: a.lambda_max,
    };
    if a.jobs == Some(0) {
        return Err(Failure::flags(anyhow::anyhow!("--jobs must be at least 1")));
    }
    let data = load_data(a, seed)?;
    let out = run_with_jobs(a.jobs, |exec| run_sweep(&data, &cfg, exec))?;

    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(Failure::data)?;
    let write = |name: &str, f: &dyn Fn(BufWriter<File>) -> dpem::Result<()>| -> Result<(), Failure> {
        let path = a.out.join(name);
        let file = File::create(&path)
            .with_context(|| format!("creating {}", path.display()))
            .map_err(Failure::data)?;
        f(BufWriter::new(file)).map_err(Failure::data)
    };
    write("results.jsonl", &|w| write_jsonl(w, &out.results))?;
    write("baseline.jsonl", &|w| write_jsonl(w, &out.baseline))?;
    let rows = summarize(&out.results, &out.baseline);
    write("summary.csv", &|w| write_summary_csv(w, &rows))?;

    let stdout = std::io::stdout();
    let mut s = stdout.lock();
    for r in &rows {
        let eps = r.epsilon.map_or_else(|| "-".to_string(), |e| e.to_string());
        let _ = writeln!(
            s,
            "{:<15} ε={:<6} {} median {:.6} (IQR {:.6}, n={})",
            r.method, eps, r.metric, r.median, r.iqr, r.count
        );
    }
    let _ = writeln!(
        s,
        "{} records written to {}",
        out.results.len() + out.baseline.len(),
        a.out.display()
    );
    Ok(())
}

#[cfg(feature = "parallel")]
fn run_with_jobs<T: Send>(
    jobs: Option<usize>,
    f: impl FnOnce(Exec) -> dpem::Result<T> + Send,
) -> Result<T, Failure> {
    match jobs {
        Some(1) => Ok(f(Exec::Sequential)?),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(Failure::flags)?;
            Ok(pool.install(|| f(Exec::Parallel))?)
        }
        None => Ok(f(Exec::Parallel)?),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_with_jobs<T: Send>(
    _jobs: Option<usize>,
    f: impl FnOnce(Exec) -> dpem::Result<T> + Send,
) -> Result<T, Failure> {
    Ok(f(Exec::Sequential)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Fit(a) => cmd_fit(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
