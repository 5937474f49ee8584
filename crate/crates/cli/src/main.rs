use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wishmix::error::ErrorClass;
use wishmix::fit::{criterion_sweep, fit, FitSettings, Method};
use wishmix::io::{self, covdesc, read_dataset, write_atomic, write_dataset, write_json_atomic, ResponseTable, TruthFile};
use wishmix::mcmc::{ess_for_columns, SamplerConfig};
use wishmix::sampling::RngState;
use wishmix::selection::{Criterion, LooMethod};
use wishmix::simdata::{builtin_design, generate, run_study, write_study_csv};

/// Wishart mixtures and mixtures-of-experts for samples of covariance matrices.
#[derive(Debug, Parser)]
#[command(name = "wishmix", version)]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a dataset from a built-in design.
    Simulate {
        #[arg(long)]
        design: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the generating parameters (default: next to --out).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit one model with a fixed number of components.
    Fit {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a range of K and compare them.
    SelectK {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        kmin: usize,
        #[arg(long, default_value_t = 8)]
        kmax: usize,
        /// Comma-separated subset of bic, icl, elpd (elpd only for Bayesian methods).
        #[arg(long, value_delimiter = ',')]
        criteria: Option<Vec<Criterion>>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Effective sample sizes and per-parameter traces of a chain CSV.
    Diagnose {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replicated simulation study over one design.
    Study {
        #[arg(long)]
        design: String,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, value_delimiter = ',', default_value = "bayes,em,bayes-moe,em-moe")]
        methods: Vec<Method>,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a replicate-response table into a dataset of covariance matrices.
    Covdesc {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Minimum complete replicates per item (default p + 1).
        #[arg(long)]
        min_replicates: Option<usize>,
        /// Where to write the exclusion report (default: next to --out).
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    #[arg(long, default_value_t = 5_000)]
    burnin: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value = "psis")]
    loo_method: LooMethod,
    #[arg(long)]
    seed: u64,
}

impl RunArgs {
    fn settings(&self) -> FitSettings {
        let mut s = FitSettings::default();
        s.sampler = SamplerConfig::new(self.iters, self.burnin, self.thin, self.seed);
        s.em.restarts = self.restarts;
        s.em.max_iter = self.max_iter;
        s.em.tol = self.tol;
        s.loo = self.loo_method;
        s
    }
}

enum Failure {
    Usage(String),
    Core(wishmix::Error),
}

impl From<wishmix::Error> for Failure {
    fn from(e: wishmix::Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult = Result<(), Failure>;

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_with<F>(path: &Path, f: F) -> wishmix::Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> wishmix::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

fn simulate(design: &str, n: Option<usize>, seed: u64, out: &Path, truth: Option<PathBuf>) -> CliResult {
    let mut d = builtin_design(design)?;
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::Usage("--n must be positive".into()));
        }
        d = d.with_n(n);
    }
    let (data, labels) = generate(&d, &mut RngState::new(seed))?;
    write_dataset(out, &data)?;
    let truth = truth.unwrap_or_else(|| sibling(out, ".truth.json"));
    write_json_atomic(&truth, &TruthFile::new(design, seed, &d.truth, &labels))?;
    Ok(())
}

fn fit_cmd(method: Method, data: &Path, k: usize, run: &RunArgs, out: &Path) -> CliResult {
    if k == 0 {
        return Err(Failure::Usage("--k must be positive".into()));
    }
    let settings = run.settings();
    settings.sampler.validate()?;
    let data = read_dataset(data)?;
    let fitted = fit(&data, method, k, &settings, &RngState::new(run.seed))?;
    fs::create_dir_all(out).map_err(wishmix::Error::from)?;
    write_json_atomic(&out.join("fit_report.json"), &fitted.report(&data)?)?;
    if let Some(chain) = &fitted.chain {
        write_with(&out.join("chain.csv"), |b| chain.write_csv(b))?;
        write_json_atomic(&out.join("chain_summary.json"), &chain.summary()?)?;
    }
    Ok(())
}

fn select_k_cmd(method: Method, data: &Path, kmin: usize, kmax: usize, criteria: Option<Vec<Criterion>>, run: &RunArgs, out: &Path) -> CliResult {
    if kmin == 0 || kmin > kmax {
        return Err(Failure::Usage(format!("need 1 <= --kmin <= --kmax, got {kmin} and {kmax}")));
    }
    let criteria = match criteria {
        Some(c) if c.contains(&Criterion::Elpd) && !method.is_bayes() => {
            return Err(Failure::Usage(format!("elpd is only available for Bayesian methods, not {method}")));
        }
        Some(c) => c,
        None if method.is_bayes() => vec![Criterion::Bic, Criterion::Icl, Criterion::Elpd],
        None => vec![Criterion::Bic, Criterion::Icl],
    };
    let settings = run.settings();
    settings.sampler.validate()?;
    let data = read_dataset(data)?;
    let (report, _) = criterion_sweep(&data, method, kmin..=kmax, &criteria, &settings, &RngState::new(run.seed))?;
    fs::create_dir_all(out).map_err(wishmix::Error::from)?;
    write_with(&out.join("criteria.csv"), |b| report.write_csv(b))?;
    write_json_atomic(&out.join("criteria.json"), &report)?;
    Ok(())
}

fn diagnose(chain: &Path, out: &Path) -> CliResult {
    let traces = io::read_traces(fs::File::open(chain).map_err(wishmix::Error::from)?)?;
    let report = ess_for_columns(&traces)?;
    fs::create_dir_all(out).map_err(wishmix::Error::from)?;
    write_json_atomic(&out.join("ess.json"), &report)?;
    for (name, values) in &traces {
        write_with(&out.join(format!("trace_{name}.csv")), |b| io::write_trace(name, values, b))?;
    }
    Ok(())
}

fn study(design: &str, reps: usize, methods: &[Method], n: Option<usize>, run: &RunArgs, out: &Path) -> CliResult {
    if reps == 0 {
        return Err(Failure::Usage("--reps must be positive".into()));
    }
    let mut d = builtin_design(design)?;
    if let Some(n) = n {
        d = d.with_n(n);
    }
    let settings = run.settings();
    settings.sampler.validate()?;
    let rows = run_study(&d, methods, reps, &settings, &RngState::new(run.seed))?;
    fs::create_dir_all(out).map_err(wishmix::Error::from)?;
    write_with(&out.join("study.csv"), |b| write_study_csv(&rows, b))?;
    Ok(())
}

fn covdesc_cmd(table: &Path, out: &Path, min_replicates: Option<usize>, report: Option<PathBuf>) -> CliResult {
    if min_replicates.is_some_and(|m| m < 2) {
        return Err(Failure::Usage("--min-replicates must be at least 2".into()));
    }
    let table = ResponseTable::read(table)?;
    let result = covdesc(&table, min_replicates)?;
    write_json_atomic(out, &result.dataset)?;
    write_json_atomic(&report.unwrap_or_else(|| sibling(out, ".exclusions.json")), &result.report)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { design, n, seed, out, truth } => simulate(&design, n, seed, &out, truth),
        Command::Fit { method, data, k, run, out } => fit_cmd(method, &data, k, &run, &out),
        Command::SelectK { method, data, kmin, kmax, criteria, run, out } => {
            select_k_cmd(method, &data, kmin, kmax, criteria, &run, &out)
        }
        Command::Diagnose { chain, out } => diagnose(&chain, &out),
        Command::Study { design, reps, methods, n, run, out } => study(&design, reps, &methods, n, &run, &out),
        Command::Covdesc { table, out, min_replicates, report } => covdesc_cmd(&table, &out, min_replicates, report),
    }
}

fn report_error(class: &str, code: &str, message: &str) {
    let body = serde_json::json!({ "error": code, "class": class, "message": message });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            report_error("usage", "usage_error", &msg);
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            let (class, code) = match e.class() {
                ErrorClass::Usage => ("usage", 1),
                ErrorClass::Data => ("data", 2),
                ErrorClass::Numerical => ("numerical", 3),
            };
            report_error(class, e.code(), &e.to_string());
            ExitCode::from(code)
        }
    }
}
