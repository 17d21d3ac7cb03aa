use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fishr_core::datasets::{
    load_u8_cache, make_colored_mnist, make_linear_toy, make_two_bit_cmnist, read_csv, save_u8_cache,
    write_csv, ColoredMnistSpec, DomainSplit, LinearToySpec, Mnist,
};
use fishr_core::hessian::{fim_hessian_similarity, invariance_report, HessianMethod, InvarianceReport};
use fishr_core::inconsistency::{check_many, CheckOptions};
use fishr_core::nn::{DomainBatch, Subset};
use fishr_core::trainer::calibrate::{calibrate_linear, LinearGrid};
use fishr_core::trainer::suite::{run_suite, SuiteName, SuiteOptions};
use fishr_core::trainer::{load_params, run_experiment, write_outputs, TrainConfig};
use fishr_core::{FishrError, Result};

#[derive(Parser)]
#[command(name = "fishr", version, about = "Gradient-variance matching experiments")]
struct Cli {
    /// print progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Linear,
    Twobit,
    Cmnist,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Exact,
    Finitediff,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset to disk (CSV for the synthetic sets, a byte cache for Colored MNIST)
    GenData {
        #[arg(long, value_enum)]
        dataset: Dataset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// directory with the MNIST IDX training files
        #[arg(long, default_value = "data/mnist")]
        mnist_dir: PathBuf,
        /// samples per domain (twobit)
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
    /// Train one configuration or a whole suite
    Train {
        /// JSON file mirroring the training configuration
        #[arg(long, conflicts_with = "suite", required_unless_present = "suite")]
        config: Option<PathBuf>,
        /// linear, cmnist, cmnist_grayscale, cmnist_noflip or dynamics
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// overrides the config's seed; for suites, runs only this seed
        #[arg(long)]
        seed: Option<u64>,
        /// number of seeds for suites (0..k)
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// comma-separated method names to keep
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, default_value = "data/mnist")]
        mnist_dir: PathBuf,
    },
    /// Invariance report (gradient variance, risk and Hessian gaps) for a saved model
    Analyze {
        /// `params.bin` written by `train`
        #[arg(long)]
        model: PathBuf,
        /// a cache directory from `gen-data --dataset cmnist` or a CSV file
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "classifier")]
        subset: Subset,
        #[arg(long, value_enum, default_value = "exact")]
        method: Method,
        /// domains to compare (default: the training domains)
        #[arg(long, value_delimiter = ',')]
        domains: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// instead of the gap report, compare the FIM and FD Hessian diagonals
        /// (classifier exactly, all weights on this many sampled coordinates)
        #[arg(long)]
        proxy_coords: Option<usize>,
    },
    /// Sweep the linear-toy constants and rank them against the target accuracies
    Calibrate {
        /// JSON grid overriding the default one
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the max-pair inconsistency decomposition on random quadratic landscapes
    Inconsistency {
        #[arg(long, default_value_t = 3)]
        dims: usize,
        #[arg(long, default_value_t = 3)]
        num_domains: usize,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// ε as a multiple of the tightest admissible bound
        #[arg(long, default_value_t = 0.9)]
        eps_margin: f64,
        /// include the pairs (A, A)
        #[arg(long)]
        include_diagonal: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &FishrError) -> ExitCode {
    match e {
        FishrError::Numeric(_) | FishrError::Decomposition(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { dataset, seed, out, mnist_dir, n } => gen_data(dataset, seed, &out, &mnist_dir, n),
        Command::Train { config, suite, out, seed, seeds, jobs, methods, mnist_dir } => match (config, suite) {
            (Some(path), _) => train_config(&path, &out, seed),
            (None, Some(name)) => {
                let suite: SuiteName = name.parse()?;
                let mut opts = SuiteOptions::new(&out);
                opts.mnist_dir = mnist_dir;
                opts.seeds = match seed {
                    Some(s) => vec![s],
                    None => (0..seeds).collect(),
                };
                opts.jobs = jobs;
                opts.methods = methods;
                opts.verbose = cli.verbose;
                let summary = run_suite(suite, &opts)?;
                println!("{}", serde_json::to_string_pretty(&summary.rows)?);
                let aborted = summary.rows.iter().any(|r| r.aborted > 0);
                Ok(if aborted { ExitCode::from(1) } else { ExitCode::SUCCESS })
            }
            (None, None) => Err(FishrError::Config("pass --config or --suite".into())),
        },
        Command::Analyze { model, data, out, proxy_coords: Some(n), domains, .. } => {
            let params = load_params(&model)?;
            let sims = load_batches(&data, domains.as_deref())?
                .iter()
                .enumerate()
                .map(|(k, b)| fim_hessian_similarity(&params, b, n, k as u64))
                .collect::<Result<Vec<_>>>()?;
            let json = serde_json::to_string_pretty(&sims)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("proxy.json"), json)?;
                }
                None => println!("{json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { model, data, subset, method, domains, out, proxy_coords: None } => {
            let report = analyze(&model, &data, subset, method, domains.as_deref())?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("report.json"), &json)?;
                    let mut csv = format!("{}\n", InvarianceReport::csv_header());
                    for row in report.csv_rows() {
                        csv.push_str(&row);
                        csv.push('\n');
                    }
                    fs::write(dir.join("report.csv"), csv)?;
                }
                None => println!("{json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { grid, out } => {
            let grid: LinearGrid = match grid {
                Some(path) => serde_json::from_str(&fs::read_to_string(&path)?)
                    .map_err(|e| FishrError::Config(format!("{}: {e}", path.display())))?,
                None => LinearGrid::default(),
            };
            let rows = calibrate_linear(&grid)?;
            let passing = rows.iter().filter(|r| r.passes).count();
            eprintln!("{passing} of {} grid points meet the targets", rows.len());
            let json = serde_json::to_string_pretty(&rows)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("calibration.json"), json)?;
                }
                None => println!("{json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Inconsistency { dims, num_domains, seeds, eps_margin, include_diagonal, seed, out } => {
            let opts = CheckOptions { eps_margin, include_diagonal };
            let summary = check_many(dims, num_domains, seed, seeds, &opts)?;
            if summary.inadmissible > 0 {
                eprintln!(
                    "warning: ε exceeds the admissible bound on {} of {} landscapes; failures there are counterexamples, not errors",
                    summary.inadmissible, summary.landscapes
                );
            }
            if cli.verbose || out.is_none() {
                println!(
                    "{}/{} landscapes satisfy the max-pair equality",
                    summary.equal, summary.landscapes
                );
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("inconsistency.json"), serde_json::to_string_pretty(&summary)?)?;
                fs::write(dir.join("inconsistency.csv"), summary.csv())?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gen_data(dataset: Dataset, seed: u64, out: &Path, mnist_dir: &Path, n: usize) -> Result<ExitCode> {
    fs::create_dir_all(out)?;
    match dataset {
        Dataset::Linear => {
            let spec = LinearToySpec { seed, ..Default::default() };
            let split = make_linear_toy(&spec)?;
            let path = out.join(format!("linear_seed{seed}.csv"));
            write_csv(&split.all().collect::<Vec<_>>(), &path)?;
            println!("{}", path.display());
        }
        Dataset::Twobit => {
            let spec = ColoredMnistSpec { seed, ..Default::default() };
            let split = make_two_bit_cmnist(n, &spec)?;
            let path = out.join(format!("twobit_seed{seed}.csv"));
            write_csv(&split.all().collect::<Vec<_>>(), &path)?;
            println!("{}", path.display());
        }
        Dataset::Cmnist => {
            let mnist = Mnist::load_train(mnist_dir)?;
            let spec = ColoredMnistSpec { seed, ..Default::default() };
            let split: DomainSplit = make_colored_mnist(&mnist, &spec)?.into();
            let dir = out.join(format!("cmnist_seed{seed}"));
            let manifest = save_u8_cache(&split, serde_json::to_value(&spec)?, &dir)?;
            fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&manifest)?)?;
            println!("{}", dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train_config(path: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let text = fs::read_to_string(path).map_err(|e| FishrError::MissingData {
        path: path.to_path_buf(),
        hint: format!("cannot read config: {e}"),
    })?;
    let mut cfg = TrainConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let run = run_experiment(&cfg)?;
    write_outputs(&run, out)?;
    println!("{}", serde_json::to_string_pretty(&run.summary)?);
    match &run.summary.aborted {
        Some(msg) => {
            eprintln!("error: {msg}");
            Ok(ExitCode::from(1))
        }
        None => Ok(ExitCode::SUCCESS),
    }
}

fn load_batches(data: &Path, domains: Option<&[String]>) -> Result<Vec<DomainBatch>> {
    let all: Vec<DomainBatch> = if data.is_dir() {
        let split = load_u8_cache(data)?;
        match domains {
            Some(_) => split.all().cloned().collect(),
            None => split.train,
        }
    } else if data.exists() {
        let batches = read_csv(data)?;
        match domains {
            Some(_) => batches,
            None => batches.into_iter().filter(|b| b.domain_id != "test").collect(),
        }
    } else {
        return Err(FishrError::MissingData {
            path: data.to_path_buf(),
            hint: "generate it with `fishr gen-data`".into(),
        });
    };
    let batches: Vec<DomainBatch> = match domains {
        Some(keep) => all.into_iter().filter(|b| keep.contains(&b.domain_id)).collect(),
        None => all,
    };
    if batches.is_empty() {
        return Err(FishrError::Config("no domain matches --domains".into()));
    }
    Ok(batches)
}

fn analyze(
    model: &Path,
    data: &Path,
    subset: Subset,
    method: Method,
    domains: Option<&[String]>,
) -> Result<InvarianceReport> {
    let params = load_params(model)?;
    let batches = load_batches(data, domains)?;
    let method = match method {
        Method::Exact => HessianMethod::Exact,
        Method::Finitediff => HessianMethod::FiniteDiff,
    };
    invariance_report(&params, &batches, subset, method)
}
