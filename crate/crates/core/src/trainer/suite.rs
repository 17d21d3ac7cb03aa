use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{DatasetConfig, ModelConfig, OptimConfig, TrainConfig};
use super::run::{colored_split, run_on_observed, write_outputs, RunSummary};
use crate::datasets::{make_linear_toy, ColoredMnistSpec, LinearToySpec, Mnist};
use crate::error::{FishrError, Result};
use crate::nn::Subset;
use crate::penalties::{PenaltyKind, PenaltySpec};

/// Hyperparameters selected by random search in the IRM reference code.
pub mod irm {
    pub const HIDDEN: usize = 390;
    pub const L2: f64 = 0.00110794568;
    pub const LR: f64 = 0.0004898536566546834;
    pub const WARMUP: u64 = 190;
    pub const LAMBDA: f64 = 91257.18613115903;
    pub const STEPS: u64 = 501;
}

/// Linear-toy recipe: logistic regression, Adam, full batch.
pub mod linear {
    pub const LR: f64 = 0.01;
    pub const STEPS: u64 = 5000;
    pub const WARMUP: u64 = 200;
    pub const LAMBDA: f64 = 1000.0;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    Linear,
    Cmnist,
    CmnistGrayscale,
    CmnistNoflip,
    Dynamics,
}

impl SuiteName {
    pub fn name(self) -> &'static str {
        match self {
            SuiteName::Linear => "linear",
            SuiteName::Cmnist => "cmnist",
            SuiteName::CmnistGrayscale => "cmnist_grayscale",
            SuiteName::CmnistNoflip => "cmnist_noflip",
            SuiteName::Dynamics => "dynamics",
        }
    }

    pub fn needs_mnist(self) -> bool {
        self != SuiteName::Linear
    }
}

impl std::str::FromStr for SuiteName {
    type Err = FishrError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => SuiteName::Linear,
            "cmnist" => SuiteName::Cmnist,
            "cmnist_grayscale" => SuiteName::CmnistGrayscale,
            "cmnist_noflip" => SuiteName::CmnistNoflip,
            "dynamics" => SuiteName::Dynamics,
            other => {
                return Err(FishrError::Config(format!(
                    "unknown suite `{other}` (expected linear, cmnist, cmnist_grayscale, cmnist_noflip or dynamics)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec {
    pub name: &'static str,
    pub penalty: PenaltySpec,
}

fn method(name: &'static str, penalty: PenaltySpec) -> MethodSpec {
    MethodSpec { name, penalty }
}

/// Methods compared in a suite, in report order.
pub fn suite_methods(suite: SuiteName) -> Vec<MethodSpec> {
    let (lambda, warmup) = match suite {
        SuiteName::Linear => (linear::LAMBDA, linear::WARMUP),
        _ => (irm::LAMBDA, irm::WARMUP),
    };
    let p = |kind| PenaltySpec::new(kind, lambda, warmup);
    match suite {
        SuiteName::Linear => vec![
            method("erm", PenaltySpec::erm()),
            method("fishr", p(PenaltyKind::Fishr)),
            method("fishr_uncentered", p(PenaltyKind::Fishr).centered(false)),
            method("vrex", p(PenaltyKind::Vrex)),
            method("iga", p(PenaltyKind::Iga)),
            method("irmv1", p(PenaltyKind::Irmv1)),
        ],
        SuiteName::Cmnist => vec![
            method("erm", PenaltySpec::erm()),
            method("fishr_theta", p(PenaltyKind::Fishr).with_subset(Subset::All)),
            method("fishr_omega", p(PenaltyKind::Fishr)),
            method("fishr_omega_uncentered", p(PenaltyKind::Fishr).centered(false)),
            method("fishr_phi", p(PenaltyKind::Fishr).with_subset(Subset::Features)),
            method("irmv1", p(PenaltyKind::Irmv1)),
            method("vrex", p(PenaltyKind::Vrex)),
            method("iga", p(PenaltyKind::Iga)),
        ],
        SuiteName::CmnistGrayscale => vec![
            method("fishr_theta", p(PenaltyKind::Fishr).with_subset(Subset::All)),
            method("erm", PenaltySpec::erm()),
        ],
        SuiteName::CmnistNoflip => vec![
            method("erm", PenaltySpec::erm()),
            method("fishr_omega", p(PenaltyKind::Fishr)),
            method("vrex", p(PenaltyKind::Vrex)),
            method("irmv1", p(PenaltyKind::Irmv1)),
        ],
        SuiteName::Dynamics => vec![
            method("erm", PenaltySpec::erm()),
            method("fishr_theta", p(PenaltyKind::Fishr).with_subset(Subset::All)),
        ],
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub mnist_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    /// restrict to these method names
    pub methods: Option<Vec<String>>,
    pub linear_spec: LinearToySpec,
    /// print one line per finished run
    pub verbose: bool,
}

impl SuiteOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            out_dir: out_dir.into(),
            seeds: (0..10).collect(),
            jobs: 1,
            methods: None,
            linear_spec: LinearToySpec::default(),
            verbose: false,
        }
    }
}

fn cmnist_spec(suite: SuiteName) -> ColoredMnistSpec {
    match suite {
        SuiteName::CmnistGrayscale => ColoredMnistSpec { grayscale: true, ..Default::default() },
        SuiteName::CmnistNoflip => ColoredMnistSpec { label_flip: 0.0, ..Default::default() },
        _ => ColoredMnistSpec::default(),
    }
}

/// Configurations of one suite, method-major then seed.
pub fn suite_configs(suite: SuiteName, opts: &SuiteOptions) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    let seeds: &[u64] = if suite == SuiteName::Dynamics { &[0] } else { &opts.seeds };
    for m in suite_methods(suite) {
        if let Some(keep) = &opts.methods {
            if !keep.iter().any(|k| k == m.name) {
                continue;
            }
        }
        for &seed in seeds {
            let cfg = match suite {
                SuiteName::Linear => TrainConfig {
                    name: format!("linear/{}", m.name),
                    dataset: DatasetConfig::Linear { spec: opts.linear_spec.clone() },
                    model: ModelConfig { hidden: 0, depth: 1 },
                    optim: OptimConfig { lr: linear::LR, l2: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
                    penalty: m.penalty.clone(),
                    epochs: linear::STEPS,
                    batch_size: None,
                    seed,
                    eval_every: 50,
                },
                _ => {
                    // the dynamics suite shares its runs with the cmnist suite
                    let data = if suite == SuiteName::Dynamics { SuiteName::Cmnist } else { suite };
                    TrainConfig {
                        name: format!("{}/{}", data.name(), m.name),
                        dataset: DatasetConfig::Cmnist {
                            mnist_dir: opts.mnist_dir.clone(),
                            spec: cmnist_spec(data),
                        },
                        model: ModelConfig { hidden: irm::HIDDEN, depth: 3 },
                        optim: OptimConfig { lr: irm::LR, l2: irm::L2, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
                        penalty: m.penalty.clone(),
                        epochs: irm::STEPS,
                        batch_size: None,
                        seed,
                        eval_every: 1,
                    }
                }
            };
            out.push(cfg);
        }
    }
    out
}

/// Directory holding a run's outputs; keyed by the config digest so that
/// reruns are served from cache. The MNIST location is not part of the key.
pub fn run_dir(out_dir: &Path, cfg: &TrainConfig) -> PathBuf {
    let mut key = cfg.clone();
    if let DatasetConfig::Cmnist { mnist_dir, .. } = &mut key.dataset {
        *mnist_dir = PathBuf::new();
    }
    out_dir.join("runs").join(key.digest())
}

pub fn cached_summary(out_dir: &Path, cfg: &TrainConfig) -> Option<RunSummary> {
    let text = fs::read_to_string(run_dir(out_dir, cfg).join("summary.json")).ok()?;
    serde_json::from_str(&text).ok()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (0 for a single value).
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub runs: usize,
    pub aborted: usize,
    pub train_acc: MeanStd,
    pub test_acc: MeanStd,
    pub var_gap: MeanStd,
    pub risk_gap: MeanStd,
    pub hess_gap: MeanStd,
    /// mean weights, for small models
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<MethodRow>,
    /// per-run summaries, method-major
    pub runs: Vec<RunSummary>,
}

impl SuiteSummary {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn method_of(name: &str) -> &str {
    name.rsplit('/').next().unwrap_or(name)
}

pub fn summarize(suite: SuiteName, seeds: &[u64], runs: Vec<RunSummary>) -> SuiteSummary {
    let mut rows: Vec<MethodRow> = Vec::new();
    let mut names: Vec<&str> = Vec::new();
    for r in &runs {
        let m = method_of(&r.name);
        if !names.contains(&m) {
            names.push(m);
        }
    }
    for m in names {
        let group: Vec<&RunSummary> = runs.iter().filter(|r| method_of(&r.name) == m).collect();
        let ok: Vec<&RunSummary> = group.iter().copied().filter(|r| r.aborted.is_none()).collect();
        let col = |f: fn(&RunSummary) -> f64| MeanStd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let weights = ok.first().and_then(|r| r.weights.as_ref()).map(|w0| {
            let mut acc = vec![0.0; w0.len()];
            for r in &ok {
                for (a, w) in acc.iter_mut().zip(r.weights.iter().flatten()) {
                    *a += w / ok.len() as f64;
                }
            }
            acc
        });
        rows.push(MethodRow {
            method: m.to_string(),
            runs: group.len(),
            aborted: group.len() - ok.len(),
            train_acc: col(|r| r.train_acc),
            test_acc: col(|r| r.test_acc),
            var_gap: col(|r| r.var_gap),
            risk_gap: col(|r| r.risk_gap),
            hess_gap: col(|r| r.hess_gap),
            weights,
        });
    }
    SuiteSummary {
        suite: suite.name().to_string(),
        seeds: seeds.to_vec(),
        rows,
        runs,
    }
}

/// Runs every (method, seed) of a suite, reusing finished runs found under
/// `out_dir/runs`, and writes `out_dir/<suite>.json`.
pub fn run_suite(suite: SuiteName, opts: &SuiteOptions) -> Result<SuiteSummary> {
    let configs = suite_configs(suite, opts);
    if configs.is_empty() {
        return Err(FishrError::Config("no method of the suite matches the filter".into()));
    }
    let mnist = if suite.needs_mnist() {
        let todo = configs.iter().any(|c| cached_summary(&opts.out_dir, c).is_none());
        if todo {
            Some(Mnist::load_train(&opts.mnist_dir)?)
        } else {
            None
        }
    } else {
        None
    };
    fs::create_dir_all(opts.out_dir.join("runs"))?;

    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cfg) = configs.get(i) else { break };
        let res = run_cached(cfg, opts, mnist.as_ref());
        if opts.verbose {
            match &res {
                Ok(s) => eprintln!(
                    "{} seed {}: train {:.4} test {:.4} ({:.0}s)",
                    s.name, s.seed, s.train_acc, s.test_acc, s.seconds
                ),
                Err(e) => eprintln!("{} seed {}: {e}", cfg.name, cfg.seed),
            }
        }
        results.lock().expect("results lock")[i] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..opts.jobs.max(1) {
            s.spawn(worker);
        }
    });
    let runs = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every config ran"))
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = if suite == SuiteName::Dynamics { vec![0] } else { opts.seeds.clone() };
    let summary = summarize(suite, &seeds, runs);
    fs::write(
        opts.out_dir.join(format!("{}.json", suite.name())),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn run_cached(cfg: &TrainConfig, opts: &SuiteOptions, mnist: Option<&Mnist>) -> Result<RunSummary> {
    if let Some(s) = cached_summary(&opts.out_dir, cfg) {
        return Ok(s);
    }
    let split = match (&cfg.dataset, mnist) {
        (DatasetConfig::Linear { spec }, _) => {
            let mut spec = spec.clone();
            spec.seed = spec.seed.wrapping_add(cfg.seed);
            make_linear_toy(&spec)?
        }
        (DatasetConfig::Cmnist { spec, .. }, Some(m)) => colored_split(m, spec, cfg.seed)?,
        _ => super::run::load_dataset(&cfg.dataset, cfg.seed)?,
    };
    let mut progress = |r: &super::run::MetricsRecord| {
        if opts.verbose && r.step % 50 == 0 {
            eprintln!(
                "  {} seed {} step {}: train {:.4} test {:.4} penalty {:.3e} risk_gap {:.3e}",
                cfg.name, cfg.seed, r.step, r.acc_train, r.acc_test, r.penalty, r.risk_gap
            );
        }
    };
    let out = run_on_observed(cfg, &split, &mut progress)?;
    write_outputs(&out, &run_dir(&opts.out_dir, cfg))?;
    Ok(out.summary)
}

/// `|R_A − R_B|` per recorded step from a two-domain trace CSV.
pub fn risk_gap_series(trace_csv: &Path, domains: (&str, &str)) -> Result<Vec<(u64, f64)>> {
    let mut rdr = csv::Reader::from_path(trace_csv).map_err(|e| FishrError::Input(e.to_string()))?;
    let mut a = std::collections::BTreeMap::new();
    let mut b = std::collections::BTreeMap::new();
    for rec in rdr.deserialize::<super::run::MetricsRecord>() {
        let r = rec.map_err(|e| FishrError::Input(e.to_string()))?;
        if r.domain_id == domains.0 {
            a.insert(r.step, r.risk);
        } else if r.domain_id == domains.1 {
            b.insert(r.step, r.risk);
        }
    }
    Ok(a.iter()
        .filter_map(|(s, ra)| b.get(s).map(|rb| (*s, (ra - rb).abs())))
        .collect())
}

/// Mean of the series over consecutive windows of `width` steps starting at
/// `from`; a decreasing-in-trend series has mostly decreasing window means.
pub fn window_means(series: &[(u64, f64)], from: u64, width: u64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut start = from;
    loop {
        let xs: Vec<f64> = series
            .iter()
            .filter(|(s, _)| *s >= start && *s < start + width)
            .map(|(_, v)| *v)
            .collect();
        if xs.is_empty() {
            break;
        }
        out.push(xs.iter().sum::<f64>() / xs.len() as f64);
        start += width;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_sample() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn configs_cover_methods_and_seeds() {
        let mut opts = SuiteOptions::new("/tmp/x");
        opts.seeds = vec![0, 1, 2];
        let c = suite_configs(SuiteName::Cmnist, &opts);
        assert_eq!(c.len(), 8 * 3);
        assert!(c.iter().all(|c| c.epochs == irm::STEPS && c.model.hidden == irm::HIDDEN));
        opts.methods = Some(vec!["erm".into()]);
        assert_eq!(suite_configs(SuiteName::CmnistNoflip, &opts).len(), 3);
        let dynamics = suite_configs(SuiteName::Dynamics, &SuiteOptions::new("/tmp/x"));
        assert_eq!(dynamics.len(), 2);
        let cm = suite_configs(SuiteName::Cmnist, &SuiteOptions::new("/tmp/x"));
        assert_eq!(run_dir(Path::new("o"), &dynamics[0]), run_dir(Path::new("o"), &cm[0]));
    }

    #[test]
    fn cache_key_ignores_mnist_location() {
        let opts = SuiteOptions::new("/tmp/x");
        let a = suite_configs(SuiteName::Cmnist, &opts)[0].clone();
        let mut b = a.clone();
        if let DatasetConfig::Cmnist { mnist_dir, .. } = &mut b.dataset {
            *mnist_dir = "/elsewhere".into();
        }
        assert_eq!(run_dir(Path::new("o"), &a), run_dir(Path::new("o"), &b));
    }

    #[test]
    fn linear_suite_runs_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = SuiteOptions::new(dir.path());
        opts.seeds = vec![0, 1];
        opts.methods = Some(vec!["erm".into(), "fishr".into()]);
        opts.linear_spec.n_per_domain = 200;
        opts.jobs = 2;
        let s = run_suite(SuiteName::Linear, &opts).unwrap();
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.rows[0].runs, 2);
        assert_eq!(s.row("fishr").unwrap().weights.as_ref().unwrap().len(), 5);
        let again = run_suite(SuiteName::Linear, &opts).unwrap();
        assert_eq!(again.runs, s.runs);
        assert!(dir.path().join("linear.json").exists());
    }

    #[test]
    fn missing_mnist_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = SuiteOptions::new(dir.path());
        opts.mnist_dir = dir.path().join("no-mnist");
        let err = run_suite(SuiteName::CmnistNoflip, &opts).unwrap_err();
        assert!(matches!(&err, FishrError::MissingData { path, .. } if path.starts_with(dir.path().join("no-mnist"))), "{err}");
    }

    #[test]
    fn window_means_split_series() {
        let s: Vec<(u64, f64)> = (0..10).map(|i| (i, i as f64)).collect();
        assert_eq!(window_means(&s, 4, 3), vec![5.0, 8.0]);
    }
}
