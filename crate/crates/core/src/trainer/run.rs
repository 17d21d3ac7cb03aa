use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use faer::Mat;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::{DatasetConfig, TrainConfig};
use crate::datasets::{make_colored_mnist, make_linear_toy, make_two_bit_cmnist, DomainSplit, Mnist};
use crate::error::{FishrError, Result};
use crate::hessian::mean_pair_gap;
use crate::nn::{accuracy, forward, init_mlp, mean, nll_loss, AdamState, DomainBatch, MlpShape, ParamSet};
use crate::penalties::{objective, PenaltyState};
use crate::rng::{derive_seed, rng_for};

/// One row of the metrics trace. Gaps are over the classifier layer and
/// averaged over pairs of training domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub domain_id: String,
    /// risk of this row's domain
    pub risk: f64,
    /// pooled accuracy over the training domains
    pub acc_train: f64,
    pub acc_test: f64,
    pub penalty: f64,
    pub var_gap: f64,
    pub risk_gap: f64,
    pub hess_gap: Option<f64>,
    /// accuracy on this row's domain
    pub acc_domain: f64,
}

pub const TRACE_HEADER: &str = "step,domain_id,risk,acc_train,acc_test,penalty,var_gap,risk_gap,hess_gap,acc_domain";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.domain_id,
            self.risk,
            self.acc_train,
            self.acc_test,
            self.penalty,
            self.var_gap,
            self.risk_gap,
            self.hess_gap.map(|h| h.to_string()).unwrap_or_default(),
            self.acc_domain
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub digest: String,
    pub seed: u64,
    pub steps: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_risks: Vec<f64>,
    pub test_risk: f64,
    pub penalty: f64,
    pub var_gap: f64,
    pub risk_gap: f64,
    pub hess_gap: f64,
    /// flat parameters, kept for small models only
    pub weights: Option<Vec<f64>>,
    pub seconds: f64,
    /// set when training stopped on a non-finite objective
    pub aborted: Option<String>,
}

pub struct RunOutput {
    pub config: TrainConfig,
    pub trace: Vec<MetricsRecord>,
    pub params: ParamSet,
    pub summary: RunSummary,
}

/// Builds the domains for a run; the data seed is `spec.seed + seed`.
pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<DomainSplit> {
    match cfg {
        DatasetConfig::Linear { spec } => {
            let mut spec = spec.clone();
            spec.seed = spec.seed.wrapping_add(seed);
            make_linear_toy(&spec)
        }
        DatasetConfig::Twobit { n, spec } => {
            let mut spec = spec.clone();
            spec.seed = spec.seed.wrapping_add(seed);
            make_two_bit_cmnist(*n, &spec)
        }
        DatasetConfig::Cmnist { mnist_dir, spec } => {
            let mnist = Mnist::load_train(mnist_dir)?;
            colored_split(&mnist, spec, seed)
        }
    }
}

pub(crate) fn colored_split(mnist: &Mnist, spec: &crate::datasets::ColoredMnistSpec, seed: u64) -> Result<DomainSplit> {
    let mut spec = spec.clone();
    spec.seed = spec.seed.wrapping_add(seed);
    Ok(make_colored_mnist(mnist, &spec)?.into())
}

pub fn run_experiment(config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    let split = load_dataset(&config.dataset, config.seed)?;
    run_on(config, &split)
}

fn minibatch(b: &DomainBatch, size: usize, rng: &mut impl rand::Rng) -> Result<DomainBatch> {
    let mut idx = sample(rng, b.len(), size).into_vec();
    idx.sort_unstable();
    DomainBatch::new(
        b.domain_id.clone(),
        Mat::from_fn(size, b.dim(), |i, j| b.inputs[(idx[i], j)]),
        idx.iter().map(|&i| b.targets[i]).collect(),
    )
}

/// Trains on `split.train`, evaluating on `split.test`.
pub fn run_on(config: &TrainConfig, split: &DomainSplit) -> Result<RunOutput> {
    run_on_observed(config, split, &mut |_| {})
}

/// [`run_on`], handing every trace row to `observe` as it is recorded.
pub fn run_on_observed(
    config: &TrainConfig,
    split: &DomainSplit,
    observe: &mut dyn FnMut(&MetricsRecord),
) -> Result<RunOutput> {
    config.validate()?;
    let start = Instant::now();
    let d_in = split.test.dim();
    let shape = MlpShape {
        d_in,
        hidden: if config.model.depth == 1 { 0 } else { config.model.hidden },
        depth: config.model.depth,
    };
    let mut params = init_mlp(shape, derive_seed(config.seed, "init"))?;
    let mut theta = params.to_flat();
    let mut adam = AdamState::new(config.optim.adam(), theta.len());
    let mut state = PenaltyState::default();
    let mut batch_rng = rng_for(config.seed, "minibatch");
    let l2 = config.optim.l2;
    let mut trace = Vec::new();
    let mut aborted = None;

    for step in 0..config.epochs {
        let owned;
        let batches: &[DomainBatch] = match config.batch_size {
            Some(bs) if split.train.iter().any(|b| bs < b.len()) => {
                owned = split
                    .train
                    .iter()
                    .map(|b| minibatch(b, bs.min(b.len()), &mut batch_rng))
                    .collect::<Result<Vec<_>>>()?;
                &owned
            }
            _ => &split.train,
        };
        let record = step % config.eval_every == 0;
        let mut obj = objective(&params, batches, &config.penalty, step, &mut state, record)?;
        let scale = obj.scale;
        obj.value += l2 * crate::linalg::norm_sq(&theta) / scale;
        for (g, t) in obj.grad.iter_mut().zip(&theta) {
            *g += 2.0 * l2 * t / scale;
        }
        if !obj.value.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
            aborted = Some(format!(
                "non-finite objective at step {step}: value {}, erm {}, penalty {}",
                obj.value, obj.erm, obj.penalty
            ));
            break;
        }
        if record {
            let logits = forward(&params, split.test.inputs.as_ref())?;
            let acc_test = accuracy(&logits, &split.test.targets);
            let test_risk = mean(&nll_loss(&logits, &split.test.targets)?);
            let acc_train = pooled(&obj.accuracies, batches);
            let vars: Vec<Vec<f64>> = obj.diagnostics.iter().map(|d| d.var.clone()).collect();
            let hess: Vec<Vec<f64>> = obj.diagnostics.iter().map(|d| d.hess.clone()).collect();
            let risks: Vec<Vec<f64>> = obj.risks.iter().map(|r| vec![*r]).collect();
            let (var_gap, risk_gap, hess_gap) = (mean_pair_gap(&vars), mean_pair_gap(&risks), mean_pair_gap(&hess));
            for (e, b) in batches.iter().enumerate() {
                trace.push(MetricsRecord {
                    step,
                    domain_id: b.domain_id.clone(),
                    risk: obj.risks[e],
                    acc_train,
                    acc_test,
                    penalty: obj.penalty,
                    var_gap,
                    risk_gap,
                    hess_gap: Some(hess_gap),
                    acc_domain: obj.accuracies[e],
                });
            }
            trace.push(MetricsRecord {
                step,
                domain_id: split.test.domain_id.clone(),
                risk: test_risk,
                acc_train,
                acc_test,
                penalty: obj.penalty,
                var_gap,
                risk_gap,
                hess_gap: Some(hess_gap),
                acc_domain: acc_test,
            });
            observe(&trace[trace.len() - 1]);
        }
        adam.step(&mut theta, &obj.grad)?;
        params.set_flat(&theta)?;
    }

    // final evaluation at the trained parameters
    let steps = config.epochs;
    let fin = objective(&params, &split.train, &config.penalty, steps, &mut state.clone(), true);
    let logits = forward(&params, split.test.inputs.as_ref())?;
    let test_acc = accuracy(&logits, &split.test.targets);
    let test_risk = mean(&nll_loss(&logits, &split.test.targets)?);
    let summary = match fin {
        Ok(obj) => {
            let vars: Vec<Vec<f64>> = obj.diagnostics.iter().map(|d| d.var.clone()).collect();
            let hess: Vec<Vec<f64>> = obj.diagnostics.iter().map(|d| d.hess.clone()).collect();
            let risks: Vec<Vec<f64>> = obj.risks.iter().map(|r| vec![*r]).collect();
            let acc_train = pooled(&obj.accuracies, &split.train);
            let (var_gap, risk_gap, hess_gap) = (mean_pair_gap(&vars), mean_pair_gap(&risks), mean_pair_gap(&hess));
            if aborted.is_none() {
                for (e, b) in split.train.iter().enumerate() {
                    trace.push(MetricsRecord {
                        step: steps,
                        domain_id: b.domain_id.clone(),
                        risk: obj.risks[e],
                        acc_train,
                        acc_test: test_acc,
                        penalty: obj.penalty,
                        var_gap,
                        risk_gap,
                        hess_gap: Some(hess_gap),
                        acc_domain: obj.accuracies[e],
                    });
                }
                trace.push(MetricsRecord {
                    step: steps,
                    domain_id: split.test.domain_id.clone(),
                    risk: test_risk,
                    acc_train,
                    acc_test: test_acc,
                    penalty: obj.penalty,
                    var_gap,
                    risk_gap,
                    hess_gap: Some(hess_gap),
                    acc_domain: test_acc,
                });
            }
            RunSummary {
                name: config.name.clone(),
                digest: config.digest(),
                seed: config.seed,
                steps,
                train_acc: acc_train,
                test_acc,
                train_risks: obj.risks,
                test_risk,
                penalty: obj.penalty,
                var_gap,
                risk_gap,
                hess_gap,
                weights: (theta.len() <= 64).then(|| theta.clone()),
                seconds: start.elapsed().as_secs_f64(),
                aborted,
            }
        }
        Err(e) => RunSummary {
            name: config.name.clone(),
            digest: config.digest(),
            seed: config.seed,
            steps,
            train_acc: f64::NAN,
            test_acc,
            train_risks: Vec::new(),
            test_risk,
            penalty: f64::NAN,
            var_gap: f64::NAN,
            risk_gap: f64::NAN,
            hess_gap: f64::NAN,
            weights: None,
            seconds: start.elapsed().as_secs_f64(),
            aborted: Some(aborted.unwrap_or_else(|| e.to_string())),
        },
    };
    Ok(RunOutput {
        config: config.clone(),
        trace,
        params,
        summary,
    })
}

fn pooled(accs: &[f64], batches: &[DomainBatch]) -> f64 {
    let n: usize = batches.iter().map(|b| b.len()).sum();
    accs.iter().zip(batches).map(|(a, b)| a * b.len() as f64).sum::<f64>() / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub d_in: usize,
    pub hidden: usize,
    pub depth: usize,
    pub num_params: usize,
    /// `f64` little-endian, per layer: row-major weight then bias
    pub layout: String,
}

pub fn save_params(params: &ParamSet, bin: &Path) -> Result<()> {
    let flat = params.to_flat();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin, bytes)?;
    let shape = params.shape();
    let manifest = ParamsManifest {
        d_in: shape.d_in,
        hidden: shape.hidden,
        depth: shape.depth,
        num_params: flat.len(),
        layout: "f64-le; per layer: weight (out x in, row-major) then bias".into(),
    };
    fs::write(bin.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_params(bin: &Path) -> Result<ParamSet> {
    let mpath = bin.with_extension("json");
    for p in [bin, mpath.as_path()] {
        if !p.exists() {
            return Err(FishrError::MissingData {
                path: p.to_path_buf(),
                hint: "train a model first (`fishr train`)".into(),
            });
        }
    }
    let manifest: ParamsManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    let bytes = fs::read(bin)?;
    if bytes.len() != manifest.num_params * 8 {
        return Err(FishrError::Truncated {
            path: bin.to_path_buf(),
            offset: 0,
            needed: manifest.num_params * 8,
            available: bytes.len(),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let shape = MlpShape {
        d_in: manifest.d_in,
        hidden: manifest.hidden,
        depth: manifest.depth,
    };
    ParamSet::from_flat(shape, &flat)
}

/// Writes `trace.csv`, `summary.json`, `config.json`, `params.bin` and `params.json` into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("trace.csv"))?;
    writeln!(f, "{TRACE_HEADER}")?;
    for r in &out.trace {
        writeln!(f, "{}", r.csv_row())?;
    }
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&out.config)?)?;
    save_params(&out.params, &dir.join("params.bin"))?;
    // summary last: its presence marks a complete run
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::LinearToySpec;
    use crate::penalties::{PenaltyKind, PenaltySpec};
    use crate::trainer::config::{ModelConfig, OptimConfig};

    fn cfg(penalty: PenaltySpec) -> TrainConfig {
        TrainConfig {
            name: "t".into(),
            dataset: DatasetConfig::Linear {
                spec: LinearToySpec { n_per_domain: 200, ..Default::default() },
            },
            model: ModelConfig { hidden: 4, depth: 2 },
            optim: OptimConfig { lr: 0.01, l2: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            penalty,
            epochs: 12,
            batch_size: None,
            seed: 3,
            eval_every: 5,
        }
    }

    #[test]
    fn reproducible_trace() {
        let c = cfg(PenaltySpec::new(PenaltyKind::Fishr, 100.0, 4));
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        // steps 0, 5, 10 and the final evaluation, three rows each
        assert_eq!(a.trace.len(), 4 * 3);
        assert!(a.summary.aborted.is_none());
    }

    #[test]
    fn zero_lambda_fishr_equals_erm() {
        let erm = run_experiment(&cfg(PenaltySpec::erm())).unwrap();
        let off = run_experiment(&cfg(PenaltySpec::new(PenaltyKind::Fishr, 0.0, 4))).unwrap();
        assert_eq!(erm.params.to_flat(), off.params.to_flat());
        let strip = |t: &[MetricsRecord]| t.iter().map(|r| (r.step, r.risk, r.acc_test)).collect::<Vec<_>>();
        assert_eq!(strip(&erm.trace), strip(&off.trace));
    }

    #[test]
    fn identical_domains_have_zero_penalty() {
        let split = load_dataset(&cfg(PenaltySpec::erm()).dataset, 0).unwrap();
        let twin = DomainSplit {
            train: vec![split.train[0].clone(), split.train[0].clone()],
            test: split.test.clone(),
        };
        let out = run_on(&cfg(PenaltySpec::new(PenaltyKind::Fishr, 100.0, 0)), &twin).unwrap();
        assert!(out.trace.iter().all(|r| r.penalty == 0.0 && r.var_gap == 0.0));
    }

    #[test]
    fn params_round_trip() {
        let out = run_experiment(&cfg(PenaltySpec::erm())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&out, dir.path()).unwrap();
        let back = load_params(&dir.path().join("params.bin")).unwrap();
        assert_eq!(back.to_flat(), out.params.to_flat());
        let text = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert!(text.starts_with(TRACE_HEADER));
        assert!(matches!(load_params(&dir.path().join("nope.bin")), Err(FishrError::MissingData { .. })));
    }

    #[test]
    fn minibatches_are_seeded() {
        let mut c = cfg(PenaltySpec::new(PenaltyKind::Vrex, 10.0, 2));
        c.batch_size = Some(50);
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
    }
}
