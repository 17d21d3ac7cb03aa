//! Data ingestion and generation.

pub mod cmnist;
pub mod idx;
pub mod linear_toy;
pub mod twobit;

use std::fs;
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

pub use cmnist::{make_colored_mnist, to_grayscale, ColoredMnist, ColoredMnistSpec};
pub use idx::{load_mnist_idx, write_mnist_idx, Mnist};
pub use linear_toy::{make_linear_toy, LinearToySpec};
pub use twobit::make_two_bit_cmnist;

use crate::error::{FishrError, Result};
use crate::nn::DomainBatch;

/// Training domains and a held-out test domain.
#[derive(Clone, Debug)]
pub struct DomainSplit {
    pub train: Vec<DomainBatch>,
    pub test: DomainBatch,
}

impl DomainSplit {
    pub fn all(&self) -> impl Iterator<Item = &DomainBatch> {
        self.train.iter().chain(std::iter::once(&self.test))
    }
}

impl From<ColoredMnist> for DomainSplit {
    fn from(c: ColoredMnist) -> Self {
        Self { train: c.train, test: c.test }
    }
}

/// Writes every domain as CSV rows `domain_id,target,f_0,…,f_{d−1}`.
pub fn write_csv(batches: &[&DomainBatch], path: &Path) -> Result<()> {
    let d = batches.first().map(|b| b.dim()).unwrap_or(0);
    if batches.iter().any(|b| b.dim() != d) {
        return Err(FishrError::Dimension("domains differ in feature count".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["domain_id".to_string(), "target".to_string()];
    header.extend((0..d).map(|j| format!("f_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for b in batches {
        for i in 0..b.len() {
            let mut row = vec![b.domain_id.clone(), format!("{}", b.targets[i])];
            row.extend((0..d).map(|j| format!("{}", b.inputs[(i, j)])));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`], grouping rows by domain in order of first appearance.
pub fn read_csv(path: &Path) -> Result<Vec<DomainBatch>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let d = r.headers().map_err(csv_err)?.len().saturating_sub(2);
    let mut order: Vec<String> = Vec::new();
    let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let parse = |s: &str| s.parse::<f64>().map_err(|e| FishrError::Input(format!("{path:?}: {e}")));
        let pos = match order.iter().position(|o| *o == id) {
            Some(p) => p,
            None => {
                order.push(id);
                rows.push((Vec::new(), Vec::new()));
                order.len() - 1
            }
        };
        rows[pos].1.push(parse(rec.get(1).unwrap_or_default())?);
        for j in 0..d {
            rows[pos].0.push(parse(rec.get(j + 2).unwrap_or_default())?);
        }
    }
    order
        .into_iter()
        .zip(rows)
        .map(|(id, (x, y))| DomainBatch::new(id, Mat::from_fn(y.len(), d, |i, j| x[i * d + j]), y))
        .collect()
}

fn csv_err(e: csv::Error) -> FishrError {
    FishrError::Input(format!("csv: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedDomain {
    pub domain_id: String,
    pub file: String,
    pub n: usize,
    pub dim: usize,
    pub positive_rate: f64,
    pub role: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub domains: Vec<CachedDomain>,
    pub spec: serde_json::Value,
}

pub const MANIFEST: &str = "manifest.json";

/// Stores domains whose features are multiples of 1/255 as raw bytes (pixels
/// row-major, then one byte per target) next to a JSON manifest.
pub fn save_u8_cache(split: &DomainSplit, spec: serde_json::Value, dir: &Path) -> Result<CacheManifest> {
    fs::create_dir_all(dir)?;
    let mut domains = Vec::new();
    for (k, b) in split.all().enumerate() {
        let (n, d) = (b.len(), b.dim());
        let mut bytes = Vec::with_capacity(n * d + n);
        for i in 0..n {
            for j in 0..d {
                let v = b.inputs[(i, j)] * 255.0;
                let q = v.round();
                if (v - q).abs() > 1e-9 || !(0.0..=255.0).contains(&q) {
                    return Err(FishrError::Input(format!(
                        "domain `{}` feature ({i},{j}) is not a pixel value",
                        b.domain_id
                    )));
                }
                bytes.push(q as u8);
            }
        }
        bytes.extend(b.targets.iter().map(|&y| y as u8));
        let file = format!("{}.u8", b.domain_id);
        fs::write(dir.join(&file), bytes)?;
        domains.push(CachedDomain {
            domain_id: b.domain_id.clone(),
            file,
            n,
            dim: d,
            positive_rate: b.targets.iter().sum::<f64>() / n as f64,
            role: if k < split.train.len() { "train" } else { "test" }.into(),
        });
    }
    let manifest = CacheManifest { domains, spec };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_u8_cache(dir: &Path) -> Result<DomainSplit> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(FishrError::MissingData {
            path: mpath,
            hint: "create it with `fishr gen-data --dataset cmnist`".into(),
        });
    }
    let manifest: CacheManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    let mut train = Vec::new();
    let mut test = None;
    for c in manifest.domains {
        let path = dir.join(&c.file);
        let bytes = fs::read(&path)?;
        if bytes.len() != c.n * c.dim + c.n {
            return Err(FishrError::Truncated {
                path,
                offset: 0,
                needed: c.n * c.dim + c.n,
                available: bytes.len(),
            });
        }
        let inputs = Mat::from_fn(c.n, c.dim, |i, j| bytes[i * c.dim + j] as f64 / 255.0);
        let targets = bytes[c.n * c.dim..].iter().map(|&y| y as f64).collect();
        let b = DomainBatch::new(c.domain_id, inputs, targets)?;
        if c.role == "test" {
            test = Some(b);
        } else {
            train.push(b);
        }
    }
    let test = test.ok_or_else(|| FishrError::Input("cache has no test domain".into()))?;
    Ok(DomainSplit { train, test })
}
