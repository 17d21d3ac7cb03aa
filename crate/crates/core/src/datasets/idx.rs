//! Big-endian IDX containers as used by the MNIST distribution.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{FishrError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images and labels of one MNIST split, pixels stored row-major per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Mnist {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Mnist {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    /// Loads the training split (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`) from `dir`.
    pub fn load_train(dir: &Path) -> Result<Self> {
        load_mnist_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))
    }
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FishrError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let offset = self.pos;
        let found = self.u32()?;
        if found != expected {
            return Err(FishrError::BadMagic {
                path: self.path.to_path_buf(),
                offset,
                found,
                expected,
            });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(FishrError::MissingData {
            path: path.to_path_buf(),
            hint: "supply the MNIST IDX files (uncompressed) in this directory".into(),
        });
    }
    Ok(fs::read(path)?)
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = r.take(n * rows * cols)?.to_vec();
    Ok((n, rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32()? as usize;
    Ok(r.take(n)?.to_vec())
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Mnist> {
    let (n, rows, cols, pixels) = parse_images(&read_file(images_path)?, images_path)?;
    let labels = parse_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(FishrError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    Ok(Mnist {
        rows,
        cols,
        pixels,
        labels,
    })
}

pub fn encode_images(m: &Mnist) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + m.pixels.len());
    for v in [IMAGE_MAGIC, m.len() as u32, m.rows as u32, m.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&m.pixels);
    out
}

pub fn encode_labels(m: &Mnist) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + m.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(m.len() as u32).to_be_bytes());
    out.extend_from_slice(&m.labels);
    out
}

/// Writes `m` as an IDX3/IDX1 pair; returns both paths.
pub fn write_mnist_idx(m: &Mnist, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let ip = dir.join(format!("{stem}-images-idx3-ubyte"));
    let lp = dir.join(format!("{stem}-labels-idx1-ubyte"));
    fs::write(&ip, encode_images(m))?;
    fs::write(&lp, encode_labels(m))?;
    Ok((ip, lp))
}
