//! IDX reader for the MNIST distribution files.

use std::path::{Path, PathBuf};

use nvcim_core::nn::Dataset;
use nvcim_core::Tensor;
use sha2::{Digest, Sha256};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const CLASSES: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated at byte {offset} (needed {needed} bytes)")]
    Truncated {
        path: String,
        offset: usize,
        needed: usize,
    },
    #[error("{path}: label {label} at index {index} is outside 0..=9")]
    LabelRange {
        path: String,
        index: usize,
        label: u8,
    },
    #[error("{images} has {image_count} images but {labels} has {label_count} labels")]
    CountMismatch {
        images: String,
        image_count: usize,
        labels: String,
        label_count: usize,
    },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

struct Cursor<'a> {
    path: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IdxError> {
        if self.bytes.len() - self.pos < n {
            return Err(IdxError::Truncated {
                path: self.path.to_string(),
                offset: self.bytes.len(),
                needed: self.pos + n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IdxError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<(), IdxError> {
        let found = self.u32()?;
        if found != expected {
            return Err(IdxError::BadMagic {
                path: self.path.to_string(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Images as `[n, 1, rows, cols]` with pixels scaled to `[0, 1]`.
pub fn parse_images(path: &str, bytes: &[u8]) -> Result<Tensor, IdxError> {
    let mut c = Cursor { path, bytes, pos: 0 };
    c.magic(IMAGE_MAGIC)?;
    let n = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let pixels = c.take(n * rows * cols)?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, rows, cols], data).expect("size checked"))
}

pub fn parse_labels(path: &str, bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let mut c = Cursor { path, bytes, pos: 0 };
    c.magic(LABEL_MAGIC)?;
    let n = c.u32()? as usize;
    let raw = c.take(n)?;
    raw.iter()
        .enumerate()
        .map(|(index, &label)| {
            if (label as usize) < CLASSES {
                Ok(label as usize)
            } else {
                Err(IdxError::LabelRange {
                    path: path.to_string(),
                    index,
                    label,
                })
            }
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|e| IdxError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_pair(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    let (ip, lp) = (images.display().to_string(), labels.display().to_string());
    let x = parse_images(&ip, &read(images)?)?;
    let y = parse_labels(&lp, &read(labels)?)?;
    if x.batch() != y.len() {
        return Err(IdxError::CountMismatch {
            images: ip,
            image_count: x.batch(),
            labels: lp,
            label_count: y.len(),
        });
    }
    Ok(Dataset::new(x, y).expect("counts checked"))
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn default_dir() -> PathBuf {
    std::env::var_os("NVCIM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

pub fn load_mnist(dir: &Path) -> Result<Mnist, IdxError> {
    let f = |name: &str| dir.join(name);
    Ok(Mnist {
        train: load_pair(&f("train-images-idx3-ubyte"), &f("train-labels-idx1-ubyte"))?,
        test: load_pair(&f("t10k-images-idx3-ubyte"), &f("t10k-labels-idx1-ubyte"))?,
    })
}

/// SHA-256 over the parsed pixel bytes and labels, for run logs.
pub fn checksum(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for &p in data.inputs.data() {
        h.update([(p * 255.0).round() as u8]);
    }
    for &l in &data.labels {
        h.update([l as u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_tiny_files() {
        let mut img = header(IMAGE_MAGIC, &[2, 2, 2]);
        img.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        let x = parse_images("img", &img).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(&x.data()[..4], &[0.0, 1.0, 0.2, 0.4]);
        let mut lab = header(LABEL_MAGIC, &[2]);
        lab.extend_from_slice(&[5, 0]);
        assert_eq!(parse_labels("lab", &lab).unwrap(), vec![5, 0]);
    }

    #[test]
    fn structured_errors() {
        let img = header(LABEL_MAGIC, &[1, 1, 1]);
        assert!(matches!(parse_images("a", &img), Err(IdxError::BadMagic { found: 2049, .. })));
        let mut img = header(IMAGE_MAGIC, &[2, 2, 2]);
        img.extend_from_slice(&[0; 5]);
        assert_eq!(
            parse_images("a", &img),
            Err(IdxError::Truncated {
                path: "a".into(),
                offset: 21,
                needed: 24
            })
        );
        let mut lab = header(LABEL_MAGIC, &[3]);
        lab.extend_from_slice(&[1, 10, 2]);
        assert!(matches!(
            parse_labels("b", &lab),
            Err(IdxError::LabelRange { index: 1, label: 10, .. })
        ));
        assert!(matches!(parse_labels("c", &[0, 0]), Err(IdxError::Truncated { offset: 2, .. })));
    }
}
