use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<f64>,
    labels: Vec<usize>,
    feature_shape: Vec<usize>,
    classes: usize,
    /// Bytes charged when this dataset is secret-shared.
    sample_bytes: u64,
}

impl Dataset {
    pub fn new(samples: Vec<f64>, labels: Vec<usize>, feature_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let f: usize = feature_shape.iter().product();
        if f == 0 || samples.len() != labels.len() * f {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), f],
                got: vec![samples.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::ShapeMismatch {
                expected: vec![classes],
                got: vec![bad],
            });
        }
        let sample_bytes = (labels.len() * (f + classes)) as u64 * 8;
        Ok(Dataset {
            samples,
            labels,
            feature_shape,
            classes,
            sample_bytes,
        })
    }

    pub fn with_sample_bytes(mut self, bytes: u64) -> Self {
        self.sample_bytes = bytes;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_bytes(&self) -> u64 {
        self.sample_bytes
    }

    /// Rows `r` as (features, one-hot targets with `classes` columns).
    pub fn batch(&self, r: Range<usize>, classes: usize) -> (Vec<f64>, Vec<f64>) {
        let f = self.features();
        let x = self.samples[r.start * f..r.end * f].to_vec();
        (x, super::train::one_hot(&self.labels[r], classes))
    }

    /// Contiguous sub-range; the byte charge scales with the row count.
    pub fn slice(&self, r: Range<usize>) -> Dataset {
        let f = self.features();
        let bytes = if self.is_empty() {
            0
        } else {
            (self.sample_bytes as u128 * r.len() as u128 / self.len() as u128) as u64
        };
        Dataset {
            samples: self.samples[r.start * f..r.end * f].to_vec(),
            labels: self.labels[r].to_vec(),
            feature_shape: self.feature_shape.clone(),
            classes: self.classes,
            sample_bytes: bytes,
        }
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for p in &parts[1..] {
            if p.feature_shape != out.feature_shape || p.classes != out.classes {
                return Err(Error::ShapeMismatch {
                    expected: out.feature_shape.clone(),
                    got: p.feature_shape.clone(),
                });
            }
            out.samples.extend_from_slice(&p.samples);
            out.labels.extend_from_slice(&p.labels);
            out.sample_bytes += p.sample_bytes;
        }
        Ok(out)
    }

    pub fn map_features(&self, f: impl Fn(f64) -> f64) -> Dataset {
        Dataset {
            samples: self.samples.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Isotropic Gaussian clusters, labels interleaved so contiguous shards stay balanced.
pub fn gaussian_blobs(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let noise = Normal::new(0.0, spread).expect("spread must be finite and non-negative");
    let mut samples = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for d in 0..dim {
            samples.push(centers[c][d] + noise.sample(&mut rng));
        }
    }
    Dataset::new(samples, labels, vec![dim], classes).expect("generator shapes are consistent")
}

/// Equal contiguous shards; the last one takes the remainder.
pub fn partition_uniform(data: &Dataset, n_clients: usize) -> Result<Vec<Dataset>> {
    if n_clients == 0 {
        return Err(Error::Config("n_clients must be at least 1".into()));
    }
    let base = data.len() / n_clients;
    Ok((0..n_clients)
        .map(|i| {
            let start = i * base;
            let end = if i + 1 == n_clients { data.len() } else { start + base };
            data.slice(start..end)
        })
        .collect())
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile(format!("{what} header")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, "magic")?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// (count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::TruncatedFile(format!("expected {need} pixel bytes, found {}", body.len())));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::TruncatedFile(format!("expected {n} label bytes, found {}", body.len())));
    }
    Ok(&body[..n])
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(10);
    Dataset::new(
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        vec![rows, cols],
        classes,
    )
}

pub fn write_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_sizes() {
        let d = gaussian_blobs(100, 2, 2, 0.1, 0);
        let s: Vec<usize> = partition_uniform(&d, 4).unwrap().iter().map(|p| p.len()).collect();
        assert_eq!(s, vec![25; 4]);
        let d = gaussian_blobs(10, 2, 2, 0.1, 0);
        let s: Vec<usize> = partition_uniform(&d, 3).unwrap().iter().map(|p| p.len()).collect();
        assert_eq!(s, vec![3, 3, 4]);
        assert!(partition_uniform(&d, 0).is_err());
    }

    #[test]
    fn partition_preserves_multiset() {
        let d = gaussian_blobs(37, 3, 3, 0.5, 1);
        let parts = partition_uniform(&d, 5).unwrap();
        let joined = Dataset::concat(&parts).unwrap();
        let key = |ds: &Dataset| {
            let mut rows: Vec<(usize, Vec<u64>)> = (0..ds.len())
                .map(|i| (ds.labels()[i], ds.samples()[i * 3..i * 3 + 3].iter().map(|v| v.to_bits()).collect()))
                .collect();
            rows.sort();
            rows
        };
        assert_eq!(key(&joined), key(&d));
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let pixels: Vec<u8> = (0..10 * 4 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let labels: Vec<u8> = (0..10).map(|i| (i % 10) as u8).collect();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, write_idx_images(4, 3, &pixels)).unwrap();
        std::fs::write(&lp, write_idx_labels(&labels)).unwrap();
        let d = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.feature_shape(), &[4, 3]);
        assert_eq!(d.samples()[1], 7.0 / 255.0);
        assert_eq!(d.labels()[9], 9);

        // Image magic on the label file.
        std::fs::write(&lp, write_idx_images(4, 3, &pixels)).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::BadMagic { found: 0x803, .. })));
        let mut short = write_idx_images(4, 3, &pixels);
        short.truncate(50);
        assert!(matches!(parse_idx_images(&short), Err(Error::TruncatedFile(_))));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(Error::TruncatedFile(_))));
    }
}
