//! Dataset loaders: IDX image files (MNIST layout), CIFAR-10 binary batches
//! and seeded synthetic generators.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use iee_core::data::{Dataset, DatasetTargets};
use iee_core::nn::Tensor;
use iee_core::rng::substream;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DataConfig, DataKind, Generator};
use crate::error::{HarnessError, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Train and test splits plus what the model needs to know about them.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    /// Number of classes, or output width for regression.
    pub outputs: usize,
    pub regression: bool,
}

impl Splits {
    pub fn sample_shape(&self) -> &[usize] {
        self.train.sample_shape()
    }
}

/// `$IEE_DATA_DIR/<name>`, or `data/<name>` when the variable is unset.
pub fn default_dir(name: &str) -> PathBuf {
    std::env::var_os("IEE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
        .join(name)
}

/// Read a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| HarnessError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| HarnessError::Data(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| HarnessError::Data(format!("{what}: truncated header at byte offset {offset}")))
}

/// Parse an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES {
        return Err(HarnessError::Data(format!(
            "{what}: magic {magic:#010x} at byte offset 0, expected {IDX_IMAGES:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(HarnessError::Data(format!(
            "{what}: truncated at byte offset {}, header promises {need} bytes",
            bytes.len()
        )));
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

/// Parse an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS {
        return Err(HarnessError::Data(format!(
            "{what}: magic {magic:#010x} at byte offset 0, expected {IDX_LABELS:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    if bytes.len() < 8 + n {
        return Err(HarnessError::Data(format!(
            "{what}: truncated at byte offset {}, header promises {} bytes",
            bytes.len(),
            8 + n
        )));
    }
    Ok(bytes[8..8 + n].to_vec())
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(HarnessError::Data(format!(
        "{}: missing {stem}[.gz]; datasets are not downloaded, place the files there or set IEE_DATA_DIR",
        dir.display()
    )))
}

fn idx_split(dir: &Path, prefix: &str, limit: Option<usize>, mean: f32, std: f32) -> Result<(Dataset, usize)> {
    let img_path = find(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lbl_path = find(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(&img_path)?, &img_path.display().to_string())?;
    let labels = parse_idx_labels(&read_maybe_gz(&lbl_path)?, &lbl_path.display().to_string())?;
    if labels.len() != n {
        return Err(HarnessError::Data(format!(
            "{}: {} labels for {n} images",
            lbl_path.display(),
            labels.len()
        )));
    }
    let n = limit.map_or(n, |l| l.min(n));
    let per = rows * cols;
    let data = pixels[..n * per].iter().map(|&p| (p as f32 / 255.0 - mean) / std).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels[..n].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok((Dataset::new(inputs, DatasetTargets::Labels(labels))?, classes))
}

/// Parse CIFAR-10 binary records `label, 3072 channel-major pixels`.
pub fn parse_cifar(bytes: &[u8], what: &str, limit: Option<usize>) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(HarnessError::Data(format!(
            "{what}: length {} is not a multiple of the {CIFAR_RECORD}-byte record; truncated at byte offset {}",
            bytes.len(),
            bytes.len() - bytes.len() % CIFAR_RECORD
        )));
    }
    let n = limit.map_or(bytes.len() / CIFAR_RECORD, |l| l.min(bytes.len() / CIFAR_RECORD));
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).take(n).enumerate() {
        if rec[0] > 9 {
            return Err(HarnessError::Data(format!(
                "{what}: label {} at byte offset {}",
                rec[0],
                r * CIFAR_RECORD
            )));
        }
        labels.push(rec[0] as usize);
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            data.extend(plane.iter().map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Ok((data, labels))
}

fn cifar_split(files: &[PathBuf], limit: Option<usize>) -> Result<Dataset> {
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for f in files {
        let left = limit.map(|l| l.saturating_sub(labels.len()));
        if left == Some(0) {
            break;
        }
        let (d, l) = parse_cifar(&read_maybe_gz(f)?, &f.display().to_string(), left)?;
        data.extend(d);
        labels.extend(l);
    }
    let n = labels.len();
    Ok(Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, DatasetTargets::Labels(labels))?)
}

/// Two interleaved half circles with Gaussian noise, balanced classes.
pub fn two_moons(n: usize, noise: f32, seed: u64) -> Result<Dataset> {
    let mut rng = substream(seed, "two-moons");
    let normal = Normal::new(0.0f32, noise.max(0.0)).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let class = k % 2;
        let a: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let (x, y) = if class == 0 {
            (a.cos(), a.sin())
        } else {
            (1.0 - a.cos(), 0.5 - a.sin())
        };
        data.push(x + normal.sample(&mut rng));
        data.push(y + normal.sample(&mut rng));
        labels.push(class);
    }
    Ok(Dataset::new(Tensor::new(vec![n, 2], data)?, DatasetTargets::Labels(labels))?)
}

/// `y = sin(w . x) + noise` with standard-normal inputs of width `features`.
pub fn regression(n: usize, features: usize, noise: f32, seed: u64) -> Result<Dataset> {
    let mut rng = substream(seed, "regression");
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let w: Vec<f32> = (0..features).map(|_| normal.sample(&mut rng) / (features as f32).sqrt()).collect();
    let mut data = Vec::with_capacity(n * features);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f32> = (0..features).map(|_| normal.sample(&mut rng)).collect();
        let dot: f32 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        ys.push(dot.sin() + noise * normal.sample(&mut rng));
        data.extend(x);
    }
    Ok(Dataset::new(
        Tensor::new(vec![n, features], data)?,
        DatasetTargets::Values(Tensor::new(vec![n, 1], ys)?),
    )?)
}

/// Load the configured splits. Synthetic data draws the test split from a
/// separate seed stream.
pub fn load(cfg: &DataConfig, seed: u64) -> Result<Splits> {
    match cfg.kind {
        DataKind::IdxImages => {
            let dir = cfg.path.clone().unwrap_or_else(|| default_dir("mnist"));
            let (train, c1) = idx_split(&dir, "train", cfg.train_limit, cfg.mean, cfg.std)?;
            let (test, c2) = idx_split(&dir, "t10k", cfg.test_limit, cfg.mean, cfg.std)?;
            Ok(Splits {
                train,
                test,
                outputs: c1.max(c2),
                regression: false,
            })
        }
        DataKind::CifarBinary => {
            let dir = cfg.path.clone().unwrap_or_else(|| default_dir("cifar-10-batches-bin"));
            let train_files: Vec<PathBuf> = (1..=5)
                .map(|k| find(&dir, &format!("data_batch_{k}.bin")))
                .collect::<Result<_>>()?;
            let test_file = find(&dir, "test_batch.bin")?;
            Ok(Splits {
                train: cifar_split(&train_files, cfg.train_limit)?,
                test: cifar_split(&[test_file], cfg.test_limit)?,
                outputs: 10,
                regression: false,
            })
        }
        DataKind::Synthetic => {
            let test_n = cfg.test_limit.unwrap_or(cfg.samples / 4).max(1);
            let train_n = cfg.train_limit.unwrap_or(cfg.samples);
            let test_seed = seed ^ 0x7e57_7e57;
            match cfg.generator {
                Generator::TwoMoons => Ok(Splits {
                    train: two_moons(train_n, cfg.noise, seed)?,
                    test: two_moons(test_n, cfg.noise, test_seed)?,
                    outputs: 2,
                    regression: false,
                }),
                Generator::Regression => Ok(Splits {
                    train: regression(train_n, cfg.features, cfg.noise, seed)?,
                    test: regression(test_n, cfg.features, cfg.noise, test_seed)?,
                    outputs: 1,
                    regression: true,
                }),
            }
        }
    }
}

/// Flatten image inputs to `[N, C*H*W]` for a dense model.
pub fn flatten(ds: Dataset) -> Result<Dataset> {
    let n = ds.len();
    let per: usize = ds.sample_shape().iter().product();
    if ds.sample_shape().len() == 1 {
        return Ok(ds);
    }
    let inputs = ds.inputs.reshape(vec![n, per])?;
    Ok(Dataset::new(inputs, ds.targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES, n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn idx_round_trip() {
        let (n, r, c, px) = parse_idx_images(&idx_images(3, 2, 2), "x").unwrap();
        assert_eq!((n, r, c), (3, 2, 2));
        assert_eq!(px.len(), 12);
        assert_eq!(px[5], 5);
    }

    #[test]
    fn idx_bad_magic_reports_offset() {
        let mut b = idx_images(1, 1, 1);
        b[3] = 0x01;
        let err = parse_idx_images(&b, "x").unwrap_err().to_string();
        assert!(err.contains("byte offset 0") && err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn idx_truncation_reports_offset() {
        let b = idx_images(4, 2, 2);
        let err = parse_idx_images(&b[..20], "x").unwrap_err().to_string();
        assert!(err.contains("byte offset 20"), "{err}");
        assert_eq!(parse_idx_images(&b[..20], "x").unwrap_err().exit_code(), 3);
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(255u8).take(3072));
        let (data, labels) = parse_cifar(&rec, "x", None).unwrap();
        assert_eq!(labels, vec![7]);
        assert!((data[0] - (1.0 - CIFAR_MEAN[0]) / CIFAR_STD[0]).abs() < 1e-6);
        assert!(parse_cifar(&rec[..100], "x", None).is_err());
    }

    #[test]
    fn generators_are_seeded() {
        let a = two_moons(50, 0.1, 3).unwrap();
        let b = two_moons(50, 0.1, 3).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        let r = regression(20, 4, 0.0, 1).unwrap();
        assert_eq!(r.inputs.shape(), &[20, 4]);
    }
}
