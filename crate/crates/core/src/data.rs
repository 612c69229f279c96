//! Datasets, IDX files and Dirichlet label-skew partitioning.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::loss::entropy_unchecked;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape(format!("{} rows vs {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label: bad, num_classes });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(&self.labels, self.num_classes)
    }

    /// Per-feature (min, max) over all rows.
    pub fn value_range(&self) -> (f64, f64) {
        let s = self.inputs.as_slice();
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

pub fn histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

/// Generating parameters of the Gaussian-cluster benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    /// Radius of the sphere carrying the class centers.
    pub radius: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            n_per_class: 400,
            test_per_class: 200,
            dim: 16,
            spread: 1.0,
            radius: 4.0,
        }
    }
}

/// Class centers: isotropic normal directions scaled to `radius`.
pub fn synthetic_centers(num_classes: usize, dim: usize, radius: f64, seed: u64) -> Matrix {
    let mut rng = stream(seed, "synthetic-centers", &[]);
    let mut c = Matrix::random_normal(num_classes, dim, &mut rng);
    for r in 0..num_classes {
        let row = c.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for v in row {
            *v *= radius / norm;
        }
    }
    c
}

/// Class-major Gaussian clusters with covariance `spread²·I`.
pub fn make_synthetic(num_classes: usize, n_per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    let cfg = SyntheticConfig {
        num_classes,
        n_per_class,
        dim,
        spread,
        ..Default::default()
    };
    make_synthetic_split(&cfg, Split::Train, seed)
}

/// Train and test draws share centers and differ only in their noise stream.
pub fn make_synthetic_split(cfg: &SyntheticConfig, split: Split, seed: u64) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.dim < 2 {
        return Err(Error::Size(format!(
            "need at least 2 classes and 2 dimensions, got {} and {}",
            cfg.num_classes, cfg.dim
        )));
    }
    let n = match split {
        Split::Train => cfg.n_per_class,
        Split::Test => cfg.test_per_class,
    };
    if n < 2 {
        return Err(Error::Size(format!("n_per_class = {n} (need ≥ 2)")));
    }
    if !(cfg.spread >= 0.0) {
        return Err(Error::config("spread must be non-negative"));
    }
    let centers = synthetic_centers(cfg.num_classes, cfg.dim, cfg.radius, seed);
    let split_key = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = stream(seed, "synthetic-samples", &[split_key]);
    let mut inputs = Matrix::zeros(cfg.num_classes * n, cfg.dim);
    let mut labels = Vec::with_capacity(cfg.num_classes * n);
    for c in 0..cfg.num_classes {
        for i in 0..n {
            let r = c * n + i;
            for j in 0..cfg.dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.set(r, j, centers.get(c, j) + cfg.spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, cfg.num_classes, split)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset,
            message: "truncated header".into(),
        })
}

/// Parses an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}"),
        });
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let d = rows * cols;
    let need = 16 + n * d;
    if images.len() < need {
        return Err(Error::Format {
            offset: images.len(),
            message: format!("image data truncated: expected {need} bytes"),
        });
    }
    let lmagic = be_u32(labels, 0)?;
    if lmagic != IDX_LABELS {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {lmagic:#010x}"),
        });
    }
    let ln = be_u32(labels, 4)? as usize;
    if ln != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{ln} labels for {n} images"),
        });
    }
    if labels.len() < 8 + n {
        return Err(Error::Format {
            offset: labels.len(),
            message: format!("label data truncated: expected {} bytes", 8 + n),
        });
    }
    let data = images[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let labs: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labs.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(Matrix::from_vec(n, d, data)?, labs, num_classes, Split::Train)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    parse_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}

/// Encodes a dataset as IDX bytes; values are mapped back with `round(v·255)`.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(Error::shape(format!("{rows}x{cols} image for dimension {}", ds.dim())));
    }
    if ds.num_classes > 256 {
        return Err(Error::config("IDX labels are single bytes"));
    }
    let mut img = Vec::with_capacity(16 + ds.inputs.as_slice().len());
    img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(ds.inputs.as_slice().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

pub fn write_idx(ds: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds, rows, cols)?;
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_shards: Vec<Vec<usize>>,
    pub omega: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_shards.len()
    }

    /// Disjoint, covering `0..n`, no empty shard.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (i, s) in self.client_shards.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::structure(format!("shard {i} is empty")));
            }
            for &k in s {
                if k >= n || seen[k] {
                    return Err(Error::structure(format!("index {k} repeated or out of range")));
                }
                seen[k] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::structure("partition does not cover every index"));
        }
        Ok(())
    }
}

/// One draw from `Dir(alpha·1_n)`.
///
/// Gamma variates with tiny shape underflow to zero, so they are formed in
/// log space as `ln Gamma(α+1) + ln(U)/α` and normalized by log-sum-exp.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let g = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = g.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            x.ln() + u.ln() / alpha
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Per-class Dirichlet split. Empty shards are repaired by moving one
/// sample from the currently largest shard (lowest id on ties).
pub fn dirichlet_partition(labels: &[usize], num_clients: usize, omega: f64, seed: u64) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if !(omega > 0.0) {
        return Err(Error::config(format!("omega must be positive, got {omega}")));
    }
    if num_clients > labels.len() {
        return Err(Error::Infeasible(format!(
            "{num_clients} clients for {} samples",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut shards = vec![Vec::new(); num_clients];
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let mut rng = stream(seed, "partition", &[c as u64]);
        idx.shuffle(&mut rng);
        let p = sample_dirichlet(omega, num_clients, &mut rng);
        let n = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (i, pi) in p.iter().enumerate() {
            cum += pi;
            let end = if i + 1 == num_clients {
                n
            } else {
                ((cum * n as f64).floor() as usize).clamp(start, n)
            };
            shards[i].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for i in 0..num_clients {
        if shards[i].is_empty() {
            let donor = (0..num_clients)
                .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
                .unwrap();
            let moved = shards[donor].pop().unwrap();
            log::debug!("partition: shard {i} empty, took index {moved} from shard {donor}");
            shards[i].push(moved);
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(Partition {
        client_shards: shards,
        omega,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionStats {
    pub histograms: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
    pub label_entropy: Vec<f64>,
    pub mean_label_entropy: f64,
    /// Per client, fraction of its samples in its two largest classes.
    pub top2_mass: Vec<f64>,
    pub min_size: usize,
    pub max_size: usize,
}

pub fn partition_stats(partition: &Partition, labels: &[usize], num_classes: usize) -> PartitionStats {
    let histograms: Vec<Vec<usize>> = partition
        .client_shards
        .iter()
        .map(|s| histogram(&s.iter().map(|&i| labels[i]).collect::<Vec<_>>(), num_classes))
        .collect();
    let sizes: Vec<usize> = partition.client_shards.iter().map(Vec::len).collect();
    let label_entropy: Vec<f64> = histograms
        .iter()
        .zip(&sizes)
        .map(|(h, &n)| {
            let p: Vec<f64> = h.iter().map(|&c| c as f64 / n.max(1) as f64).collect();
            entropy_unchecked(&p)
        })
        .collect();
    let top2_mass = histograms
        .iter()
        .zip(&sizes)
        .map(|(h, &n)| {
            let mut s = h.clone();
            s.sort_unstable_by(|a, b| b.cmp(a));
            s.iter().take(2).sum::<usize>() as f64 / n.max(1) as f64
        })
        .collect();
    PartitionStats {
        mean_label_entropy: label_entropy.iter().sum::<f64>() / label_entropy.len().max(1) as f64,
        label_entropy,
        top2_mass,
        min_size: sizes.iter().copied().min().unwrap_or(0),
        max_size: sizes.iter().copied().max().unwrap_or(0),
        histograms,
        sizes,
    }
}

impl PartitionStats {
    /// `client_id,class,count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("client_id,class,count\n");
        for (i, h) in self.histograms.iter().enumerate() {
            for (c, n) in h.iter().enumerate() {
                let _ = writeln!(s, "{i},{c},{n}");
            }
        }
        s
    }
}
