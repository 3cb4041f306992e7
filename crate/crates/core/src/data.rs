//! Datasets: IDX (MNIST) ingestion, synthetic blobs and i.i.d. client partitions.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples with features normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the rows at `indices` (in that order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all of them if there are fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::from_parts_unchecked(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The whole dataset as a single batch.
    pub fn full_batch(&self) -> Batch {
        Batch::from_parts_unchecked(self.features.clone(), self.labels.clone())
    }
}

/// Header of an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    /// Parses the magic and the big-endian dimension list. Returns the header
    /// and the offset of the first payload byte.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        let magic = read_u32(bytes, 0).ok_or_else(|| {
            Error::Format(format!(
                "truncated IDX header: expected at least 4 bytes, found {}",
                bytes.len()
            ))
        })?;
        let ndim = match magic {
            IDX_IMAGES_MAGIC => 3,
            IDX_LABELS_MAGIC => 1,
            other => {
                return Err(Error::Format(format!(
                    "unsupported IDX magic 0x{other:08x} (expected 0x{IDX_IMAGES_MAGIC:08x} or 0x{IDX_LABELS_MAGIC:08x})"
                )))
            }
        };
        let header_len = 4 + 4 * ndim;
        if bytes.len() < header_len {
            return Err(Error::Format(format!(
                "truncated IDX header: expected {header_len} bytes, found {}",
                bytes.len()
            )));
        }
        let dims = (0..ndim)
            .map(|k| read_u32(bytes, 4 + 4 * k).expect("length checked"))
            .collect();
        Ok((IdxHeader { magic, dims }, header_len))
    }

    /// Number of payload bytes the dimensions call for.
    pub fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    let chunk = bytes.get(at..at + 4)?;
    Some(u32::from_be_bytes(chunk.try_into().ok()?))
}

/// Images decoded from an IDX image file, pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `count * rows * cols` values.
    pub pixels: Vec<f64>,
}

impl IdxImages {
    pub fn into_features(self) -> Array2<f64> {
        Array2::from_shape_vec((self.count, self.rows * self.cols), self.pixels)
            .expect("pixel count matches header")
    }

    /// Re-encodes to the IDX byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = IdxHeader {
            magic: IDX_IMAGES_MAGIC,
            dims: vec![self.count as u32, self.rows as u32, self.cols as u32],
        };
        let mut out = header.to_bytes();
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        out
    }
}

fn check_payload(header: &IdxHeader, bytes: &[u8], offset: usize) -> Result<()> {
    let expected = header.payload_len();
    let actual = bytes.len() - offset;
    if actual < expected {
        return Err(Error::Format(format!(
            "truncated IDX payload: expected {expected} bytes, found {actual}"
        )));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let (header, offset) = IdxHeader::parse(bytes)?;
    if header.magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{:08x}",
            header.magic
        )));
    }
    check_payload(&header, bytes, offset)?;
    let [count, rows, cols] = [0, 1, 2].map(|k| header.dims[k] as usize);
    let pixels = bytes[offset..offset + header.payload_len()]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (header, offset) = IdxHeader::parse(bytes)?;
    if header.magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{:08x}",
            header.magic
        )));
    }
    check_payload(&header, bytes, offset)?;
    Ok(bytes[offset..offset + header.payload_len()].to_vec())
}

pub fn labels_to_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = IdxHeader {
        magic: IDX_LABELS_MAGIC,
        dims: vec![labels.len() as u32],
    }
    .to_bytes();
    out.extend_from_slice(labels);
    out
}

/// Pairs an image file with a label file. `limit` keeps only the first samples.
pub fn dataset_from_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    num_classes: usize,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.count != labels.len() {
        return Err(Error::Data(format!(
            "image file holds {} samples but label file holds {}",
            images.count,
            labels.len()
        )));
    }
    let labels = labels.into_iter().map(usize::from).collect();
    let ds = Dataset::new(images.into_features(), labels, num_classes)?;
    Ok(match limit {
        Some(n) => ds.head(n),
        None => ds,
    })
}

pub fn load_idx_dataset(
    images: &Path,
    labels: &Path,
    num_classes: usize,
    limit: Option<usize>,
) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))
    };
    dataset_from_idx(&read(images)?, &read(labels)?, num_classes, limit)
}

/// Assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub assignment: Vec<Vec<usize>>,
    /// Data-share weight of each client.
    pub p: Vec<f64>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    fn from_assignment(assignment: Vec<Vec<usize>>) -> Self {
        let total: usize = assignment.iter().map(Vec::len).sum();
        let mut p: Vec<f64> = assignment
            .iter()
            .map(|s| s.len() as f64 / total as f64)
            .collect();
        // Keep the exact ratios unless their ascending sum drifts more than
        // one ulp from 1; then the last weight absorbs the residue.
        if (p.iter().sum::<f64>() - 1.0).abs() > f64::EPSILON {
            if let Some((last, head)) = p.split_last_mut() {
                *last = 1.0 - head.iter().sum::<f64>();
            }
        }
        Self { assignment, p }
    }
}

/// Seeded shuffle followed by a contiguous split into `n` near-equal shards.
pub fn partition_iid(count: usize, n: usize, seed: u64) -> Result<PartitionPlan> {
    if n == 0 {
        return Err(Error::Config("number of clients must be at least 1".into()));
    }
    if n > count {
        return Err(Error::Config(format!(
            "cannot split {count} samples among {n} clients"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (count / n, count % n);
    let mut assignment = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        assignment.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(PartitionPlan::from_assignment(assignment))
}

/// Like [`partition_iid`] but every client gets exactly `shard_size` samples,
/// so the per-client data volume does not shrink as `n` grows.
pub fn partition_fixed_shards(
    count: usize,
    n: usize,
    shard_size: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if n == 0 || shard_size == 0 {
        return Err(Error::Config(
            "number of clients and shard size must be at least 1".into(),
        ));
    }
    if n * shard_size > count {
        return Err(Error::Config(format!(
            "{n} shards of {shard_size} samples exceed the {count} available"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order
        .chunks(shard_size)
        .take(n)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(PartitionPlan::from_assignment(assignment))
}

/// Parameters of the Gaussian-blob fixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Gaussian blobs: class `c` is centred at `separation * e_c` (basis direction
/// `c mod dim`) with unit variance, then mapped to `[0, 1]` by the affine map
/// `x -> (x + 4) / (separation + 8)` and clipped. Samples cycle through the
/// classes, so labels are balanced and interleaved.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let SynthSpec {
        num_classes,
        dim,
        per_class,
        separation,
        seed,
    } = *spec;
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::Config(
            "synthetic dataset sizes must all be at least 1".into(),
        ));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Config(format!(
            "separation must be finite and non-negative, got {separation}"
        )));
    }
    let count = num_classes * per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = separation + 8.0;
    let mut features = Array2::zeros((count, dim));
    let mut labels = Vec::with_capacity(count);
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let class = i % num_classes;
        for (j, x) in row.iter_mut().enumerate() {
            let centre = if j == class % dim { separation } else { 0.0 };
            let z: f64 = rng.sample(StandardNormal);
            *x = ((centre + z + 4.0) / scale).clamp(0.0, 1.0);
        }
        labels.push(class);
    }
    Dataset::new(features, labels, num_classes)
}
