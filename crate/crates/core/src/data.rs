//! Datasets: seeded Gaussian blobs and IDX image files, plus deterministic
//! minibatch sampling.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A ChaCha stream keyed by `(seed, stream)`, so independent phases of a
/// run never share random numbers.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian clusters: one center per class drawn from `N(0, center_scale²)`
/// per coordinate, samples drawn from `N(center, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    /// Optional `[channels, height, width]` view of each sample, required by
    /// the convolutional architectures.
    #[serde(default)]
    pub image_shape: Option<[usize; 3]>,
}

fn default_center_scale() -> f64 {
    1.0
}

impl BlobSpec {
    pub fn new(classes: usize, dim: usize, n: usize, seed: u64) -> Self {
        BlobSpec {
            classes,
            dim,
            n,
            seed,
            center_scale: 1.0,
            image_shape: None,
        }
    }

    pub fn with_center_scale(mut self, scale: f64) -> Self {
        self.center_scale = scale;
        self
    }

    pub fn with_image_shape(mut self, shape: [usize; 3]) -> Self {
        self.image_shape = Some(shape);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    SyntheticBlobs(BlobSpec),
    IdxImages {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// Row-major samples, `len() == y.len() * sample_len`.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
    /// Shape of one sample, e.g. `[20]` or `[1, 8, 8]`.
    pub sample_shape: Vec<usize>,
}

/// A minibatch ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn batch(&self, split: &Split, indices: &[usize]) -> Batch {
        let len = self.sample_len();
        let mut x = Vec::with_capacity(indices.len() * len);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(&split.x[i * len..(i + 1) * len]);
            y.push(split.y[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Batch {
            x: Tensor::new(shape, x).expect("batch shape"),
            y,
        }
    }

    /// The whole split as one batch.
    pub fn full_batch(&self, split: &Split) -> Batch {
        let idx: Vec<usize> = (0..split.len()).collect();
        self.batch(split, &idx)
    }

    /// Consecutive evaluation batches of at most `size` examples.
    pub fn chunks<'a>(&'a self, split: &'a Split, size: usize) -> impl Iterator<Item = Batch> + 'a {
        let n = split.len();
        (0..n).step_by(size.max(1)).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(n)).collect();
            self.batch(split, &idx)
        })
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::SyntheticBlobs(b) => synthetic_blobs(b),
        DatasetSpec::IdxImages {
            images,
            labels,
            test_images,
            test_labels,
        } => load_idx_dataset(images, labels, test_images.as_deref(), test_labels.as_deref()),
    }
}

pub fn synthetic_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dim == 0 || spec.n < spec.classes {
        return Err(Error::Config(format!("degenerate blob spec {spec:?}")));
    }
    let sample_shape = match spec.image_shape {
        Some(s) if s.iter().product::<usize>() == spec.dim => s.to_vec(),
        Some(s) => {
            return Err(Error::Config(format!(
                "image shape {s:?} does not match dim {}",
                spec.dim
            )))
        }
        None => vec![spec.dim],
    };
    let mut rng = stream_rng(spec.seed, 0);
    let centers: Vec<f64> = (0..spec.classes * spec.dim)
        .map(|_| spec.center_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut rows: Vec<(Vec<f64>, usize)> = (0..spec.n)
        .map(|i| {
            let label = i % spec.classes;
            let c = &centers[label * spec.dim..(label + 1) * spec.dim];
            let x = c.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            (x, label)
        })
        .collect();
    rows.shuffle(&mut rng);
    let n_train = spec.n * 4 / 5;
    let to_split = |rows: &[(Vec<f64>, usize)]| Split {
        x: rows.iter().flat_map(|r| r.0.iter().cloned()).collect(),
        y: rows.iter().map(|r| r.1).collect(),
    };
    Ok(Dataset {
        train: to_split(&rows[..n_train]),
        test: to_split(&rows[n_train..]),
        num_classes: spec.classes,
        sample_shape,
    })
}

/// A parsed IDX file: its dimensions and raw unsigned-byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an unsigned-byte IDX file (big-endian header).
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    let read_u32 = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(Error::Parse {
                offset,
                msg: "truncated header".into(),
            })
    };
    let magic = read_u32(0)?;
    if magic != expected_magic {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(read_u32(4 + 4 * i)? as usize);
    }
    let header = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() != expected {
        return Err(Error::Parse {
            offset: header + payload.len().min(expected),
            msg: format!("payload has {} bytes, header declares {expected}", payload.len()),
        });
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

fn read_idx(path: &Path, magic: u32) -> Result<IdxArray> {
    parse_idx(&std::fs::read(path)?, magic)
}

fn idx_split(images: &IdxArray, labels: &IdxArray) -> Result<Split> {
    if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(Error::Format(format!(
            "IDX images {:?} and labels {:?} disagree",
            images.dims, labels.dims
        )));
    }
    Ok(Split {
        x: images.data.iter().map(|&p| p as f64).collect(),
        y: labels.data.iter().map(|&l| l as usize).collect(),
    })
}

fn load_idx_dataset(
    images: &Path,
    labels: &Path,
    test_images: Option<&Path>,
    test_labels: Option<&Path>,
) -> Result<Dataset> {
    let img = read_idx(images, IDX_IMAGES_MAGIC)?;
    let lab = read_idx(labels, IDX_LABELS_MAGIC)?;
    let sample_shape = vec![1, img.dims[1], img.dims[2]];
    let all = idx_split(&img, &lab)?;
    let (mut train, mut test) = match (test_images, test_labels) {
        (Some(ti), Some(tl)) => {
            let test = idx_split(&read_idx(ti, IDX_IMAGES_MAGIC)?, &read_idx(tl, IDX_LABELS_MAGIC)?)?;
            (all, test)
        }
        _ => {
            let len = sample_shape.iter().product::<usize>();
            let n_train = all.len() * 4 / 5;
            (
                Split {
                    x: all.x[..n_train * len].to_vec(),
                    y: all.y[..n_train].to_vec(),
                },
                Split {
                    x: all.x[n_train * len..].to_vec(),
                    y: all.y[n_train..].to_vec(),
                },
            )
        }
    };
    // Normalize with training-set statistics.
    let n = train.x.len().max(1) as f64;
    let mean = train.x.iter().sum::<f64>() / n;
    let var = train.x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    for v in train.x.iter_mut().chain(test.x.iter_mut()) {
        *v = (*v - mean) / std;
    }
    let num_classes = train.y.iter().chain(&test.y).max().map_or(0, |m| m + 1);
    Ok(Dataset {
        train,
        test,
        num_classes,
        sample_shape,
    })
}

/// Deterministic epoch-wise shuffled minibatches, addressable by global
/// step. The trailing partial batch of each epoch is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    perms: HashMap<usize, Vec<usize>>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            batch_size: batch_size.clamp(1, n.max(1)),
            seed,
            perms: HashMap::new(),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.n / self.batch_size).max(1)
    }

    pub fn indices(&mut self, step: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let (epoch, slot) = (step / per_epoch, step % per_epoch);
        let (n, seed) = (self.n, self.seed);
        if !self.perms.contains_key(&epoch) {
            // Only the current epoch is ever needed again.
            self.perms.clear();
        }
        let perm = self.perms.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut stream_rng(seed, epoch as u64));
            p
        });
        perm[slot * self.batch_size..(slot + 1) * self.batch_size].to_vec()
    }
}

/// Training-time augmentation for image-shaped samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub hflip: bool,
    /// Maximum shift in pixels along each axis (zero fill).
    pub max_shift: usize,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.hflip && self.max_shift == 0
    }

    /// Augments every sample of `batch` in place. Samples that are not
    /// `[C, H, W]` images are left unchanged.
    pub fn apply(&self, batch: &mut Batch, rng: &mut impl Rng) {
        let shape = batch.x.shape().to_vec();
        if self.is_identity() || shape.len() != 4 {
            return;
        }
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let len = c * h * w;
        let s = self.max_shift as isize;
        for sample in batch.x.data_mut().chunks_exact_mut(len) {
            let flip = self.hflip && rng.gen_bool(0.5);
            let (dy, dx) = if s > 0 {
                (rng.gen_range(-s..=s), rng.gen_range(-s..=s))
            } else {
                (0, 0)
            };
            let src = sample.to_vec();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize - dy;
                        let sx0 = x as isize - dx;
                        let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                        sample[(ch * h + y) * w + x] = if inside {
                            src[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn blobs_are_deterministic() {
        let spec = BlobSpec::new(4, 20, 4000, 7);
        let a = synthetic_blobs(&spec).unwrap();
        let b = synthetic_blobs(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 3200);
        assert_eq!(a.test.len(), 800);
        assert_eq!(a.sample_shape, vec![20]);
    }

    #[test]
    fn idx_header_arithmetic() {
        let payload = vec![7u8; 10 * 28 * 28];
        let bytes = idx_bytes(IDX_IMAGES_MAGIC, &[10, 28, 28], &payload);
        let arr = parse_idx(&bytes, IDX_IMAGES_MAGIC).unwrap();
        assert_eq!(arr.dims, vec![10, 28, 28]);
        assert_eq!(arr.data.len(), 7840);
    }

    #[test]
    fn idx_errors_report_offsets() {
        let bytes = idx_bytes(IDX_LABELS_MAGIC, &[5], &[1, 2, 3]);
        match parse_idx(&bytes, IDX_LABELS_MAGIC) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("{other:?}"),
        }
        match parse_idx(&bytes, IDX_IMAGES_MAGIC) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_idx(&[0, 0, 8, 3, 0, 0], IDX_IMAGES_MAGIC) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn idx_dataset_normalizes_with_train_stats() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<u8> = (0..10 * 4 * 4).map(|v| (v % 251) as u8).collect();
        let labels: Vec<u8> = (0..10).map(|v| (v % 3) as u8).collect();
        std::fs::write(dir.path().join("img"), idx_bytes(IDX_IMAGES_MAGIC, &[10, 4, 4], &images)).unwrap();
        std::fs::write(dir.path().join("lab"), idx_bytes(IDX_LABELS_MAGIC, &[10], &labels)).unwrap();
        let ds = load_dataset(&DatasetSpec::IdxImages {
            images: dir.path().join("img"),
            labels: dir.path().join("lab"),
            test_images: None,
            test_labels: None,
        })
        .unwrap();
        assert_eq!(ds.sample_shape, vec![1, 4, 4]);
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.num_classes, 3);
        let n = ds.train.x.len() as f64;
        let mean = ds.train.x.iter().sum::<f64>() / n;
        let var = ds.train.x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 3, 1);
        assert_eq!(s.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|t| s.indices(t)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        let again = BatchSampler::new(10, 3, 1).indices(4);
        assert_eq!(s.indices(4), again);
    }

    #[test]
    fn flip_only_mirrors_rows() {
        let mut batch = Batch {
            x: Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
            y: vec![0],
        };
        let aug = Augment {
            hflip: true,
            max_shift: 0,
        };
        // Find a draw that flips.
        let mut rng = stream_rng(0, 0);
        for _ in 0..16 {
            let mut b = batch.clone();
            aug.apply(&mut b, &mut rng);
            if b.x.data() != batch.x.data() {
                assert_eq!(b.x.data(), &[3.0, 2.0, 1.0]);
                return;
            }
        }
        batch.y.clear();
        panic!("flip never happened");
    }
}
