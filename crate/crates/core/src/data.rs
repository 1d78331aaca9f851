//! Dataset ingestion (IDX and CIFAR-10 binary), splitting, and deterministic batching.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images scaled to `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// A materialized subset of a dataset plus the source indices it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Split> {
        if indices.is_empty() {
            return Err(Error::Config("empty split".into()));
        }
        let per = self.images.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok(Split {
            images: Tensor::new(&shape, data)?,
            labels,
            indices: indices.to_vec(),
        })
    }

    fn check_labels(&self) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= self.num_classes) {
            Some(l) => Err(Error::Config(format!("label {l} >= {} classes", self.num_classes))),
            None => Ok(()),
        }
    }
}

/// Named, pairwise-disjoint index sets over one source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub probe: Vec<usize>,
}

impl SplitPlan {
    /// First `probe` indices go to the probe split, the following `train` to training.
    pub fn leading(total: usize, train: usize, probe: usize) -> Result<Self> {
        if train + probe > total {
            return Err(Error::Config(format!(
                "train ({train}) + probe ({probe}) exceed the {total} available images"
            )));
        }
        Ok(SplitPlan {
            probe: (0..probe).collect(),
            train: (probe..probe + train).collect(),
        })
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let t: BTreeSet<_> = self.train.iter().collect();
        if let Some(i) = self.probe.iter().find(|i| t.contains(i)) {
            return Err(Error::Config(format!("index {i} is in both train and probe splits")));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::format(
                what,
                offset as u64,
                format!("header needs {} bytes, file has {}", offset + 4, bytes.len()),
            )
        })
}

/// Parses an IDX image file (`[N, h, w]` unsigned bytes) into `[N, 1, h, w]`, scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let what = "idx images";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(what, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let h = be_u32(bytes, 8, what)? as usize;
    let w = be_u32(bytes, 12, what)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(Error::format(
            what,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(what, 4, "zero extent in header"));
    }
    let data = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(&[n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let what = "idx labels";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(what, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(
            what,
            bytes.len().min(8 + n) as u64,
            format!("expected {} bytes, got {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            labels_path.display().to_string(),
            4,
            format!("{} labels for {} images", labels.len(), images.shape()[0]),
        ));
    }
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let ds = Dataset {
        images,
        labels,
        num_classes,
    };
    ds.check_labels()?;
    Ok(ds)
}

/// Inverse of the /255 scaling; values are rounded to the nearest byte.
fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dim("encode_idx_images", format!("need [N, 1, h, w], got {s:?}")));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Parses CIFAR-10 binary records: one label byte then R, G and B planes of 32×32 bytes.
pub fn parse_cifar10(bytes: &[u8], what: &str) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            what,
            (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(what, (i * CIFAR_RECORD) as u64, format!("label {} >= 10", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((data, labels))
}

pub fn load_cifar10_binary(paths: &[&Path]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR-10 files given".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (d, l) = parse_cifar10(&read(p)?, &p.display().to_string())?;
        data.extend(d);
        labels.extend(l);
    }
    Ok(Dataset {
        images: Tensor::new(&[labels.len(), 3, 32, 32], data)?,
        labels,
        num_classes: 10,
    })
}

pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, 32, 32] {
        return Err(Error::dim("encode_cifar10", format!("need [N, 3, 32, 32], got {:?}", ds.images.shape())));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    let per = CIFAR_RECORD - 1;
    for (i, &l) in ds.labels.iter().enumerate() {
        out.push(l as u8);
        out.extend(ds.images.data()[i * per..(i + 1) * per].iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

/// One mini-batch with the source indices (within the split) it was drawn from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Mini-batches of `split` for one epoch: shuffled by a stream keyed on `(seed, epoch)`,
/// last partial batch kept. With `augment`, each image is independently flipped horizontally
/// with probability 0.5 and randomly cropped after 4-pixel zero padding, keyed on
/// `(seed, epoch, index)`.
pub fn make_batches(
    split: &Split,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    augment: bool,
) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if split.is_empty() {
        return Err(Error::Config("cannot batch an empty split".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut seed::stream(seed, "shuffle", epoch as u64, 0));
    Ok(BatchStream {
        split,
        order,
        pos: 0,
        batch_size,
        seed,
        epoch,
        augment,
    })
}

pub struct BatchStream<'a> {
    split: &'a Split,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    augment: bool,
}

impl BatchStream<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        let [c, h, w] = self.split.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in &idx {
            let img = &self.split.images.data()[i * per..(i + 1) * per];
            if self.augment {
                let mut rng = seed::stream(self.seed, "augment", self.epoch as u64, i as u64);
                data.extend(augment_image(img, c, h, w, &mut rng));
            } else {
                data.extend_from_slice(img);
            }
        }
        let labels = idx.iter().map(|&i| self.split.labels[i]).collect();
        Some(Batch {
            images: Tensor::new(&[idx.len(), c, h, w], data).expect("consistent batch shape"),
            labels,
            indices: idx,
        })
    }
}

fn augment_image(img: &[f64], c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    const PAD: i32 = 4;
    let flip = rng.random::<f64>() < 0.5;
    let dy = rng.random_range(-PAD..=PAD) as isize;
    let dx = rng.random_range(-PAD..=PAD) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Parameters of the procedural image-classification task used when no image files are
/// configured.
///
/// Each class owns a few small colour motifs; an image places its class motifs (each with
/// probability `motif_keep`) at random positions over noise, adds `distractors` motifs from
/// other classes, and a fraction `label_noise` of labels is resampled uniformly. Pixels are
/// quantized to bytes so the images are exactly representable in the on-disk formats.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub motif_size: usize,
    pub motifs_per_class: usize,
    pub motif_keep: f64,
    pub distractors: usize,
    pub noise: f64,
    pub label_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            channels: 3,
            height: 8,
            width: 8,
            classes: 10,
            motif_size: 3,
            motifs_per_class: 3,
            motif_keep: 0.8,
            distractors: 2,
            noise: 0.15,
            label_noise: 0.1,
        }
    }
}

/// Generates `n` images of the synthetic task. The motif bank depends only on `task_seed`,
/// so datasets generated with different `sample_seed`s share one task.
pub fn synthetic(spec: &SyntheticSpec, n: usize, task_seed: u64, sample_seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    if spec.motif_size > spec.height || spec.motif_size > spec.width {
        return Err(Error::Config("motif larger than the image".into()));
    }
    let (c, h, w, m) = (spec.channels, spec.height, spec.width, spec.motif_size);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut task = seed::stream(task_seed, "synthetic-task", 0, 0);
    let bank: Vec<Vec<f64>> = (0..spec.classes * spec.motifs_per_class)
        .map(|_| {
            let v: Vec<f64> = (0..c * m * m).map(|_| unit.sample(&mut task)).collect();
            let nrm = crate::tensor::norm2(&v);
            v.iter().map(|x| x / nrm * (c * m * m) as f64 / 4.0).collect()
        })
        .collect();

    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut rng = seed::stream(sample_seed, "synthetic-sample", 0, 0);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");
    for _ in 0..n {
        let label = rng.random_range(0..spec.classes);
        let mut img: Vec<f64> = (0..c * h * w).map(|_| noise.sample(&mut rng)).collect();
        let mut stamp = |id: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let y0 = rng.random_range(0..=h - m);
            let x0 = rng.random_range(0..=w - m);
            let amp = rng.random_range(0.6..1.2);
            for ch in 0..c {
                for dy in 0..m {
                    for dx in 0..m {
                        img[(ch * h + y0 + dy) * w + x0 + dx] += amp * bank[id][(ch * m + dy) * m + dx];
                    }
                }
            }
        };
        for k in 0..spec.motifs_per_class {
            if rng.random::<f64>() < spec.motif_keep {
                stamp(label * spec.motifs_per_class + k, &mut rng);
            }
        }
        for _ in 0..spec.distractors {
            let other = (label + rng.random_range(1..spec.classes)) % spec.classes;
            let k = rng.random_range(0..spec.motifs_per_class);
            stamp(other * spec.motifs_per_class + k, &mut rng);
        }
        let shown = if rng.random::<f64>() < spec.label_noise {
            rng.random_range(0..spec.classes)
        } else {
            label
        };
        labels.push(shown);
        data.extend(img.iter().map(|v| f64::from(to_byte(0.5 + 0.25 * v)) / 255.0));
    }
    Ok(Dataset {
        images: Tensor::new(&[n, c, h, w], data)?,
        labels,
        num_classes: spec.classes,
    })
}
