//! Image I/O, the deterministic PRNG, synthetic phantoms and dataset
//! splitting/batching.

mod pgm;
mod phantom;
mod prng;

use std::fmt;
use std::fs;
use std::path::Path;

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use phantom::{generate_phantoms, portable_sin_cos, render_phantom, Ellipse};
pub use prng::Prng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One grayscale slice and its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(H, W)` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: String, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let image = match image.rank() {
            2 => {
                let (h, w) = (image.dims()[0], image.dims()[1]);
                image.reshape(&[1, h, w])?
            }
            3 if image.dims()[0] == 1 => image,
            _ => return Err(Error::shape(format!("sample {id}: image must be 1×H×W, got {}", image.shape()))),
        };
        if mask.rank() != 2 || mask.dims() != &image.dims()[1..] {
            return Err(Error::shape(format!(
                "sample {id}: mask {} does not match image {}",
                mask.shape(),
                image.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format(format!("sample {id}: mask is not binary")));
        }
        Ok(Sample { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.dims()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::format(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered samples with a train/validation assignment each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        let splits = vec![Split::Train; samples.len()];
        Dataset { samples, splits }
    }

    pub fn with_splits(samples: Vec<Sample>, splits: Vec<Split>) -> Result<Self> {
        if samples.len() != splits.len() {
            return Err(Error::InvalidArgument("one split assignment per sample required".into()));
        }
        Ok(Dataset { samples, splits })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices assigned to `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Seeded shuffle, then the first `round(train_fraction · n)` samples go to
/// training and the rest to validation.
pub fn split(dataset: Dataset, train_fraction: f64, seed: u64) -> Result<Dataset> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("split needs at least 2 samples, got {n}")));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Prng::new(seed).shuffle(&mut order);
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut splits = vec![Split::Val; n];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    Dataset::with_splits(dataset.samples, splits)
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(N, 1, H, W)`
    pub images: Tensor<f32>,
    /// `(N, H, W)`
    pub masks: Tensor<f32>,
}

/// Stacks the given samples in order.
pub fn stack_samples(dataset: &Dataset, indices: &[usize]) -> Result<Batch> {
    let picked: Vec<&Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
    let images: Vec<Tensor<f32>> = picked.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor<f32>> = picked.iter().map(|s| s.mask.clone()).collect();
    Ok(Batch {
        ids: picked.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::stack(&images)?,
        masks: Tensor::stack(&masks)?,
    })
}

/// Index groups of one epoch: `part` shuffled with `epoch_seed`, chunked by
/// `batch_size`, final partial batch kept.
pub fn batch_indices(part: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if part.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order = part.to_vec();
    Prng::new(epoch_seed).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Lazily stacked batches of one epoch.
pub fn batches<'a>(
    dataset: &'a Dataset,
    part: &[usize],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let groups = batch_indices(part, batch_size, epoch_seed)?;
    Ok(groups.into_iter().map(move |g| stack_samples(dataset, &g)))
}

const MANIFEST: &str = "manifest.tsv";

/// Writes `img_<id>.pgm`, `mask_<id>.pgm` and `manifest.tsv` (`id<TAB>split`).
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (s, split) in dataset.samples.iter().zip(&dataset.splits) {
        write_pgm(&dir.join(format!("img_{}.pgm", s.id)), &s.image)?;
        write_pgm(&dir.join(format!("mask_{}.pgm", s.id)), &s.mask)?;
        manifest.push_str(&format!("{}\t{}\n", s.id, split));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, split) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("{}:{}: expected id<TAB>split", path.display(), lineno + 1)))?;
        let image = read_pgm(&dir.join(format!("img_{id}.pgm")))?;
        let mask = read_pgm(&dir.join(format!("mask_{id}.pgm")))?;
        let mask = mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        samples.push(Sample::new(id.to_string(), image, mask)?);
        splits.push(split.parse()?);
    }
    if samples.is_empty() {
        return Err(Error::format(format!("{}: no samples listed", path.display())));
    }
    Dataset::with_splits(samples, splits)
}
