//! Dataset ingestion, normalisation, batching and the accumulated
//! criterion batch used by the sensitivity scores.

pub mod idx;
mod synthetic;

pub use synthetic::synthetic_blobs;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// MNIST pixel statistics applied after scaling to [0, 1].
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

/// Samples fed to one elasticity evaluation, accumulated over sub-batches.
pub const CRITERION_BATCH_SIZE: usize = 2560;
pub const CRITERION_SUB_BATCH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Immutable image-classification dataset, images `N×C×H×W`.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    pub split: Split,
    /// Per-channel (mean, std) applied at load time; empty if raw.
    pub normalisation: Vec<(f64, f64)>,
    normalised: bool,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::ShapeMismatch { expected: vec![0, 0, 0, 0], got: images.shape().to_vec() });
        }
        if images.batch() != labels.len() {
            return Err(Error::CountMismatch { images: images.batch(), labels: labels.len() });
        }
        for &y in &labels {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
        }
        Ok(Dataset { images, labels, split, normalisation: Vec::new(), normalised: false })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample extents `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Shifts every pixel by `(x - mean) / std`, once; further calls error.
    pub fn normalise(&mut self, mean: f64, std: f64) -> Result<()> {
        if self.normalised {
            return Err(Error::InvalidDimension("dataset already normalised".into()));
        }
        for v in self.images.data_mut() {
            *v = (*v - mean) / std;
        }
        self.normalisation = vec![(mean, std); self.sample_shape()[0]];
        self.normalised = true;
        Ok(())
    }

    /// Marks generated-in-normalised-space data so the guard still applies.
    pub fn mark_normalised(&mut self) {
        self.normalised = true;
    }

    /// Copies the given rows into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sample = self.images.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..][..sample]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::from_vec(&shape, data), labels)
    }

    /// First `n` samples as a new dataset (deterministic subset).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&indices);
        Dataset {
            images,
            labels,
            split: self.split,
            normalisation: self.normalisation.clone(),
            normalised: self.normalised,
        }
    }
}

/// Loads an IDX image/label pair as a normalised MNIST-style dataset:
/// pixels scaled to [0, 1] then shifted by the pinned MNIST statistics,
/// labels validated against 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (bytes, n, rows, cols) = idx::read_images_raw(images_path)?;
    let labels_raw = idx::read_labels_raw(labels_path)?;
    if labels_raw.len() != n {
        return Err(Error::CountMismatch { images: n, labels: labels_raw.len() });
    }
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::from_vec(&[n, 1, rows, cols], data);
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let mut ds = Dataset::new(images, labels, 10, split)?;
    ds.normalise(MNIST_MEAN, MNIST_STD)?;
    Ok(ds)
}

/// Shuffled full-coverage pass over a dataset; every epoch is a permutation
/// (final partial batch kept).
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    flip_probability: f64,
    rng: ChaCha8Rng,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        BatchIterator { dataset, order, batch_size, flip_probability: 0.0, rng, pos: 0 }
    }

    pub fn with_flip(mut self, probability: f64) -> Self {
        self.flip_probability = probability;
        self
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let (mut x, y) = self.dataset.gather(&self.order[self.pos..end]);
        self.pos = end;
        if self.flip_probability > 0.0 {
            x = augment(&x, self.flip_probability, &mut self.rng).expect("4-D batch");
        }
        Some((x, y))
    }
}

/// Mirrors each image on its width axis independently with the given
/// probability. Double application with probability 1 is the identity.
pub fn augment(batch: &Tensor, flip_probability: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch { expected: vec![0, 0, 0, 0], got: shape.to_vec() });
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = batch.data().to_vec();
    for i in 0..n {
        if rng.gen::<f64>() >= flip_probability {
            continue;
        }
        for ch in 0..c {
            for row in 0..h {
                let off = ((i * c + ch) * h + row) * w;
                out[off..off + w].reverse();
            }
        }
    }
    Ok(Tensor::from_vec(shape, out))
}

/// Uniform sample without replacement of `size` images, returned as
/// sub-batches of at most [`CRITERION_SUB_BATCH`] for bounded-memory
/// gradient accumulation. Falls back to the whole dataset with a warning
/// when it is too small.
pub fn criterion_batch(
    dataset: &Dataset,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Tensor, Vec<usize>)> {
    let take = if dataset.len() < size {
        log::warn!(
            "criterion batch wants {size} samples but dataset has {}; using all of it",
            dataset.len()
        );
        dataset.len()
    } else {
        size
    };
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    // Partial Fisher-Yates: first `take` entries are the sample.
    for i in 0..take {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    indices[..take].chunks(CRITERION_SUB_BATCH).map(|c| dataset.gather(c)).collect()
}
