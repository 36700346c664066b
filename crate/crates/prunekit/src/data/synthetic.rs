use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian class blobs in normalised feature space: each class gets a
/// centre drawn from `N(0, separation^2)` per coordinate and unit-variance
/// noise around it. Deterministic under `seed`.
pub fn synthetic_blobs(
    n_classes: usize,
    n_per_class: usize,
    dims: &[usize],
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || n_per_class == 0 || dims.iter().product::<usize>() == 0 {
        return Err(Error::InvalidDimension(format!(
            "blobs need positive classes/samples/dims: {n_classes}/{n_per_class}/{dims:?}"
        )));
    }
    let feat: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            (0..feat)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    separation * z
                })
                .collect()
        })
        .collect();

    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * feat);
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        for _ in 0..n_per_class {
            for f in 0..feat {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(centres[class][f] + noise);
            }
            labels.push(class);
        }
    }
    let mut shape = vec![n];
    // Canonical N×C×H×W; flat feature vectors become N×1×1×F.
    match dims.len() {
        3 => shape.extend_from_slice(dims),
        1 => shape.extend_from_slice(&[1, 1, dims[0]]),
        _ => {
            return Err(Error::InvalidDimension(format!(
                "blob dims must be [F] or [C,H,W], got {dims:?}"
            )))
        }
    }
    let mut ds = Dataset::new(Tensor::from_vec(&shape, data), labels, n_classes, Split::Train)?;
    ds.mark_normalised();
    Ok(ds)
}
