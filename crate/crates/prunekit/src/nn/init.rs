use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{Layer, Model};
use crate::tensor::Tensor;

/// Gain that keeps signal variance constant through a LeakyReLU:
/// `sqrt(2 / (1 + slope^2))`.
pub fn leaky_relu_gain(negative_slope: f64) -> f64 {
    (2.0 / (1.0 + negative_slope * negative_slope)).sqrt()
}

/// Orthogonal initialisation scaled by the LeakyReLU gain.
///
/// Every Linear/Conv weight is flattened to 2-D; whichever of rows/columns
/// is fewer becomes an orthonormal set. Biases are zeroed and batch-norm
/// layers reset. Deterministic under `seed`.
pub fn init_orthogonal(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = leaky_relu_gain(0.05);
    for layer in &mut model.layers {
        match layer {
            Layer::Linear(l) => {
                orthogonal_fill(&mut l.weight, gain, &mut rng);
                l.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
                l.sync_masks();
            }
            Layer::Conv2d(c) => {
                orthogonal_fill(&mut c.weight, gain, &mut rng);
                c.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
                c.sync_masks();
            }
            Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b) => {
                b.gamma.data_mut().iter_mut().for_each(|v| *v = 1.0);
                b.beta.data_mut().iter_mut().for_each(|v| *v = 0.0);
                b.reset_running_stats();
            }
            _ => {}
        }
    }
}

fn orthogonal_fill(weight: &mut Tensor, gain: f64, rng: &mut ChaCha8Rng) {
    let rows = weight.shape()[0];
    let cols = weight.len() / rows;
    let mut g: Vec<f64> = (0..weight.len()).map(|_| StandardNormal.sample(rng)).collect();
    if rows <= cols {
        orthonormalize_rows(&mut g, rows, cols);
    } else {
        // Orthonormalise columns: work on the transpose.
        let mut gt = vec![0.0; g.len()];
        crate::linalg::transpose(&g, rows, cols, &mut gt);
        orthonormalize_rows(&mut gt, cols, rows);
        crate::linalg::transpose(&gt, cols, rows, &mut g);
    }
    for (w, v) in weight.data_mut().iter_mut().zip(&g) {
        *w = gain * v;
    }
}

/// Modified Gram-Schmidt with a re-orthogonalisation pass.
fn orthonormalize_rows(m: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for _pass in 0..2 {
            for j in 0..i {
                let mut dot = 0.0;
                for c in 0..cols {
                    dot += m[i * cols + c] * m[j * cols + c];
                }
                for c in 0..cols {
                    m[i * cols + c] -= dot * m[j * cols + c];
                }
            }
        }
        let norm: f64 = m[i * cols..][..cols].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate draw during orthogonal init");
        for c in 0..cols {
            m[i * cols + c] /= norm;
        }
    }
}
