use crate::error::{Error, Result};
use crate::linalg::{self, CsrWeights};
use crate::tensor::Tensor;

/// Density below which the masked-weight CSR kernels take over from dense
/// GEMM. Both paths iterate deterministically; the dense kernel has ~8x the
/// per-element throughput, so sparsity only pays once it is extreme.
const SPARSE_DENSITY_CUTOFF: f64 = 0.1;

/// Fully connected layer, weight stored `[out, in]` row-major.
///
/// Each output node carries an auxiliary gate fixed at 1 that scales the
/// pre-activation; its gradient is the node-importance signal. `node_mask`
/// records structural pruning decisions.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub weight_mask: Tensor,
    pub bias_mask: Tensor,
    pub node_mask: Vec<f64>,
    pub gate: Vec<f64>,
    pub gate_grad: Vec<f64>,
    mask_all_ones: bool,
    csr: Option<CsrWeights>,
    csr_stale: bool,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
            weight_mask: Tensor::ones(&[out_features, in_features]),
            bias_mask: Tensor::ones(&[out_features]),
            node_mask: vec![1.0; out_features],
            gate: vec![1.0; out_features],
            gate_grad: vec![0.0; out_features],
            mask_all_ones: true,
            csr: None,
            csr_stale: true,
        }
    }

    pub fn density(&self) -> f64 {
        let unmasked = self.weight_mask.data().iter().filter(|&&m| m != 0.0).count();
        unmasked as f64 / self.weight_mask.len() as f64
    }

    /// Must be called after any mask edit: re-applies the masks to the
    /// stored values and invalidates the sparse kernel cache.
    pub fn sync_masks(&mut self) {
        let mask = self.weight_mask.data();
        for (w, m) in self.weight.data_mut().iter_mut().zip(mask.iter()) {
            if *m == 0.0 {
                *w = 0.0;
            }
        }
        let bmask = self.bias_mask.data();
        for (b, m) in self.bias.data_mut().iter_mut().zip(bmask.iter()) {
            if *m == 0.0 {
                *b = 0.0;
            }
        }
        self.mask_all_ones = self.weight_mask.data().iter().all(|&m| m != 0.0);
        self.csr_stale = true;
    }

    fn use_sparse(&self) -> bool {
        !self.mask_all_ones && self.density() <= SPARSE_DENSITY_CUTOFF
    }

    fn refresh_csr(&mut self) {
        if self.csr_stale {
            self.csr = if self.use_sparse() {
                Some(CsrWeights::from_masked(
                    self.weight.data(),
                    self.weight_mask.data(),
                    self.out_features,
                    self.in_features,
                ))
            } else {
                None
            };
            self.csr_stale = false;
        } else if let Some(csr) = &mut self.csr {
            // Structure unchanged; pull in the current weight values.
            let w = self.weight.data();
            for o in 0..csr.rows {
                for j in csr.row_ptr[o]..csr.row_ptr[o + 1] {
                    csr.vals[j] = w[o * csr.cols + csr.col_idx[j] as usize];
                }
            }
        }
    }

    /// Effective weights (param ⊙ mask). Returns a borrowed slice when the
    /// mask is all ones.
    fn effective_weights(&self) -> std::borrow::Cow<'_, [f64]> {
        if self.mask_all_ones {
            std::borrow::Cow::Borrowed(self.weight.data())
        } else {
            std::borrow::Cow::Owned(
                self.weight
                    .data()
                    .iter()
                    .zip(self.weight_mask.data())
                    .map(|(w, m)| w * m)
                    .collect(),
            )
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let batch = x.batch();
        if x.sample_len() != self.in_features {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, self.in_features],
                got: x.shape().to_vec(),
            });
        }
        self.refresh_csr();
        let mut y = vec![0.0; batch * self.out_features];
        if let Some(csr) = &self.csr {
            let mut xt = vec![0.0; x.len()];
            linalg::transpose(x.data(), batch, self.in_features, &mut xt);
            let mut yt = vec![0.0; y.len()];
            linalg::csr_forward_t(csr, &xt, batch, &mut yt);
            linalg::transpose(&yt, self.out_features, batch, &mut y);
        } else {
            let w = self.effective_weights();
            linalg::gemm(batch, self.in_features, self.out_features, 1.0, x.data(), false, &w, true, 0.0, &mut y);
        }
        let bias = self.bias.data();
        let bmask = self.bias_mask.data();
        for b in 0..batch {
            let row = &mut y[b * self.out_features..][..self.out_features];
            for o in 0..self.out_features {
                row[o] = self.gate[o] * (row[o] + bias[o] * bmask[o]);
            }
        }
        Ok(Tensor::from_vec(&[batch, self.out_features], y))
    }

    /// Assumes gates are at 1 so the cached layer output equals the
    /// pre-activation (asserted).
    pub fn backward(&mut self, input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Tensor {
        debug_assert!(self.gate.iter().all(|&g| g == 1.0), "backward requires unit gates");
        let batch = input.batch();
        let (inf, outf) = (self.in_features, self.out_features);

        // Gate gradient: d/dc of c*z summed over the batch, z == output at c=1.
        for o in 0..outf {
            let mut s = 0.0;
            for b in 0..batch {
                s += grad_out.data()[b * outf + o] * output.data()[b * outf + o];
            }
            self.gate_grad[o] = s;
        }

        // Bias gradient (zero where the bias is masked).
        {
            let bmask = self.bias_mask.data().to_vec();
            let g = self.bias.grad_or_init();
            for o in 0..outf {
                let mut s = 0.0;
                for b in 0..batch {
                    s += grad_out.data()[b * outf + o];
                }
                g[o] = s * bmask[o];
            }
        }

        let mut grad_in = vec![0.0; batch * inf];
        if let Some(csr) = &self.csr {
            let mut dyt = vec![0.0; grad_out.len()];
            linalg::transpose(grad_out.data(), batch, outf, &mut dyt);
            let mut xt = vec![0.0; input.len()];
            linalg::transpose(input.data(), batch, inf, &mut xt);

            let dw = self.weight.grad_or_init();
            linalg::csr_backward_weight_t(csr, &dyt, &xt, batch, dw);

            let mut dxt = vec![0.0; batch * inf];
            linalg::csr_backward_data_t(csr, &dyt, batch, &mut dxt);
            linalg::transpose(&dxt, inf, batch, &mut grad_in);
        } else {
            let w = self.effective_weights().into_owned();
            {
                let dw = self.weight.grad_or_init();
                linalg::gemm(outf, batch, inf, 1.0, grad_out.data(), true, input.data(), false, 0.0, dw);
                if !self.mask_all_ones {
                    for (g, m) in dw.iter_mut().zip(self.weight_mask.data()) {
                        *g *= m;
                    }
                }
            }
            linalg::gemm(batch, outf, inf, 1.0, grad_out.data(), false, &w, false, 0.0, &mut grad_in);
        }
        Tensor::from_vec(&[batch, inf], grad_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_linear(inf: usize, outf: usize) -> Linear {
        let mut l = Linear::new(inf, outf);
        for (i, w) in l.weight.data_mut().iter_mut().enumerate() {
            *w = ((i * 37 + 11) % 17) as f64 / 17.0 - 0.5;
        }
        for (i, b) in l.bias.data_mut().iter_mut().enumerate() {
            *b = i as f64 * 0.1 - 0.2;
        }
        l
    }

    #[test]
    fn forward_matches_manual() {
        let mut l = seeded_linear(3, 2);
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]);
        let y = l.forward(&x).unwrap();
        let w = l.weight.data();
        let b = l.bias.data();
        for o in 0..2 {
            let want = w[o * 3] * 1.0 + w[o * 3 + 1] * -2.0 + w[o * 3 + 2] * 0.5 + b[o];
            assert!((y.data()[o] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn masked_weight_contributes_zero() {
        let mut l = seeded_linear(4, 3);
        let x = Tensor::from_vec(&[2, 4], (0..8).map(|i| i as f64 * 0.3).collect());
        l.weight_mask.data_mut()[5] = 0.0;
        l.sync_masks();
        let y_masked = l.forward(&x).unwrap();

        let mut l2 = seeded_linear(4, 3);
        l2.weight.data_mut()[5] = 0.0;
        let y_zeroed = l2.forward(&x).unwrap();
        assert_eq!(y_masked.data(), y_zeroed.data());
    }

    #[test]
    fn sparse_and_dense_paths_agree() {
        let mut l = seeded_linear(10, 8);
        // Mask 95% -> sparse path kicks in.
        for i in 0..80 {
            if i % 20 < 19 {
                l.weight_mask.data_mut()[i] = 0.0;
            }
        }
        l.sync_masks();
        let x = Tensor::from_vec(&[3, 10], (0..30).map(|i| (i as f64 * 0.21).sin()).collect());
        let y_sparse = l.forward(&x).unwrap();
        assert!(l.csr.is_some());

        // Dense reference with the same masked weights.
        let w: Vec<f64> =
            l.weight.data().iter().zip(l.weight_mask.data()).map(|(a, b)| a * b).collect();
        for bidx in 0..3 {
            for o in 0..8 {
                let mut want = l.bias.data()[o];
                for i in 0..10 {
                    want += w[o * 10 + i] * x.data()[bidx * 10 + i];
                }
                assert!((y_sparse.data()[bidx * 8 + o] - want).abs() < 1e-12);
            }
        }
    }
}
