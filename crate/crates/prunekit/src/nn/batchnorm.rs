use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Batch normalisation over features (1-D) or channels (2-D).
///
/// Training mode normalises with biased batch statistics and updates the
/// running estimates as `running = (1-momentum)*running + momentum*batch`
/// (unbiased variance for the running update). Eval mode uses the running
/// statistics only.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub features: usize,
    pub spatial: bool,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache_mean: Vec<f64>,
    cache_invstd: Vec<f64>,
    cache_train: bool,
}

impl BatchNorm {
    pub fn new(features: usize, spatial: bool) -> Self {
        BatchNorm {
            features,
            spatial,
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
            cache_mean: Vec::new(),
            cache_invstd: Vec::new(),
            cache_train: false,
        }
    }

    pub fn reset_running_stats(&mut self) {
        self.running_mean.iter_mut().for_each(|v| *v = 0.0);
        self.running_var.iter_mut().for_each(|v| *v = 1.0);
    }

    fn check_shape(&self, x: &Tensor) -> Result<(usize, usize)> {
        let shape = x.shape();
        let ok = if self.spatial {
            shape.len() == 4 && shape[1] == self.features
        } else {
            shape.len() == 2 && shape[1] == self.features
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                expected: vec![0, self.features],
                got: shape.to_vec(),
            });
        }
        let spatial_size = if self.spatial { shape[2] * shape[3] } else { 1 };
        Ok((shape[0], spatial_size))
    }

    /// Iterates channel `c`'s contiguous blocks: (batch index, block offset).
    fn channel_blocks(&self, batch: usize, spatial: usize, c: usize) -> impl Iterator<Item = usize> {
        let ch = self.features;
        (0..batch).map(move |b| (b * ch + c) * spatial)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (batch, spatial) = self.check_shape(x)?;
        let n = batch * spatial;
        let mut y = vec![0.0; x.len()];
        let train = mode == Mode::Train;
        self.cache_train = train;
        self.cache_mean = vec![0.0; self.features];
        self.cache_invstd = vec![0.0; self.features];

        for c in 0..self.features {
            let (mean, var) = if train {
                let mut s = 0.0;
                for off in self.channel_blocks(batch, spatial, c) {
                    s += x.data()[off..off + spatial].iter().sum::<f64>();
                }
                let mean = s / n as f64;
                let mut v = 0.0;
                for off in self.channel_blocks(batch, spatial, c) {
                    for &xv in &x.data()[off..off + spatial] {
                        let d = xv - mean;
                        v += d * d;
                    }
                }
                let var = v / n as f64;
                let unbiased = if n > 1 { v / (n - 1) as f64 } else { var };
                self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean;
                self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * unbiased;
                (mean, var)
            } else {
                (self.running_mean[c], self.running_var[c])
            };
            let invstd = 1.0 / (var + self.eps).sqrt();
            self.cache_mean[c] = mean;
            self.cache_invstd[c] = invstd;
            let g = self.gamma.data()[c];
            let b = self.beta.data()[c];
            for off in self.channel_blocks(batch, spatial, c) {
                let src = &x.data()[off..off + spatial];
                let dst = &mut y[off..off + spatial];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = g * (s - mean) * invstd + b;
                }
            }
        }
        Ok(Tensor::from_vec(x.shape(), y))
    }

    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        let (batch, spatial) = self.check_shape(input).expect("validated in forward");
        let n = (batch * spatial) as f64;
        let mut dx = vec![0.0; input.len()];
        let dgamma = vec![0.0; self.features];
        let dbeta = vec![0.0; self.features];
        self.gamma.set_grad(dgamma);
        self.beta.set_grad(dbeta);

        for c in 0..self.features {
            let mean = self.cache_mean[c];
            let invstd = self.cache_invstd[c];
            let g = self.gamma.data()[c];

            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for off in self.channel_blocks(batch, spatial, c) {
                let dy = &grad_out.data()[off..off + spatial];
                let xv = &input.data()[off..off + spatial];
                for (d, x) in dy.iter().zip(xv) {
                    sum_dy += d;
                    sum_dy_xhat += d * (x - mean) * invstd;
                }
            }
            self.gamma.grad_or_init()[c] = sum_dy_xhat;
            self.beta.grad_or_init()[c] = sum_dy;

            if self.cache_train {
                // dx = (g*invstd/n) * (n*dy - sum_dy - xhat*sum_dy_xhat)
                let scale = g * invstd / n;
                for off in self.channel_blocks(batch, spatial, c) {
                    let dy = &grad_out.data()[off..off + spatial];
                    let xv = &input.data()[off..off + spatial];
                    let dst = &mut dx[off..off + spatial];
                    for ((d, &dyv), &x) in dst.iter_mut().zip(dy).zip(xv) {
                        let xhat = (x - mean) * invstd;
                        *d = scale * (n * dyv - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            } else {
                let scale = g * invstd;
                for off in self.channel_blocks(batch, spatial, c) {
                    let dy = &grad_out.data()[off..off + spatial];
                    let dst = &mut dx[off..off + spatial];
                    for (d, &dyv) in dst.iter_mut().zip(dy) {
                        *d = scale * dyv;
                    }
                }
            }
        }
        Tensor::from_vec(input.shape(), dx)
    }
}
