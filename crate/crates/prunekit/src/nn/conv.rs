use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// 2-D convolution, weight stored `[out_ch, in_ch, k, k]`, square kernel.
/// Forward and backward run through im2col + GEMM over sample chunks.
///
/// One gate per output channel scales the whole pre-activation map.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub weight_mask: Tensor,
    pub bias_mask: Tensor,
    pub node_mask: Vec<f64>,
    pub gate: Vec<f64>,
    pub gate_grad: Vec<f64>,
    mask_all_ones: bool,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
            weight_mask: Tensor::ones(&[out_channels, in_channels, kernel, kernel]),
            bias_mask: Tensor::ones(&[out_channels]),
            node_mask: vec![1.0; out_channels],
            gate: vec![1.0; out_channels],
            gate_grad: vec![0.0; out_channels],
            mask_all_ones: true,
        }
    }

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
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::InvalidDimension(format!(
                "conv kernel {} exceeds padded input {}x{}",
                self.kernel, hp, wp
            )));
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

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

    fn chunk_size(&self, spatial_out: usize) -> usize {
        // Bound the im2col scratch buffer at ~16 MB.
        let per_sample = self.in_channels * self.kernel * self.kernel * spatial_out;
        (2_000_000 / per_sample.max(1)).clamp(1, 16)
    }

    /// Gather input patches for samples [s0, s1) into `col`, laid out
    /// `[in_ch*k*k][n_local*oh*ow]`.
    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, x: &[f64], s0: usize, s1: usize, h: usize, w: usize, oh: usize, ow: usize, col: &mut [f64]) {
        let k = self.kernel;
        let n_local = s1 - s0;
        let cols = n_local * oh * ow;
        let sample_stride = self.in_channels * h * w;
        for ci in 0..self.in_channels {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kh) * k + kw) * cols;
                    for (sl, s) in (s0..s1).enumerate() {
                        let base = s * sample_stride + ci * h * w;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + kh) as isize - self.padding as isize;
                            let out_off = row + (sl * oh + oy) * ow;
                            if iy < 0 || iy >= h as isize {
                                col[out_off..out_off + ow].iter_mut().for_each(|v| *v = 0.0);
                                continue;
                            }
                            let in_row = base + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kw) as isize - self.padding as isize;
                                col[out_off + ox] = if ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    x[in_row + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add the patch-space gradient back onto the input gradient.
    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, col: &[f64], s0: usize, s1: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let n_local = s1 - s0;
        let cols = n_local * oh * ow;
        let sample_stride = self.in_channels * h * w;
        for ci in 0..self.in_channels {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kh) * k + kw) * cols;
                    for (sl, s) in (s0..s1).enumerate() {
                        let base = s * sample_stride + ci * h * w;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + kh) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = base + iy as usize * w;
                            let out_off = row + (sl * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kw) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    dx[in_row + ix as usize] += col[out_off + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![0, self.in_channels, 0, 0],
                got: shape.to_vec(),
            });
        }
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let (oh, ow) = self.out_spatial(h, w)?;
        let spatial = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let weights = self.effective_weights();

        let mut y = vec![0.0; batch * self.out_channels * spatial];
        let chunk = self.chunk_size(spatial);
        let mut col = vec![0.0; kk * chunk * spatial];
        let mut out = vec![0.0; self.out_channels * chunk * spatial];
        let bias = self.bias.data();
        let bmask = self.bias_mask.data();

        let mut s0 = 0;
        while s0 < batch {
            let s1 = (s0 + chunk).min(batch);
            let n_local = s1 - s0;
            let cols = n_local * spatial;
            self.im2col(x.data(), s0, s1, h, w, oh, ow, &mut col[..kk * cols]);
            linalg::gemm(
                self.out_channels,
                kk,
                cols,
                1.0,
                &weights,
                false,
                &col[..kk * cols],
                false,
                0.0,
                &mut out[..self.out_channels * cols],
            );
            for co in 0..self.out_channels {
                let g = self.gate[co];
                let b = bias[co] * bmask[co];
                for sl in 0..n_local {
                    let src = &out[co * cols + sl * spatial..][..spatial];
                    let dst = &mut y[((s0 + sl) * self.out_channels + co) * spatial..][..spatial];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = g * (s + b);
                    }
                }
            }
            s0 = s1;
        }
        Ok(Tensor::from_vec(&[batch, self.out_channels, oh, ow], y))
    }

    pub fn backward(&mut self, input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Tensor {
        debug_assert!(self.gate.iter().all(|&g| g == 1.0), "backward requires unit gates");
        let shape = input.shape();
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let (oh, ow) = self.out_spatial(h, w).expect("shape already validated in forward");
        let spatial = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let weights = self.effective_weights().into_owned();

        // Gate gradients: sum over batch and spatial positions.
        for co in 0..self.out_channels {
            let mut s = 0.0;
            for b in 0..batch {
                let off = (b * self.out_channels + co) * spatial;
                let go = &grad_out.data()[off..off + spatial];
                let z = &output.data()[off..off + spatial];
                for (g, zv) in go.iter().zip(z) {
                    s += g * zv;
                }
            }
            self.gate_grad[co] = s;
        }

        {
            let bmask = self.bias_mask.data().to_vec();
            let db = self.bias.grad_or_init();
            for co in 0..self.out_channels {
                let mut s = 0.0;
                for b in 0..batch {
                    let off = (b * self.out_channels + co) * spatial;
                    s += grad_out.data()[off..off + spatial].iter().sum::<f64>();
                }
                db[co] = s * bmask[co];
            }
        }

        let mut dx = vec![0.0; input.len()];
        let chunk = self.chunk_size(spatial);
        let mut col = vec![0.0; kk * chunk * spatial];
        let mut dz = vec![0.0; self.out_channels * chunk * spatial];
        let mut dcol = vec![0.0; kk * chunk * spatial];
        {
            let dw = self.weight.grad_or_init();
            dw.iter_mut().for_each(|v| *v = 0.0);
        }

        let mut s0 = 0;
        while s0 < batch {
            let s1 = (s0 + chunk).min(batch);
            let n_local = s1 - s0;
            let cols = n_local * spatial;

            // Regroup grad_out into [out_ch][n_local*spatial].
            for co in 0..self.out_channels {
                for sl in 0..n_local {
                    let src = &grad_out.data()[((s0 + sl) * self.out_channels + co) * spatial..][..spatial];
                    dz[co * cols + sl * spatial..][..spatial].copy_from_slice(src);
                }
            }

            self.im2col(input.data(), s0, s1, h, w, oh, ow, &mut col[..kk * cols]);
            {
                let dw = self.weight.grad_or_init();
                linalg::gemm(
                    self.out_channels,
                    cols,
                    kk,
                    1.0,
                    &dz[..self.out_channels * cols],
                    false,
                    &col[..kk * cols],
                    true,
                    1.0,
                    dw,
                );
            }
            linalg::gemm(
                kk,
                self.out_channels,
                cols,
                1.0,
                &weights,
                true,
                &dz[..self.out_channels * cols],
                false,
                0.0,
                &mut dcol[..kk * cols],
            );
            self.col2im(&dcol[..kk * cols], s0, s1, h, w, oh, ow, &mut dx);
            s0 = s1;
        }

        if !self.mask_all_ones {
            let mask = self.weight_mask.data().to_vec();
            let dw = self.weight.grad_or_init();
            for (g, m) in dw.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        Tensor::from_vec(input.shape(), dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution, the slow reference.
    fn conv_reference(l: &Conv2d, x: &Tensor) -> Tensor {
        let (batch, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = l.out_spatial(h, w).unwrap();
        let mut y = vec![0.0; batch * l.out_channels * oh * ow];
        let wdat = l.weight.data();
        let mdat = l.weight_mask.data();
        for b in 0..batch {
            for co in 0..l.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = l.bias.data()[co] * l.bias_mask.data()[co];
                        for ci in 0..l.in_channels {
                            for kh in 0..l.kernel {
                                for kw in 0..l.kernel {
                                    let iy = (oy * l.stride + kh) as isize - l.padding as isize;
                                    let ix = (ox * l.stride + kw) as isize - l.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let widx = ((co * l.in_channels + ci) * l.kernel + kh) * l.kernel + kw;
                                    acc += wdat[widx]
                                        * mdat[widx]
                                        * x.data()[((b * l.in_channels + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        y[((b * l.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[batch, l.out_channels, oh, ow], y)
    }

    #[test]
    fn forward_matches_reference() {
        let mut l = Conv2d::new(2, 3, 3, 1, 1);
        for (i, w) in l.weight.data_mut().iter_mut().enumerate() {
            *w = ((i * 13 + 7) % 19) as f64 / 19.0 - 0.5;
        }
        for (i, b) in l.bias.data_mut().iter_mut().enumerate() {
            *b = i as f64 * 0.25;
        }
        // Mask a few taps so the masked path is exercised too.
        l.weight_mask.data_mut()[4] = 0.0;
        l.weight_mask.data_mut()[20] = 0.0;
        l.sync_masks();

        let x = Tensor::from_vec(&[2, 2, 5, 5], (0..100).map(|i| (i as f64 * 0.17).sin()).collect());
        let got = l.forward(&x).unwrap();
        let want = conv_reference(&l, &x);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_unpadded_shapes() {
        let l = Conv2d::new(1, 1, 2, 2, 0);
        assert_eq!(l.out_spatial(28, 28).unwrap(), (14, 14));
        assert_eq!(l.out_spatial(5, 5).unwrap(), (2, 2));
    }
}
