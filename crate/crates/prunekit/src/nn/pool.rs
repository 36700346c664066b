use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pooling; ties resolve to the first (lowest-index) element.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    argmax: Vec<u32>,
    in_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        MaxPool2d { kernel, stride, argmax: Vec::new(), in_shape: Vec::new() }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch { expected: vec![0, 0, 0, 0], got: shape.to_vec() });
        }
        let (batch, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h < self.kernel || w < self.kernel {
            return Err(Error::InvalidDimension(format!(
                "pool kernel {} exceeds input {}x{}",
                self.kernel, h, w
            )));
        }
        let oh = (h - self.kernel) / self.stride + 1;
        let ow = (w - self.kernel) / self.stride + 1;
        let mut y = vec![0.0; batch * ch * oh * ow];
        self.argmax = vec![0u32; y.len()];
        self.in_shape = shape.to_vec();
        for bc in 0..batch * ch {
            let plane = &x.data()[bc * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kh in 0..self.kernel {
                        for kw in 0..self.kernel {
                            let idx = (oy * self.stride + kh) * w + ox * self.stride + kw;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let out_idx = bc * oh * ow + oy * ow + ox;
                    y[out_idx] = best;
                    self.argmax[out_idx] = best_idx as u32;
                }
            }
        }
        Ok(Tensor::from_vec(&[batch, ch, oh, ow], y))
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (h, w) = (self.in_shape[2], self.in_shape[3]);
        let planes = self.in_shape[0] * self.in_shape[1];
        let spatial_out = grad_out.sample_len() / self.in_shape[1];
        let mut dx = vec![0.0; planes * h * w];
        for bc in 0..planes {
            let go = &grad_out.data()[bc * spatial_out..][..spatial_out];
            let am = &self.argmax[bc * spatial_out..][..spatial_out];
            let plane = &mut dx[bc * h * w..][..h * w];
            for (g, &idx) in go.iter().zip(am) {
                plane[idx as usize] += g;
            }
        }
        Tensor::from_vec(&self.in_shape, dx)
    }
}

/// Average pooling onto a fixed output grid; bin `i` spans
/// `[floor(i*in/out), ceil((i+1)*in/out))`, so bins may overlap when the
/// output is larger than the input.
#[derive(Clone, Debug)]
pub struct AdaptiveAvgPool2d {
    pub out_h: usize,
    pub out_w: usize,
    in_shape: Vec<usize>,
}

fn bin(i: usize, inn: usize, out: usize) -> (usize, usize) {
    let start = i * inn / out;
    let end = ((i + 1) * inn).div_ceil(out);
    (start, end.max(start + 1))
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        AdaptiveAvgPool2d { out_h, out_w, in_shape: Vec::new() }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch { expected: vec![0, 0, 0, 0], got: shape.to_vec() });
        }
        let (batch, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        self.in_shape = shape.to_vec();
        let mut y = vec![0.0; batch * ch * self.out_h * self.out_w];
        for bc in 0..batch * ch {
            let plane = &x.data()[bc * h * w..][..h * w];
            let out_plane = &mut y[bc * self.out_h * self.out_w..][..self.out_h * self.out_w];
            for oy in 0..self.out_h {
                let (y0, y1) = bin(oy, h, self.out_h);
                for ox in 0..self.out_w {
                    let (x0, x1) = bin(ox, w, self.out_w);
                    let mut s = 0.0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            s += plane[iy * w + ix];
                        }
                    }
                    out_plane[oy * self.out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        Ok(Tensor::from_vec(&[batch, ch, self.out_h, self.out_w], y))
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (h, w) = (self.in_shape[2], self.in_shape[3]);
        let planes = self.in_shape[0] * self.in_shape[1];
        let mut dx = vec![0.0; planes * h * w];
        for bc in 0..planes {
            let go = &grad_out.data()[bc * self.out_h * self.out_w..][..self.out_h * self.out_w];
            let plane = &mut dx[bc * h * w..][..h * w];
            for oy in 0..self.out_h {
                let (y0, y1) = bin(oy, h, self.out_h);
                for ox in 0..self.out_w {
                    let (x0, x1) = bin(ox, w, self.out_w);
                    let share = go[oy * self.out_w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            plane[iy * w + ix] += share;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&self.in_shape, dx)
    }
}
