use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Inverted dropout: activations are divided by the keep probability at
/// train time so eval mode needs no rescaling.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
    scaled_mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "drop probability must be in [0,1)");
        Dropout { p, scaled_mask: None }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.scaled_mask = None;
            return Ok(x.clone());
        }
        let rng = rng.ok_or(Error::RngRequired)?;
        let keep = 1.0 - self.p;
        let inv = 1.0 / keep;
        let mask: Vec<f64> =
            (0..x.len()).map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 }).collect();
        let y: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.scaled_mask = Some(mask);
        Ok(Tensor::from_vec(x.shape(), y))
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        match &self.scaled_mask {
            Some(mask) => {
                let dx: Vec<f64> = grad_out.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                Tensor::from_vec(grad_out.shape(), dx)
            }
            None => grad_out.clone(),
        }
    }
}
