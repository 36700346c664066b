use crate::error::Result;
use crate::tensor::Tensor;

/// Collapses all per-sample dimensions; identity on already-flat input.
#[derive(Clone, Copy, Debug, Default)]
pub struct Flatten;

impl Flatten {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.reshaped(&[x.batch(), x.sample_len()])
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        grad_out.reshaped(input.shape()).expect("flatten preserves element count")
    }
}
