use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LeakyReLU {
    pub negative_slope: f64,
}

impl LeakyReLU {
    pub fn new(negative_slope: f64) -> Self {
        LeakyReLU { negative_slope }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = self.negative_slope;
        let y: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { s * v }).collect();
        Tensor::from_vec(x.shape(), y)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        let s = self.negative_slope;
        let dx: Vec<f64> = input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { s * g })
            .collect();
        Tensor::from_vec(input.shape(), dx)
    }
}
