//! Layer zoo, sequential model container and reverse-mode differentiation.
//!
//! A [`Model`] is an ordered list of layers evaluated batch-first. Forward
//! caches the inter-layer activations; [`Model::backward`] consumes them in
//! reverse, filling parameter gradients, per-node gate gradients and the
//! input gradient.

mod activation;
mod arch;
mod batchnorm;
mod conv;
mod dropout;
mod flatten;
mod gradcheck;
mod init;
mod linear;
mod loss;
mod pool;

pub use activation::LeakyReLU;
pub use arch::{build_architecture, ArchName, ArchSpec};
pub use batchnorm::BatchNorm;
pub use conv::Conv2d;
pub use dropout::Dropout;
pub use flatten::Flatten;
pub use gradcheck::{grad_check, input_saliency};
pub use init::{init_orthogonal, leaky_relu_gain};
pub use linear::Linear;
pub use loss::{accuracy, cross_entropy, cross_entropy_grad, LossValue};
pub use pool::{AdaptiveAvgPool2d, MaxPool2d};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
    AdaptiveAvgPool2d(AdaptiveAvgPool2d),
    BatchNorm1d(BatchNorm),
    BatchNorm2d(BatchNorm),
    LeakyReLU(LeakyReLU),
    Dropout(Dropout),
    Flatten(Flatten),
}

/// Identifies a parameter tensor during visitation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParamDesc {
    pub layer: usize,
    pub kind: ParamKind,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::AdaptiveAvgPool2d(_) => "adaptiveavgpool2d",
            Layer::BatchNorm1d(_) => "batchnorm1d",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::LeakyReLU(_) => "leakyrelu",
            Layer::Dropout(_) => "dropout",
            Layer::Flatten(_) => "flatten",
        }
    }

    /// True for layers with prunable weights and gates (Linear / Conv2d).
    pub fn is_param_layer(&self) -> bool {
        matches!(self, Layer::Linear(_) | Layer::Conv2d(_))
    }

    /// Output nodes of a parameterised layer: Linear out features or Conv
    /// output channels.
    pub fn out_nodes(&self) -> Option<usize> {
        match self {
            Layer::Linear(l) => Some(l.out_features),
            Layer::Conv2d(c) => Some(c.out_channels),
            _ => None,
        }
    }

    pub fn node_mask(&self) -> Option<&[f64]> {
        match self {
            Layer::Linear(l) => Some(&l.node_mask),
            Layer::Conv2d(c) => Some(&c.node_mask),
            _ => None,
        }
    }

    pub fn weight_mask(&self) -> Option<&Tensor> {
        match self {
            Layer::Linear(l) => Some(&l.weight_mask),
            Layer::Conv2d(c) => Some(&c.weight_mask),
            _ => None,
        }
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Linear(l) => Some(&l.weight),
            Layer::Conv2d(c) => Some(&c.weight),
            _ => None,
        }
    }

    pub fn gate_grad(&self) -> Option<&[f64]> {
        match self {
            Layer::Linear(l) => Some(&l.gate_grad),
            Layer::Conv2d(c) => Some(&c.gate_grad),
            _ => None,
        }
    }

    /// Per-sample output extents given per-sample input extents.
    pub fn infer_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::ShapeMismatch { expected: vec![], got: input.to_vec() };
        match self {
            Layer::Linear(l) => {
                if input.iter().product::<usize>() != l.in_features {
                    return Err(bad());
                }
                Ok(vec![l.out_features])
            }
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels {
                    return Err(bad());
                }
                let (oh, ow) = c.out_spatial(input[1], input[2])?;
                Ok(vec![c.out_channels, oh, ow])
            }
            Layer::MaxPool2d(p) => {
                if input.len() != 3 || input[1] < p.kernel || input[2] < p.kernel {
                    return Err(bad());
                }
                Ok(vec![
                    input[0],
                    (input[1] - p.kernel) / p.stride + 1,
                    (input[2] - p.kernel) / p.stride + 1,
                ])
            }
            Layer::AdaptiveAvgPool2d(p) => {
                if input.len() != 3 {
                    return Err(bad());
                }
                Ok(vec![input[0], p.out_h, p.out_w])
            }
            Layer::BatchNorm1d(b) => {
                if input.iter().product::<usize>() != b.features {
                    return Err(bad());
                }
                Ok(input.to_vec())
            }
            Layer::BatchNorm2d(b) => {
                if input.len() != 3 || input[0] != b.features {
                    return Err(bad());
                }
                Ok(input.to_vec())
            }
            Layer::LeakyReLU(_) | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::Flatten(_) => Ok(vec![input.iter().product()]),
        }
    }

    /// Re-applies masks to stored values after a mask edit.
    pub fn sync_masks(&mut self) {
        match self {
            Layer::Linear(l) => l.sync_masks(),
            Layer::Conv2d(c) => c.sync_masks(),
            _ => {}
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(c) => c.forward(x),
            Layer::MaxPool2d(p) => p.forward(x),
            Layer::AdaptiveAvgPool2d(p) => p.forward(x),
            Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b) => b.forward(x, mode),
            Layer::LeakyReLU(a) => Ok(a.forward(x)),
            Layer::Dropout(d) => d.forward(x, mode, rng),
            Layer::Flatten(f) => f.forward(x),
        }
    }

    fn backward(&mut self, input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.backward(input, output, grad_out),
            Layer::Conv2d(c) => c.backward(input, output, grad_out),
            Layer::MaxPool2d(p) => p.backward(grad_out),
            Layer::AdaptiveAvgPool2d(p) => p.backward(grad_out),
            Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b) => b.backward(input, grad_out),
            Layer::LeakyReLU(a) => a.backward(input, grad_out),
            Layer::Dropout(d) => d.backward(grad_out),
            Layer::Flatten(f) => f.backward(input, grad_out),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamKind, &Tensor, Option<&Tensor>)) {
        match self {
            Layer::Linear(l) => {
                f(ParamKind::Weight, &l.weight, Some(&l.weight_mask));
                f(ParamKind::Bias, &l.bias, Some(&l.bias_mask));
            }
            Layer::Conv2d(c) => {
                f(ParamKind::Weight, &c.weight, Some(&c.weight_mask));
                f(ParamKind::Bias, &c.bias, Some(&c.bias_mask));
            }
            Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b) => {
                f(ParamKind::Gamma, &b.gamma, None);
                f(ParamKind::Beta, &b.beta, None);
            }
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut Tensor, Option<&Tensor>)) {
        match self {
            Layer::Linear(l) => {
                f(ParamKind::Weight, &mut l.weight, Some(&l.weight_mask));
                f(ParamKind::Bias, &mut l.bias, Some(&l.bias_mask));
            }
            Layer::Conv2d(c) => {
                f(ParamKind::Weight, &mut c.weight, Some(&c.weight_mask));
                f(ParamKind::Bias, &mut c.bias, Some(&c.bias_mask));
            }
            Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b) => {
                f(ParamKind::Gamma, &mut b.gamma, None);
                f(ParamKind::Beta, &mut b.beta, None);
            }
            _ => {}
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub layers: Vec<Layer>,
    mode: Mode,
    dropout_disabled: bool,
    arch_tag: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    activations: Vec<Tensor>,
    input_grad: Option<Tensor>,
}

impl Model {
    pub fn from_parts(layers: Vec<Layer>, input_shape: Vec<usize>, num_classes: usize, arch_tag: String) -> Self {
        Model {
            layers,
            mode: Mode::Train,
            dropout_disabled: false,
            arch_tag,
            input_shape,
            num_classes,
            activations: Vec::new(),
            input_grad: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn set_dropout_disabled(&mut self, disabled: bool) {
        self.dropout_disabled = disabled;
    }

    pub fn arch_tag(&self) -> &str {
        &self.arch_tag
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_grad(&self) -> Option<&Tensor> {
        self.input_grad.as_ref()
    }

    /// Indices of parameterised (prunable, gate-bearing) layers.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_param_layer())
            .map(|(i, _)| i)
            .collect()
    }

    /// (unmasked, total) over prunable weight tensors; biases excluded.
    pub fn weight_counts(&self) -> (usize, usize) {
        let mut unmasked = 0;
        let mut total = 0;
        for layer in &self.layers {
            if let Some(mask) = layer.weight_mask() {
                total += mask.len();
                unmasked += mask.data().iter().filter(|&&m| m != 0.0).count();
            }
        }
        (unmasked, total)
    }

    /// (surviving, total) over output nodes of parameterised layers.
    pub fn node_counts(&self) -> (usize, usize) {
        let mut alive = 0;
        let mut total = 0;
        for layer in &self.layers {
            if let Some(nm) = layer.node_mask() {
                total += nm.len();
                alive += nm.iter().filter(|&&m| m != 0.0).count();
            }
        }
        (alive, total)
    }

    pub fn weight_sparsity(&self) -> f64 {
        let (unmasked, total) = self.weight_counts();
        1.0 - unmasked as f64 / total.max(1) as f64
    }

    pub fn set_gate(&mut self, layer: usize, node: usize, value: f64) {
        match &mut self.layers[layer] {
            Layer::Linear(l) => l.gate[node] = value,
            Layer::Conv2d(c) => c.gate[node] = value,
            _ => panic!("layer {layer} has no gates"),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        if x.batch() == 0 {
            return Err(Error::EmptyBatch);
        }
        let expected: usize = self.input_shape.iter().product();
        if x.sample_len() != expected {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        // Reshape flat input to the canonical spatial layout if needed.
        let mut shape = vec![x.batch()];
        shape.extend_from_slice(&self.input_shape);
        let mut current = x.reshaped(&shape)?;

        self.activations.clear();
        self.activations.push(current.clone());
        let mode = self.mode;
        let dropout_disabled = self.dropout_disabled;
        for layer in &mut self.layers {
            let layer_mode = if dropout_disabled && matches!(layer, Layer::Dropout(_)) {
                Mode::Eval
            } else {
                mode
            };
            current = layer.forward(&current, layer_mode, rng.as_deref_mut())?;
            self.activations.push(current.clone());
        }
        if current.sample_len() != self.num_classes {
            return Err(Error::ShapeMismatch {
                expected: vec![x.batch(), self.num_classes],
                got: current.shape().to_vec(),
            });
        }
        Ok(current)
    }

    /// Backpropagates from a gradient on the logits. Parameter gradients are
    /// overwritten (not accumulated); the input gradient is stored.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        if self.activations.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let logits = self.activations.last().unwrap();
        if grad_logits.len() != logits.len() {
            return Err(Error::ShapeMismatch {
                expected: logits.shape().to_vec(),
                got: grad_logits.shape().to_vec(),
            });
        }
        let mut grad = grad_logits.reshaped(logits.shape())?;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let input = &self.activations[i];
            let output = &self.activations[i + 1];
            grad = layer.backward(input, output, &grad);
        }
        self.input_grad = Some(grad);
        Ok(())
    }

    /// Forward + mean cross-entropy in one call.
    pub fn loss_on(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossValue, Tensor)> {
        let logits = self.forward(x, rng)?;
        let loss = cross_entropy(&logits, labels)?;
        Ok((loss, logits))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamDesc, &Tensor, Option<&Tensor>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&mut |kind, t, m| f(ParamDesc { layer: i, kind }, t, m));
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamDesc, &mut Tensor, Option<&Tensor>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&mut |kind, t, m| f(ParamDesc { layer: i, kind }, t, m));
        }
    }

    /// Drops cached activations and gradients (not masks or parameters).
    pub fn clear_cache(&mut self) {
        self.activations.clear();
        self.input_grad = None;
        self.visit_params_mut(&mut |_, t, _| t.clear_grad());
    }

    /// Parameter descriptors in visitation order.
    pub fn param_descs(&self) -> Vec<ParamDesc> {
        let mut out = Vec::new();
        self.visit_params(&mut |d, _, _| out.push(d));
        out
    }

    pub fn param_tensor(&self, desc: ParamDesc) -> &Tensor {
        match (&self.layers[desc.layer], desc.kind) {
            (Layer::Linear(l), ParamKind::Weight) => &l.weight,
            (Layer::Linear(l), ParamKind::Bias) => &l.bias,
            (Layer::Conv2d(c), ParamKind::Weight) => &c.weight,
            (Layer::Conv2d(c), ParamKind::Bias) => &c.bias,
            (Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b), ParamKind::Gamma) => &b.gamma,
            (Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b), ParamKind::Beta) => &b.beta,
            _ => panic!("parameter {:?} not present on layer {}", desc.kind, desc.layer),
        }
    }

    pub fn param_tensor_mut(&mut self, desc: ParamDesc) -> &mut Tensor {
        match (&mut self.layers[desc.layer], desc.kind) {
            (Layer::Linear(l), ParamKind::Weight) => &mut l.weight,
            (Layer::Linear(l), ParamKind::Bias) => &mut l.bias,
            (Layer::Conv2d(c), ParamKind::Weight) => &mut c.weight,
            (Layer::Conv2d(c), ParamKind::Bias) => &mut c.bias,
            (Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b), ParamKind::Gamma) => &mut b.gamma,
            (Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b), ParamKind::Beta) => &mut b.beta,
            _ => panic!("parameter {:?} not present on layer {}", desc.kind, desc.layer),
        }
    }
}
