use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{
    AdaptiveAvgPool2d, BatchNorm, Conv2d, Dropout, Flatten, Layer, LeakyReLU, Linear, MaxPool2d,
    Model,
};

const LEAKY_SLOPE: f64 = 0.05;
const DROP_P: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchName {
    Mlp5,
    LeNet5,
    Conv6,
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArchName::Mlp5 => "mlp5",
            ArchName::LeNet5 => "lenet5",
            ArchName::Conv6 => "conv6",
        };
        f.write_str(s)
    }
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp5" => Ok(ArchName::Mlp5),
            "lenet5" => Ok(ArchName::LeNet5),
            "conv6" => Ok(ArchName::Conv6),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }
}

/// What to build: architecture, per-sample input extents, class count and a
/// uniform scale on hidden widths.
#[derive(Clone, Debug)]
pub struct ArchSpec {
    pub name: ArchName,
    pub input: Vec<usize>,
    pub classes: usize,
    pub width_scale: f64,
}

impl ArchSpec {
    pub fn new(name: ArchName, input: &[usize], classes: usize) -> Self {
        ArchSpec { name, input: input.to_vec(), classes, width_scale: 1.0 }
    }

    pub fn with_width_scale(mut self, ws: f64) -> Self {
        self.width_scale = ws;
        self
    }

    pub fn tag(&self) -> String {
        let dims: Vec<String> = self.input.iter().map(|d| d.to_string()).collect();
        format!("{}[{}->{}]@{:.4}", self.name, dims.join("x"), self.classes, self.width_scale)
    }
}

fn scaled(width: usize, ws: f64) -> usize {
    ((width as f64 * ws).round() as usize).max(1)
}

fn bn1(features: usize) -> Layer {
    Layer::BatchNorm1d(BatchNorm::new(features, false))
}

fn bn2(features: usize) -> Layer {
    Layer::BatchNorm2d(BatchNorm::new(features, true))
}

fn act() -> Layer {
    Layer::LeakyReLU(LeakyReLU::new(LEAKY_SLOPE))
}

fn drop() -> Layer {
    Layer::Dropout(Dropout::new(DROP_P))
}

/// Builds one of the supported architectures with all masks at ones.
pub fn build_architecture(spec: &ArchSpec) -> Result<Model> {
    if spec.input.is_empty() || spec.input.iter().any(|&d| d == 0) || spec.classes == 0 {
        return Err(Error::InvalidDimension(format!(
            "input {:?} / classes {} must be positive",
            spec.input, spec.classes
        )));
    }
    if !(spec.width_scale > 0.0 && spec.width_scale <= 1.0) {
        return Err(Error::InvalidDimension(format!(
            "width scale {} outside (0, 1]",
            spec.width_scale
        )));
    }
    let ws = spec.width_scale;
    let k = spec.classes;
    let layers = match spec.name {
        ArchName::Mlp5 => {
            let i: usize = spec.input.iter().product();
            let h = scaled(512, ws);
            let mut layers = vec![Layer::Flatten(Flatten)];
            let mut inf = i;
            for _ in 0..4 {
                layers.push(Layer::Linear(Linear::new(inf, h)));
                layers.push(bn1(h));
                layers.push(act());
                layers.push(drop());
                inf = h;
            }
            layers.push(Layer::Linear(Linear::new(inf, k)));
            layers
        }
        ArchName::LeNet5 => {
            let c_in = conv_input(&spec.input)?;
            let (c1, c2, c3, f1) = (scaled(6, ws), scaled(16, ws), scaled(120, ws), scaled(84, ws));
            vec![
                Layer::Conv2d(Conv2d::new(c_in, c1, 5, 1, 2)),
                bn2(c1),
                act(),
                Layer::MaxPool2d(MaxPool2d::new(2, 2)),
                Layer::Conv2d(Conv2d::new(c1, c2, 5, 1, 0)),
                bn2(c2),
                act(),
                Layer::MaxPool2d(MaxPool2d::new(2, 2)),
                Layer::Conv2d(Conv2d::new(c2, c3, 5, 1, 0)),
                bn2(c3),
                act(),
                Layer::AdaptiveAvgPool2d(AdaptiveAvgPool2d::new(3, 3)),
                Layer::Flatten(Flatten),
                drop(),
                Layer::Linear(Linear::new(c3 * 9, f1)),
                bn1(f1),
                act(),
                drop(),
                Layer::Linear(Linear::new(f1, k)),
            ]
        }
        ArchName::Conv6 => {
            let c_in = conv_input(&spec.input)?;
            let c: Vec<usize> =
                [64, 64, 128, 128, 256, 256].iter().map(|&w| scaled(w, ws)).collect();
            let (f1, f2) = (scaled(256, ws), scaled(256, ws));
            let mut layers = Vec::new();
            let mut prev = c_in;
            for (i, &ch) in c.iter().enumerate() {
                layers.push(Layer::Conv2d(Conv2d::new(prev, ch, 3, 1, 1)));
                layers.push(bn2(ch));
                layers.push(act());
                if i == 1 || i == 3 {
                    layers.push(Layer::MaxPool2d(MaxPool2d::new(2, 2)));
                }
                prev = ch;
            }
            layers.push(Layer::AdaptiveAvgPool2d(AdaptiveAvgPool2d::new(3, 3)));
            layers.push(Layer::Flatten(Flatten));
            layers.push(drop());
            layers.push(Layer::Linear(Linear::new(prev * 9, f1)));
            layers.push(bn1(f1));
            layers.push(act());
            layers.push(drop());
            layers.push(Layer::Linear(Linear::new(f1, f2)));
            layers.push(bn1(f2));
            layers.push(act());
            layers.push(drop());
            layers.push(Layer::Linear(Linear::new(f2, k)));
            layers
        }
    };
    Ok(Model::from_parts(layers, spec.input.clone(), k, spec.tag()))
}

fn conv_input(input: &[usize]) -> Result<usize> {
    if input.len() != 3 {
        return Err(Error::InvalidDimension(format!(
            "convolutional architectures need CxHxW input, got {input:?}"
        )));
    }
    Ok(input[0])
}
