//! Physical compaction of structurally pruned models: pruned output rows
//! disappear together with their batch-norm entries and biases, and the
//! matching input columns of the following parameterised layer; across a
//! flatten boundary a pruned channel removes its whole spatial block.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Layer, Linear, Model};
use crate::tensor::Tensor;

fn survivors(node_mask: &[f64]) -> Vec<usize> {
    node_mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(i, _)| i)
        .collect()
}

fn select_matrix(t: &Tensor, rows: &[usize], cols: &[usize], row_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        for &c in cols {
            out.push(t.data()[r * row_len + c]);
        }
    }
    out
}

fn select_vec(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Returns a new model with every structurally pruned node physically
/// removed; forward-equivalent to the masked original.
pub fn shrink_structured(model: &Model) -> Result<Model> {
    let mut shape = model.input_shape().to_vec();
    // Surviving indices in the current representation (channels after a
    // conv, features after a linear/flatten); None = everything.
    let mut live: Option<Vec<usize>> = None;
    let mut new_layers = Vec::with_capacity(model.layers.len());

    for (li, layer) in model.layers.iter().enumerate() {
        let out_shape = layer.infer_shape(&shape)?;
        match layer {
            Layer::Linear(l) => {
                let cols = live.take().unwrap_or_else(|| (0..l.in_features).collect());
                let rows = survivors(&l.node_mask);
                if rows.is_empty() {
                    return Err(Error::EmptyLayer(li));
                }
                let mut nl = Linear::new(cols.len(), rows.len());
                nl.weight
                    .data_mut()
                    .copy_from_slice(&select_matrix(&l.weight, &rows, &cols, l.in_features));
                nl.weight_mask
                    .data_mut()
                    .copy_from_slice(&select_matrix(&l.weight_mask, &rows, &cols, l.in_features));
                nl.bias.data_mut().copy_from_slice(&select_vec(l.bias.data(), &rows));
                nl.bias_mask.data_mut().copy_from_slice(&select_vec(l.bias_mask.data(), &rows));
                nl.sync_masks();
                new_layers.push(Layer::Linear(nl));
                live = Some(rows);
            }
            Layer::Conv2d(c) => {
                let in_ch = live.take().unwrap_or_else(|| (0..c.in_channels).collect());
                let out_ch = survivors(&c.node_mask);
                if out_ch.is_empty() {
                    return Err(Error::EmptyLayer(li));
                }
                let kk = c.kernel * c.kernel;
                let mut nc =
                    Conv2d::new(in_ch.len(), out_ch.len(), c.kernel, c.stride, c.padding);
                let mut w = Vec::with_capacity(out_ch.len() * in_ch.len() * kk);
                let mut wm = Vec::with_capacity(w.capacity());
                for &o in &out_ch {
                    for &i in &in_ch {
                        let off = (o * c.in_channels + i) * kk;
                        w.extend_from_slice(&c.weight.data()[off..off + kk]);
                        wm.extend_from_slice(&c.weight_mask.data()[off..off + kk]);
                    }
                }
                nc.weight.data_mut().copy_from_slice(&w);
                nc.weight_mask.data_mut().copy_from_slice(&wm);
                nc.bias.data_mut().copy_from_slice(&select_vec(c.bias.data(), &out_ch));
                nc.bias_mask.data_mut().copy_from_slice(&select_vec(c.bias_mask.data(), &out_ch));
                nc.sync_masks();
                new_layers.push(Layer::Conv2d(nc));
                live = Some(out_ch);
            }
            Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b) => {
                let keep = match &live {
                    Some(idx) => idx.clone(),
                    None => (0..b.features).collect(),
                };
                let mut nb = BatchNorm::new(keep.len(), b.spatial);
                nb.momentum = b.momentum;
                nb.eps = b.eps;
                nb.gamma.data_mut().copy_from_slice(&select_vec(b.gamma.data(), &keep));
                nb.beta.data_mut().copy_from_slice(&select_vec(b.beta.data(), &keep));
                nb.running_mean = select_vec(&b.running_mean, &keep);
                nb.running_var = select_vec(&b.running_var, &keep);
                new_layers.push(if b.spatial {
                    Layer::BatchNorm2d(nb)
                } else {
                    Layer::BatchNorm1d(nb)
                });
            }
            Layer::Flatten(f) => {
                // Channel survivors expand to their spatial blocks.
                if let Some(channels) = live.take() {
                    let footprint: usize = shape[1..].iter().product();
                    let mut feats = Vec::with_capacity(channels.len() * footprint);
                    for &c in &channels {
                        feats.extend(c * footprint..(c + 1) * footprint);
                    }
                    live = Some(feats);
                }
                new_layers.push(Layer::Flatten(*f));
            }
            Layer::MaxPool2d(p) => {
                new_layers.push(Layer::MaxPool2d(crate::nn::MaxPool2d::new(p.kernel, p.stride)));
            }
            Layer::AdaptiveAvgPool2d(p) => new_layers
                .push(Layer::AdaptiveAvgPool2d(crate::nn::AdaptiveAvgPool2d::new(p.out_h, p.out_w))),
            Layer::LeakyReLU(a) => new_layers.push(Layer::LeakyReLU(a.clone())),
            Layer::Dropout(d) => new_layers.push(Layer::Dropout(d.clone())),
        }
        shape = out_shape;
    }

    Ok(Model::from_parts(
        new_layers,
        model.input_shape().to_vec(),
        model.num_classes(),
        format!("{}#shrunk", model.arch_tag()),
    ))
}
