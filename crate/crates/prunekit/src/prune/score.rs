//! Elasticity scores: relative change of the loss per relative change of a
//! model component, estimated from one accumulated criterion batch.

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, cross_entropy_grad, Mode, Model};
use crate::tensor::Tensor;

/// Sentinel marking positions already pruned; excluded from ranking and
/// never re-activated.
pub const PRUNED_SENTINEL: f64 = f64::NEG_INFINITY;

/// Per-layer score tensors aligned with the model's prunable layers (same
/// order as `Model::param_layer_indices`). `weights` holds one flat score
/// per weight element, `nodes` one score per output node; either may be
/// empty when not computed. `normaliser` is the loss the scores were
/// divided by (1 when unnormalised).
#[derive(Clone, Debug)]
pub struct ScoreMap {
    pub weights: Vec<Vec<f64>>,
    pub nodes: Vec<Vec<f64>>,
    pub normaliser: f64,
}

/// Mean loss and mean weight/gate gradients over the criterion sub-batches,
/// weighted by sub-batch size so the result equals the gradient of the
/// concatenated batch. Runs in eval mode (dropout off, running statistics).
pub struct CriterionGrads {
    pub weight_grads: Vec<Vec<f64>>,
    pub gate_grads: Vec<Vec<f64>>,
    pub loss: f64,
}

pub fn accumulate_criterion_grads(
    model: &mut Model,
    batches: &[(Tensor, Vec<usize>)],
) -> Result<CriterionGrads> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let saved_mode = model.mode();
    model.set_mode(Mode::Eval);
    let param_layers = model.param_layer_indices();
    let mut weight_grads: Vec<Vec<f64>> = param_layers
        .iter()
        .map(|&i| vec![0.0; model.layers[i].weight_mask().unwrap().len()])
        .collect();
    let mut gate_grads: Vec<Vec<f64>> = param_layers
        .iter()
        .map(|&i| vec![0.0; model.layers[i].out_nodes().unwrap()])
        .collect();
    let mut loss_sum = 0.0;
    let mut total = 0usize;

    let result = (|| -> Result<()> {
        for (x, y) in batches {
            let n = y.len();
            let logits = model.forward(x, None)?;
            let loss = cross_entropy(&logits, y)?;
            let dl = cross_entropy_grad(&logits, y)?;
            model.backward(&dl)?;
            let w = n as f64;
            loss_sum += loss.scalar * w;
            total += n;
            for (acc, &li) in weight_grads.iter_mut().zip(&param_layers) {
                let g = model.layers[li]
                    .weight()
                    .unwrap()
                    .grad()
                    .ok_or(Error::MissingGradients)?;
                for (a, gv) in acc.iter_mut().zip(g) {
                    *a += w * gv;
                }
            }
            for (acc, &li) in gate_grads.iter_mut().zip(&param_layers) {
                let g = model.layers[li].gate_grad().unwrap();
                for (a, gv) in acc.iter_mut().zip(g) {
                    *a += w * gv;
                }
            }
        }
        Ok(())
    })();
    model.set_mode(saved_mode);
    result?;

    let inv = 1.0 / total as f64;
    for acc in weight_grads.iter_mut().chain(gate_grads.iter_mut()) {
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(CriterionGrads { weight_grads, gate_grads, loss: loss_sum * inv })
}

fn weight_scores_from(model: &Model, grads: &CriterionGrads, normaliser: f64) -> Vec<Vec<f64>> {
    model
        .param_layer_indices()
        .iter()
        .zip(&grads.weight_grads)
        .map(|(&li, g)| {
            let layer = &model.layers[li];
            let w = layer.weight().unwrap().data();
            let mask = layer.weight_mask().unwrap().data();
            g.iter()
                .zip(w)
                .zip(mask)
                .map(|((gv, wv), m)| {
                    if *m == 0.0 {
                        PRUNED_SENTINEL
                    } else {
                        (gv * wv).abs() / normaliser
                    }
                })
                .collect()
        })
        .collect()
}

fn node_scores_from(model: &Model, grads: &CriterionGrads, normaliser: f64) -> Vec<Vec<f64>> {
    model
        .param_layer_indices()
        .iter()
        .zip(&grads.gate_grads)
        .map(|(&li, g)| {
            let nm = model.layers[li].node_mask().unwrap();
            g.iter()
                .zip(nm)
                .map(|(gv, m)| if *m == 0.0 { PRUNED_SENTINEL } else { gv.abs() / normaliser })
                .collect()
        })
        .collect()
}

/// `score(θ) = |∂L/∂θ · θ| / L`; pruned positions carry the sentinel.
/// Errors with [`Error::DegenerateLoss`] when L = 0 (callers may fall back
/// to [`weight_saliency_raw`]).
pub fn weight_elasticity(
    model: &mut Model,
    batches: &[(Tensor, Vec<usize>)],
) -> Result<ScoreMap> {
    let grads = accumulate_criterion_grads(model, batches)?;
    if grads.loss == 0.0 {
        return Err(Error::DegenerateLoss);
    }
    let weights = weight_scores_from(model, &grads, grads.loss);
    Ok(ScoreMap { weights, nodes: Vec::new(), normaliser: grads.loss })
}

/// Unnormalised `|∂L/∂θ · θ|` — same ranking, no division by the loss.
pub fn weight_saliency_raw(
    model: &mut Model,
    batches: &[(Tensor, Vec<usize>)],
) -> Result<ScoreMap> {
    let grads = accumulate_criterion_grads(model, batches)?;
    let weights = weight_scores_from(model, &grads, 1.0);
    Ok(ScoreMap { weights, nodes: Vec::new(), normaliser: 1.0 })
}

/// `score(node) = |∂L/∂c| / L` from the gate gradients.
pub fn node_elasticity(model: &mut Model, batches: &[(Tensor, Vec<usize>)]) -> Result<ScoreMap> {
    let grads = accumulate_criterion_grads(model, batches)?;
    if grads.loss == 0.0 {
        return Err(Error::DegenerateLoss);
    }
    let nodes = node_scores_from(model, &grads, grads.loss);
    Ok(ScoreMap { weights: Vec::new(), nodes, normaliser: grads.loss })
}

/// Unnormalised `|∂L/∂c|`.
pub fn node_saliency_raw(model: &mut Model, batches: &[(Tensor, Vec<usize>)]) -> Result<ScoreMap> {
    let grads = accumulate_criterion_grads(model, batches)?;
    let nodes = node_scores_from(model, &grads, 1.0);
    Ok(ScoreMap { weights: Vec::new(), nodes, normaliser: 1.0 })
}

/// Both score families from one accumulation pass, ranked on an equal
/// footing for combined pruning.
pub fn union_elasticity(model: &mut Model, batches: &[(Tensor, Vec<usize>)]) -> Result<ScoreMap> {
    let grads = accumulate_criterion_grads(model, batches)?;
    if grads.loss == 0.0 {
        return Err(Error::DegenerateLoss);
    }
    let weights = weight_scores_from(model, &grads, grads.loss);
    let nodes = node_scores_from(model, &grads, grads.loss);
    Ok(ScoreMap { weights, nodes, normaliser: grads.loss })
}

/// Both score families, unnormalised.
pub fn union_saliency_raw(
    model: &mut Model,
    batches: &[(Tensor, Vec<usize>)],
) -> Result<ScoreMap> {
    let grads = accumulate_criterion_grads(model, batches)?;
    let weights = weight_scores_from(model, &grads, 1.0);
    let nodes = node_scores_from(model, &grads, 1.0);
    Ok(ScoreMap { weights, nodes, normaliser: 1.0 })
}

/// Magnitude scores `|θ|` for the iterative magnitude baseline; same layout
/// and sentinel convention as the elasticity maps.
pub fn weight_magnitude(model: &Model) -> ScoreMap {
    let weights = model
        .param_layer_indices()
        .iter()
        .map(|&li| {
            let layer = &model.layers[li];
            let w = layer.weight().unwrap().data();
            let mask = layer.weight_mask().unwrap().data();
            w.iter()
                .zip(mask)
                .map(|(wv, m)| if *m == 0.0 { PRUNED_SENTINEL } else { wv.abs() })
                .collect()
        })
        .collect();
    ScoreMap { weights, nodes: Vec::new(), normaliser: 1.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_architecture, init_orthogonal, ArchName, ArchSpec, Layer};

    fn tiny() -> Model {
        let spec = ArchSpec::new(ArchName::Mlp5, &[6], 3).with_width_scale(0.02);
        let mut m = build_architecture(&spec).unwrap();
        init_orthogonal(&mut m, 5);
        m
    }

    fn batch() -> (Tensor, Vec<usize>) {
        let x = Tensor::from_vec(&[6, 6], (0..36).map(|i| (i as f64 * 0.31).sin()).collect());
        (x, vec![0, 1, 2, 0, 1, 2])
    }

    #[test]
    fn masked_positions_carry_sentinel() {
        let mut m = tiny();
        if let Layer::Linear(l) = &mut m.layers[1] {
            l.weight_mask.data_mut()[3] = 0.0;
            l.sync_masks();
        }
        let scores = weight_elasticity(&mut m, &[batch()]).unwrap();
        assert_eq!(scores.weights[0][3], PRUNED_SENTINEL);
        assert!(scores.weights[0].iter().filter(|s| s.is_finite()).all(|&s| s >= 0.0));
    }

    #[test]
    fn zero_gradient_weight_scores_zero() {
        // A weight whose gradient is exactly zero scores zero: take a
        // weight into an output the loss never sees... simplest: gradient
        // of the product is zero when the weight is zero (score has theta
        // factor).
        let mut m = tiny();
        if let Layer::Linear(l) = &mut m.layers[1] {
            l.weight.data_mut()[0] = 0.0;
        }
        let scores = weight_elasticity(&mut m, &[batch()]).unwrap();
        assert_eq!(scores.weights[0][0], 0.0);
    }

    #[test]
    fn sub_batch_accumulation_matches_concatenated_batch() {
        let mut m = tiny();
        let (x, y) = batch();
        // Split 6 samples into 4 + 2 (unequal, so the weighting matters).
        let x1 = Tensor::from_vec(&[4, 6], x.data()[..24].to_vec());
        let x2 = Tensor::from_vec(&[2, 6], x.data()[24..].to_vec());
        let split = vec![(x1, y[..4].to_vec()), (x2, y[4..].to_vec())];

        let whole = accumulate_criterion_grads(&mut m, &[(x, y)]).unwrap();
        let parts = accumulate_criterion_grads(&mut m, &split).unwrap();
        assert!((whole.loss - parts.loss).abs() < 1e-12);
        for (a, b) in whole.weight_grads.iter().zip(&parts.weight_grads) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        for (a, b) in whole.gate_grads.iter().zip(&parts.gate_grads) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn node_score_of_fully_masked_input_row_is_zero() {
        let mut m = tiny();
        // Mask all incoming weights of node 0 in the first linear layer
        // (bias is zero from init), deadening its pre-activation.
        if let Layer::Linear(l) = &mut m.layers[1] {
            let inf = l.in_features;
            for c in 0..inf {
                l.weight_mask.data_mut()[c] = 0.0;
            }
            l.sync_masks();
        }
        let scores = node_elasticity(&mut m, &[batch()]).unwrap();
        assert_eq!(scores.nodes[0][0], 0.0);
    }
}
