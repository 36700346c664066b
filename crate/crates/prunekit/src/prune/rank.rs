//! Global ranking and mask updates, with the structured safeguards: a
//! parameterised layer never drops below one surviving node and the output
//! layer's nodes are never pruned (input nodes are not in the pool at all).

use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::prune::score::ScoreMap;

/// What one pruning event did.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub kappa_requested: f64,
    pub kappa_achieved: f64,
    /// Newly masked weights per prunable layer.
    pub per_layer_pruned: Vec<usize>,
    pub weights_pruned: usize,
    pub nodes_pruned: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PoolEntry {
    Weight { pos: usize, idx: usize },
    Node { pos: usize, node: usize },
}

fn sort_pool(pool: &mut [(f64, PoolEntry)]) {
    // Ascending score; ties resolve to the earlier (layer, flat index),
    // weights before nodes at exact equality.
    pool.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| {
            let key = |e: &PoolEntry| match e {
                PoolEntry::Weight { pos, idx } => (*pos, 0usize, *idx),
                PoolEntry::Node { pos, node } => (*pos, 1usize, *node),
            };
            key(&a.1).cmp(&key(&b.1))
        })
    });
}

fn weight_mask_mut(layer: &mut Layer) -> &mut crate::tensor::Tensor {
    match layer {
        Layer::Linear(l) => &mut l.weight_mask,
        Layer::Conv2d(c) => &mut c.weight_mask,
        _ => panic!("not a parameterised layer"),
    }
}

fn surviving_nodes(layer: &Layer) -> usize {
    layer.node_mask().map(|nm| nm.iter().filter(|&&m| m != 0.0).count()).unwrap_or(0)
}

/// Masks one node: its weight row and bias, plus the corresponding input
/// columns of the next parameterised layer (a whole channel block when the
/// connection crosses a flatten boundary). Returns newly masked weights
/// per prunable layer.
pub fn prune_node(model: &mut Model, param_pos: usize, node: usize) -> Vec<usize> {
    let param_layers = model.param_layer_indices();
    let li = param_layers[param_pos];
    let mut newly = vec![0usize; param_layers.len()];

    let out_nodes = model.layers[li].out_nodes().unwrap();
    match &mut model.layers[li] {
        Layer::Linear(l) => {
            l.node_mask[node] = 0.0;
            l.bias_mask.data_mut()[node] = 0.0;
            let inf = l.in_features;
            let row = &mut l.weight_mask.data_mut()[node * inf..][..inf];
            newly[param_pos] += row.iter().filter(|&&m| m != 0.0).count();
            row.iter_mut().for_each(|m| *m = 0.0);
            l.sync_masks();
        }
        Layer::Conv2d(c) => {
            c.node_mask[node] = 0.0;
            c.bias_mask.data_mut()[node] = 0.0;
            let per_out = c.in_channels * c.kernel * c.kernel;
            let row = &mut c.weight_mask.data_mut()[node * per_out..][..per_out];
            newly[param_pos] += row.iter().filter(|&&m| m != 0.0).count();
            row.iter_mut().for_each(|m| *m = 0.0);
            c.sync_masks();
        }
        _ => unreachable!(),
    }

    // The outgoing side: input columns of the next parameterised layer.
    if param_pos + 1 < param_layers.len() {
        let ni = param_layers[param_pos + 1];
        match &mut model.layers[ni] {
            Layer::Linear(l) => {
                let inf = l.in_features;
                let block = inf / out_nodes; // spatial footprint per node
                debug_assert_eq!(block * out_nodes, inf, "node/feature wiring mismatch");
                let outf = l.out_features;
                let mask = l.weight_mask.data_mut();
                for o in 0..outf {
                    for b in 0..block {
                        let idx = o * inf + node * block + b;
                        if mask[idx] != 0.0 {
                            mask[idx] = 0.0;
                            newly[param_pos + 1] += 1;
                        }
                    }
                }
                l.sync_masks();
            }
            Layer::Conv2d(c) => {
                debug_assert_eq!(c.in_channels, out_nodes, "channel wiring mismatch");
                let kk = c.kernel * c.kernel;
                let per_out = c.in_channels * kk;
                let outf = c.out_channels;
                let mask = c.weight_mask.data_mut();
                for o in 0..outf {
                    for t in 0..kk {
                        let idx = o * per_out + node * kk + t;
                        if mask[idx] != 0.0 {
                            mask[idx] = 0.0;
                            newly[param_pos + 1] += 1;
                        }
                    }
                }
                c.sync_masks();
            }
            _ => unreachable!(),
        }
    }
    newly
}

/// Globally ranks unmasked weights ascending by score and masks the lowest
/// until overall weight sparsity reaches `kappa_target` (rounded to the
/// nearest element count).
pub fn rank_and_prune_weights(
    model: &mut Model,
    scores: &ScoreMap,
    kappa_target: f64,
) -> Result<PruneOutcome> {
    let param_layers = model.param_layer_indices();
    assert_eq!(scores.weights.len(), param_layers.len(), "score map misaligned");
    let (unmasked, total) = model.weight_counts();
    let current_pruned = total - unmasked;
    let target_pruned = (kappa_target * total as f64).round() as usize;
    if target_pruned < current_pruned {
        return Err(Error::TargetBelowCurrent {
            requested: kappa_target,
            current: current_pruned as f64 / total as f64,
        });
    }

    let mut pool: Vec<(f64, PoolEntry)> = Vec::with_capacity(unmasked);
    for (pos, layer_scores) in scores.weights.iter().enumerate() {
        for (idx, &s) in layer_scores.iter().enumerate() {
            if s.is_finite() {
                pool.push((s, PoolEntry::Weight { pos, idx }));
            }
        }
    }
    sort_pool(&mut pool);

    let to_prune = (target_pruned - current_pruned).min(pool.len());
    let mut per_layer = vec![0usize; param_layers.len()];
    for &(_, entry) in pool.iter().take(to_prune) {
        if let PoolEntry::Weight { pos, idx } = entry {
            weight_mask_mut(&mut model.layers[param_layers[pos]]).data_mut()[idx] = 0.0;
            per_layer[pos] += 1;
        }
    }
    for &li in &param_layers {
        model.layers[li].sync_masks();
    }
    let achieved = (current_pruned + to_prune) as f64 / total as f64;
    Ok(PruneOutcome {
        kappa_requested: kappa_target,
        kappa_achieved: achieved,
        per_layer_pruned: per_layer,
        weights_pruned: to_prune,
        nodes_pruned: 0,
    })
}

/// Ranks surviving nodes ascending and prunes to the requested node
/// sparsity, subject to the safeguards. When safeguards make the target
/// unreachable, prunes the maximum feasible and reports the achieved
/// fraction.
pub fn rank_and_prune_nodes(
    model: &mut Model,
    scores: &ScoreMap,
    kappa_target: f64,
) -> Result<PruneOutcome> {
    let param_layers = model.param_layer_indices();
    assert_eq!(scores.nodes.len(), param_layers.len(), "score map misaligned");
    let (alive, total) = model.node_counts();
    let current_pruned = total - alive;
    let target_pruned = (kappa_target * total as f64).round() as usize;
    if target_pruned < current_pruned {
        return Err(Error::TargetBelowCurrent {
            requested: kappa_target,
            current: current_pruned as f64 / total as f64,
        });
    }

    let last_pos = param_layers.len() - 1;
    let mut pool: Vec<(f64, PoolEntry)> = Vec::new();
    for (pos, layer_scores) in scores.nodes.iter().enumerate() {
        if pos == last_pos {
            continue; // output nodes are never candidates
        }
        for (node, &s) in layer_scores.iter().enumerate() {
            if s.is_finite() {
                pool.push((s, PoolEntry::Node { pos, node }));
            }
        }
    }
    sort_pool(&mut pool);

    let mut per_layer = vec![0usize; param_layers.len()];
    let mut pruned_now = 0usize;
    let mut weights_pruned = 0usize;
    for &(_, entry) in pool.iter() {
        if current_pruned + pruned_now >= target_pruned {
            break;
        }
        if let PoolEntry::Node { pos, node } = entry {
            if surviving_nodes(&model.layers[param_layers[pos]]) <= 1 {
                continue; // never empty a layer
            }
            let newly = prune_node(model, pos, node);
            for (p, n) in per_layer.iter_mut().zip(&newly) {
                *p += n;
            }
            weights_pruned += newly.iter().sum::<usize>();
            pruned_now += 1;
        }
    }
    let achieved = (current_pruned + pruned_now) as f64 / total as f64;
    if achieved + 1e-12 < target_pruned as f64 / total as f64 {
        log::warn!(
            "node pruning stopped at {achieved:.4} (requested {kappa_target:.4}): safeguards"
        );
    }
    Ok(PruneOutcome {
        kappa_requested: kappa_target,
        kappa_achieved: achieved,
        per_layer_pruned: per_layer,
        weights_pruned,
        nodes_pruned: pruned_now,
    })
}

/// Single pool mixing weight and node scores; pruning a node masks its
/// weights, and the sparsity accounting is over weights.
pub fn rank_and_prune_union(
    model: &mut Model,
    scores: &ScoreMap,
    kappa_target: f64,
) -> Result<PruneOutcome> {
    let param_layers = model.param_layer_indices();
    assert_eq!(scores.weights.len(), param_layers.len(), "score map misaligned");
    assert_eq!(scores.nodes.len(), param_layers.len(), "score map misaligned");
    let (unmasked, total) = model.weight_counts();
    let current_pruned = total - unmasked;
    let target_pruned = (kappa_target * total as f64).round() as usize;
    if target_pruned < current_pruned {
        return Err(Error::TargetBelowCurrent {
            requested: kappa_target,
            current: current_pruned as f64 / total as f64,
        });
    }

    let last_pos = param_layers.len() - 1;
    let mut pool: Vec<(f64, PoolEntry)> = Vec::new();
    for (pos, layer_scores) in scores.weights.iter().enumerate() {
        for (idx, &s) in layer_scores.iter().enumerate() {
            if s.is_finite() {
                pool.push((s, PoolEntry::Weight { pos, idx }));
            }
        }
    }
    for (pos, layer_scores) in scores.nodes.iter().enumerate() {
        if pos == last_pos {
            continue;
        }
        for (node, &s) in layer_scores.iter().enumerate() {
            if s.is_finite() {
                pool.push((s, PoolEntry::Node { pos, node }));
            }
        }
    }
    sort_pool(&mut pool);

    let mut per_layer = vec![0usize; param_layers.len()];
    let mut weights_pruned = 0usize;
    let mut nodes_pruned = 0usize;
    for &(_, entry) in pool.iter() {
        if current_pruned + weights_pruned >= target_pruned {
            break;
        }
        match entry {
            PoolEntry::Weight { pos, idx } => {
                let mask = weight_mask_mut(&mut model.layers[param_layers[pos]]);
                if mask.data()[idx] != 0.0 {
                    mask.data_mut()[idx] = 0.0;
                    per_layer[pos] += 1;
                    weights_pruned += 1;
                }
            }
            PoolEntry::Node { pos, node } => {
                let layer = &model.layers[param_layers[pos]];
                if layer.node_mask().unwrap()[node] == 0.0
                    || surviving_nodes(layer) <= 1
                {
                    continue;
                }
                let newly = prune_node(model, pos, node);
                for (p, n) in per_layer.iter_mut().zip(&newly) {
                    *p += n;
                }
                weights_pruned += newly.iter().sum::<usize>();
                nodes_pruned += 1;
            }
        }
    }
    for &li in &param_layers {
        model.layers[li].sync_masks();
    }
    let achieved = (current_pruned + weights_pruned) as f64 / total as f64;
    Ok(PruneOutcome {
        kappa_requested: kappa_target,
        kappa_achieved: achieved,
        per_layer_pruned: per_layer,
        weights_pruned,
        nodes_pruned,
    })
}
