//! Layered reachability over the mask graph: a node is alive when at least
//! one unmasked path connects it to both an input and an output.

use crate::nn::{Layer, Model};

#[derive(Clone, Debug)]
pub struct ConnectivityReport {
    /// Alive / total output nodes per parameterised layer, input to output.
    pub per_layer: Vec<(usize, usize)>,
    pub connected: bool,
}

/// For parameterised layer `layer`, whether any unmasked weight links
/// previous-level node `prev` to output node `out`. `group` is the number
/// of input columns per previous node (spatial footprint across a flatten).
fn linked(layer: &Layer, out: usize, prev: usize, group: usize) -> bool {
    match layer {
        Layer::Linear(l) => {
            let mask = l.weight_mask.data();
            (0..group).any(|g| mask[out * l.in_features + prev * group + g] != 0.0)
        }
        Layer::Conv2d(c) => {
            let kk = c.kernel * c.kernel;
            let mask = c.weight_mask.data();
            let off = (out * c.in_channels + prev) * kk;
            mask[off..off + kk].iter().any(|&m| m != 0.0)
        }
        _ => unreachable!("not a parameterised layer"),
    }
}

fn in_group(layer: &Layer, prev_nodes: usize) -> usize {
    match layer {
        Layer::Linear(l) => l.in_features / prev_nodes,
        Layer::Conv2d(_) => 1,
        _ => unreachable!(),
    }
}

/// Builds the bipartite reachability chain layer by layer and reports
/// per-layer alive counts; `connected` means every layer keeps at least one
/// node on an unmasked input-to-output path.
pub fn connectivity_check(model: &Model) -> ConnectivityReport {
    let param_layers = model.param_layer_indices();
    let depth = param_layers.len();
    if depth == 0 {
        return ConnectivityReport { per_layer: Vec::new(), connected: false };
    }

    // Level 0 holds the input nodes; level pos+1 the outputs of
    // parameterised layer `pos`. Edges between levels pos and pos+1 are the
    // masked weights of parameterised layer `pos`.
    let first_inputs = match &model.layers[param_layers[0]] {
        Layer::Linear(l) => l.in_features,
        Layer::Conv2d(c) => c.in_channels,
        _ => unreachable!(),
    };
    let mut counts = vec![first_inputs];
    for &li in &param_layers {
        counts.push(model.layers[li].out_nodes().unwrap());
    }
    let groups: Vec<usize> = param_layers
        .iter()
        .enumerate()
        .map(|(pos, &li)| in_group(&model.layers[li], counts[pos]))
        .collect();

    // Forward: every input node is a source.
    let mut fwd: Vec<Vec<bool>> = Vec::with_capacity(depth + 1);
    fwd.push(vec![true; counts[0]]);
    for (pos, &li) in param_layers.iter().enumerate() {
        let layer = &model.layers[li];
        let prev = &fwd[pos];
        let mut level = vec![false; counts[pos + 1]];
        for (o, alive) in level.iter_mut().enumerate() {
            *alive =
                prev.iter().enumerate().any(|(p, &pa)| pa && linked(layer, o, p, groups[pos]));
        }
        fwd.push(level);
    }

    // Backward: every output node is a sink.
    let mut bwd: Vec<Vec<bool>> = vec![Vec::new(); depth + 1];
    bwd[depth] = vec![true; counts[depth]];
    for pos in (0..depth).rev() {
        let layer = &model.layers[param_layers[pos]];
        let down = &bwd[pos + 1];
        let mut level = vec![false; counts[pos]];
        for (j, alive) in level.iter_mut().enumerate() {
            *alive =
                down.iter().enumerate().any(|(o, &oa)| oa && linked(layer, o, j, groups[pos]));
        }
        bwd[pos] = level;
    }

    let per_layer: Vec<(usize, usize)> = (0..depth)
        .map(|pos| {
            let alive =
                fwd[pos + 1].iter().zip(&bwd[pos + 1]).filter(|(f, b)| **f && **b).count();
            (alive, counts[pos + 1])
        })
        .collect();
    let connected = per_layer.iter().all(|&(alive, _)| alive > 0);
    ConnectivityReport { per_layer, connected }
}
