//! Iterative sparsification: elasticity scoring, the halving schedule and
//! its drivers (unstructured, structured, combined), plus random and
//! magnitude baselines.

pub mod connectivity;
pub mod rank;
pub mod score;
pub mod shrink;

pub use connectivity::{connectivity_check, ConnectivityReport};
pub use rank::{
    prune_node, rank_and_prune_nodes, rank_and_prune_union, rank_and_prune_weights, PruneOutcome,
};
pub use score::{
    node_elasticity, node_saliency_raw, union_elasticity, union_saliency_raw, weight_elasticity,
    weight_magnitude, weight_saliency_raw, ScoreMap, PRUNED_SENTINEL,
};
pub use shrink::shrink_structured;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{criterion_batch, Dataset, CRITERION_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Mode, Model};
use crate::optim::{restore_weights, snapshot_weights, train_epochs_with_rng, Adam};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneTarget {
    Weights,
    Nodes,
    Union,
}

/// The iterative schedule: final sparsity, epochs between events, number of
/// halving steps, and the structure type. `epsilon` is the final-step
/// proximity tolerance; the final event always fires after step `s`, so it
/// is bookkeeping only.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub kappa_final: f64,
    pub tau: usize,
    pub steps: usize,
    pub epsilon: f64,
    pub target: PruneTarget,
}

impl PruneSchedule {
    pub fn new(kappa_final: f64, tau: usize, steps: usize, target: PruneTarget) -> Self {
        PruneSchedule { kappa_final, tau, steps, epsilon: 0.0, target }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_final > 0.0 && self.kappa_final < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "kappa_final {} outside (0, 1)",
                self.kappa_final
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidSchedule("steps must be >= 1".into()));
        }
        Ok(())
    }

    /// The halving schedule only makes sense above one half; below that (or
    /// with a single step) one event at the final sparsity is used.
    pub fn is_degenerate(&self) -> bool {
        self.steps == 1 || self.kappa_final <= 0.5
    }
}

/// `κ_i = κ_final − (κ_final − 1/2) · (1/2)^i` — half first, then half of
/// the remainder at each later step.
pub fn schedule_kappa(i: usize, s: usize, kappa_final: f64) -> f64 {
    debug_assert!(i < s, "step index {i} out of range {s}");
    kappa_final - (kappa_final - 0.5) * 0.5f64.powi(i as i32)
}

/// One pruning event for the JSON-lines log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: usize,
    pub kappa_requested: f64,
    pub kappa_achieved: f64,
    pub per_layer_pruned: Vec<usize>,
    pub loss_before: f64,
    pub loss_after: f64,
}

pub fn event_log_to_jsonl(events: &[PruneEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn event_log_from_jsonl(s: &str) -> Result<Vec<PruneEvent>> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Eval-mode mean loss over criterion sub-batches, weighted by size.
fn batches_loss(model: &mut Model, batches: &[(Tensor, Vec<usize>)]) -> Result<f64> {
    let saved = model.mode();
    model.set_mode(Mode::Eval);
    let mut sum = 0.0;
    let mut n = 0usize;
    let result = (|| -> Result<()> {
        for (x, y) in batches {
            let logits = model.forward(x, None)?;
            sum += cross_entropy(&logits, y)?.scalar * y.len() as f64;
            n += y.len();
        }
        Ok(())
    })();
    model.set_mode(saved);
    result?;
    Ok(sum / n as f64)
}

fn weight_scores(model: &mut Model, batches: &[(Tensor, Vec<usize>)]) -> Result<(ScoreMap, f64)> {
    match weight_elasticity(model, batches) {
        Ok(s) => {
            let loss = s.normaliser;
            Ok((s, loss))
        }
        Err(Error::DegenerateLoss) => {
            log::warn!("loss is zero; ranking on unnormalised |g·θ|");
            Ok((weight_saliency_raw(model, batches)?, 0.0))
        }
        Err(e) => Err(e),
    }
}

fn node_scores(model: &mut Model, batches: &[(Tensor, Vec<usize>)]) -> Result<(ScoreMap, f64)> {
    match node_elasticity(model, batches) {
        Ok(s) => {
            let loss = s.normaliser;
            Ok((s, loss))
        }
        Err(Error::DegenerateLoss) => {
            log::warn!("loss is zero; ranking on unnormalised |∂L/∂c|");
            Ok((node_saliency_raw(model, batches)?, 0.0))
        }
        Err(e) => Err(e),
    }
}

fn union_scores(model: &mut Model, batches: &[(Tensor, Vec<usize>)]) -> Result<(ScoreMap, f64)> {
    match union_elasticity(model, batches) {
        Ok(s) => {
            let loss = s.normaliser;
            Ok((s, loss))
        }
        Err(Error::DegenerateLoss) => {
            log::warn!("loss is zero; ranking on unnormalised saliencies");
            Ok((union_saliency_raw(model, batches)?, 0.0))
        }
        Err(e) => Err(e),
    }
}

/// The event sparsities a schedule will request, in order.
pub fn event_kappas(schedule: &PruneSchedule) -> Vec<f64> {
    if schedule.is_degenerate() {
        vec![schedule.kappa_final]
    } else {
        let mut ks: Vec<f64> = (0..schedule.steps)
            .map(|i| schedule_kappa(i, schedule.steps, schedule.kappa_final))
            .collect();
        ks.push(schedule.kappa_final);
        ks
    }
}

type Scorer = fn(&mut Model, &[(Tensor, Vec<usize>)]) -> Result<(ScoreMap, f64)>;
type Pruner = fn(&mut Model, &ScoreMap, f64) -> Result<PruneOutcome>;

#[allow(clippy::too_many_arguments)]
fn run_schedule(
    model: &mut Model,
    data: &Dataset,
    schedule: &PruneSchedule,
    optim: Option<&mut Adam>,
    batch_size: usize,
    train_rng: Option<&mut ChaCha8Rng>,
    crit_rng: &mut ChaCha8Rng,
    scorer: Scorer,
    pruner: Pruner,
) -> Result<Vec<PruneEvent>> {
    schedule.validate()?;
    let kappas = event_kappas(schedule);
    let mut events = Vec::with_capacity(kappas.len());
    let mut optim = optim;
    let mut train_rng = train_rng;
    for (step, &kappa) in kappas.iter().enumerate() {
        // The final event follows the last loop event without training.
        let is_final_extra = !schedule.is_degenerate() && step == kappas.len() - 1;
        if schedule.tau > 0 && !is_final_extra {
            let optim = optim.as_deref_mut().expect("training interval needs an optimiser");
            let rng = train_rng.as_deref_mut().expect("training interval needs an rng");
            train_epochs_with_rng(model, data, schedule.tau, batch_size, optim, rng)?;
        }
        let batches = criterion_batch(data, CRITERION_BATCH_SIZE, crit_rng);
        let (scores, loss_before) = scorer(model, &batches)?;
        let outcome = pruner(model, &scores, kappa)?;
        let loss_after = batches_loss(model, &batches)?;
        events.push(PruneEvent {
            step,
            kappa_requested: outcome.kappa_requested,
            kappa_achieved: outcome.kappa_achieved,
            per_layer_pruned: outcome.per_layer_pruned,
            loss_before,
            loss_after,
        });
    }
    Ok(events)
}

/// Iterative unstructured pruning: `s` halving events separated by `tau`
/// training epochs, then a final event to `kappa_final`. With `s = 1` (or
/// `kappa_final <= 0.5`) this is exactly one-shot pruning on one criterion
/// batch.
pub fn snip_it(
    model: &mut Model,
    data: &Dataset,
    schedule: &PruneSchedule,
    optim: &mut Adam,
    batch_size: usize,
    train_rng: &mut ChaCha8Rng,
    crit_rng: &mut ChaCha8Rng,
) -> Result<Vec<PruneEvent>> {
    if schedule.target != PruneTarget::Weights {
        return Err(Error::InvalidSchedule("snip-it prunes weights".into()));
    }
    run_schedule(
        model,
        data,
        schedule,
        Some(optim),
        batch_size,
        Some(train_rng),
        crit_rng,
        weight_scores,
        rank_and_prune_weights,
    )
}

/// Structured node pruning before training; the pruned model is then
/// physically shrunk and returned alongside the event log.
pub fn snap_it(
    model: &mut Model,
    data: &Dataset,
    schedule: &PruneSchedule,
    crit_rng: &mut ChaCha8Rng,
) -> Result<(Model, Vec<PruneEvent>)> {
    if schedule.target != PruneTarget::Nodes {
        return Err(Error::InvalidSchedule("snap-it prunes nodes".into()));
    }
    if schedule.tau != 0 {
        return Err(Error::InvalidSchedule("snap-it runs before training (tau = 0)".into()));
    }
    let events = run_schedule(
        model,
        data,
        schedule,
        None,
        0,
        None,
        crit_rng,
        node_scores,
        rank_and_prune_nodes,
    )?;
    let shrunk = shrink_structured(model)?;
    Ok((shrunk, events))
}

/// Combined pruning: weights and nodes pooled and ranked on an equal
/// footing; sparsity accounting is over weights.
pub fn cnip_it(
    model: &mut Model,
    data: &Dataset,
    schedule: &PruneSchedule,
    optim: &mut Adam,
    batch_size: usize,
    train_rng: &mut ChaCha8Rng,
    crit_rng: &mut ChaCha8Rng,
) -> Result<Vec<PruneEvent>> {
    if schedule.target != PruneTarget::Union {
        return Err(Error::InvalidSchedule("cnip-it prunes the weight/node union".into()));
    }
    run_schedule(
        model,
        data,
        schedule,
        Some(optim),
        batch_size,
        Some(train_rng),
        crit_rng,
        union_scores,
        rank_and_prune_union,
    )
}

/// Uniform random baseline over unmasked weights or surviving nodes (with
/// the same structural safeguards).
pub fn random_prune(
    model: &mut Model,
    kappa: f64,
    target: PruneTarget,
    rng: &mut ChaCha8Rng,
) -> Result<PruneOutcome> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::InvalidSchedule(format!("kappa {kappa} outside [0, 1)")));
    }
    let param_layers = model.param_layer_indices();
    match target {
        PruneTarget::Weights => {
            let (unmasked, total) = model.weight_counts();
            let current = total - unmasked;
            let target_pruned = (kappa * total as f64).round() as usize;
            if target_pruned < current {
                return Err(Error::TargetBelowCurrent {
                    requested: kappa,
                    current: current as f64 / total as f64,
                });
            }
            let mut pool: Vec<(usize, usize)> = Vec::with_capacity(unmasked);
            for (pos, &li) in param_layers.iter().enumerate() {
                let mask = model.layers[li].weight_mask().unwrap().data();
                pool.extend(
                    mask.iter().enumerate().filter(|(_, &m)| m != 0.0).map(|(i, _)| (pos, i)),
                );
            }
            // Partial Fisher-Yates over the pool.
            let take = (target_pruned - current).min(pool.len());
            let mut per_layer = vec![0usize; param_layers.len()];
            for i in 0..take {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
                let (pos, idx) = pool[i];
                match &mut model.layers[param_layers[pos]] {
                    crate::nn::Layer::Linear(l) => l.weight_mask.data_mut()[idx] = 0.0,
                    crate::nn::Layer::Conv2d(c) => c.weight_mask.data_mut()[idx] = 0.0,
                    _ => unreachable!(),
                }
                per_layer[pos] += 1;
            }
            for &li in &param_layers {
                model.layers[li].sync_masks();
            }
            Ok(PruneOutcome {
                kappa_requested: kappa,
                kappa_achieved: (current + take) as f64 / total as f64,
                per_layer_pruned: per_layer,
                weights_pruned: take,
                nodes_pruned: 0,
            })
        }
        PruneTarget::Nodes => {
            let (alive, total) = model.node_counts();
            let current = total - alive;
            let target_pruned = (kappa * total as f64).round() as usize;
            if target_pruned < current {
                return Err(Error::TargetBelowCurrent {
                    requested: kappa,
                    current: current as f64 / total as f64,
                });
            }
            let last_pos = param_layers.len() - 1;
            let mut pool: Vec<(usize, usize)> = Vec::new();
            for (pos, &li) in param_layers.iter().enumerate() {
                if pos == last_pos {
                    continue;
                }
                let nm = model.layers[li].node_mask().unwrap();
                pool.extend(
                    nm.iter().enumerate().filter(|(_, &m)| m != 0.0).map(|(n, _)| (pos, n)),
                );
            }
            use rand::seq::SliceRandom;
            pool.shuffle(rng);
            let mut per_layer = vec![0usize; param_layers.len()];
            let mut pruned_now = 0usize;
            let mut weights_pruned = 0usize;
            for &(pos, node) in &pool {
                if current + pruned_now >= target_pruned {
                    break;
                }
                let layer = &model.layers[param_layers[pos]];
                let survivors = layer.node_mask().unwrap().iter().filter(|&&m| m != 0.0).count();
                if survivors <= 1 {
                    continue;
                }
                let newly = prune_node(model, pos, node);
                for (p, n) in per_layer.iter_mut().zip(&newly) {
                    *p += n;
                }
                weights_pruned += newly.iter().sum::<usize>();
                pruned_now += 1;
            }
            Ok(PruneOutcome {
                kappa_requested: kappa,
                kappa_achieved: (current + pruned_now) as f64 / total as f64,
                per_layer_pruned: per_layer,
                weights_pruned,
                nodes_pruned: pruned_now,
            })
        }
        PruneTarget::Union => {
            Err(Error::InvalidSchedule("random pruning targets weights or nodes".into()))
        }
    }
}

/// Global iterative magnitude pruning with weight rewinding: train to the
/// rewind epoch and snapshot; each round trains `tau` epochs, prunes the
/// smallest-magnitude survivors to the schedule's sparsity and restores the
/// snapshot (masks kept); the final prune to `kappa_final` follows the last
/// restore. Returns the event log and epochs consumed.
#[allow(clippy::too_many_arguments)]
pub fn imp_global(
    model: &mut Model,
    data: &Dataset,
    kappa_final: f64,
    tau: usize,
    rewind_epoch: usize,
    steps: usize,
    optim: &mut Adam,
    batch_size: usize,
    train_rng: &mut ChaCha8Rng,
    crit_rng: &mut ChaCha8Rng,
) -> Result<(Vec<PruneEvent>, usize)> {
    let schedule = PruneSchedule::new(kappa_final, tau, steps, PruneTarget::Weights);
    schedule.validate()?;
    train_epochs_with_rng(model, data, rewind_epoch, batch_size, optim, train_rng)?;
    let snapshot = snapshot_weights(model, rewind_epoch);

    let kappas = event_kappas(&schedule);
    let mut events = Vec::with_capacity(kappas.len());
    let mut epochs = rewind_epoch;
    for (step, &kappa) in kappas.iter().enumerate() {
        let is_final_extra = !schedule.is_degenerate() && step == kappas.len() - 1;
        if !is_final_extra {
            train_epochs_with_rng(model, data, tau, batch_size, optim, train_rng)?;
            epochs += tau;
        }
        let batches = criterion_batch(data, CRITERION_BATCH_SIZE, crit_rng);
        let loss_before = batches_loss(model, &batches)?;
        let scores = weight_magnitude(model);
        let outcome = rank_and_prune_weights(model, &scores, kappa)?;
        let loss_after = batches_loss(model, &batches)?;
        events.push(PruneEvent {
            step,
            kappa_requested: outcome.kappa_requested,
            kappa_achieved: outcome.kappa_achieved,
            per_layer_pruned: outcome.per_layer_pruned,
            loss_before,
            loss_after,
        });
        if !is_final_extra {
            restore_weights(model, &snapshot)?;
        }
    }
    Ok((events, epochs))
}
