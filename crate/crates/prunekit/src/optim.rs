//! Adam optimisation with mask-respecting updates, global-norm gradient
//! clipping, coupled L2 weight decay, and weight snapshot/rewind.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{accuracy, cross_entropy, cross_entropy_grad, Mode, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_magnitude: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
            clip_magnitude: Some(10.0),
        }
    }
}

/// Optimiser state: one first/second moment pair per parameter tensor, in
/// the model's parameter visitation order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(model: &Model, cfg: AdamConfig) -> Self {
        let mut moments = Vec::new();
        model.visit_params(&mut |_, t, _| moments.push((vec![0.0; t.len()], vec![0.0; t.len()])));
        Adam { cfg, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all parameters: clip first, add the L2 term to
    /// the gradient, then the bias-corrected moment update. Masked elements
    /// are left at exactly zero with their moments cleared so no update can
    /// leak back in later.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        let mut missing = false;
        model.visit_params(&mut |_, t, _| missing |= t.grad().is_none());
        if missing {
            return Err(Error::MissingGradients);
        }
        if let Some(magnitude) = self.cfg.clip_magnitude {
            clip_gradients(model, magnitude);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let cfg = self.cfg;
        let mut idx = 0usize;
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |_, tensor, mask| {
            let (m, v) = &mut moments[idx];
            idx += 1;
            let grads = tensor.grad().expect("checked above").to_vec();
            let data = tensor.data_mut();
            for i in 0..data.len() {
                if let Some(mask) = mask {
                    if mask.data()[i] == 0.0 {
                        data[i] = 0.0;
                        m[i] = 0.0;
                        v[i] = 0.0;
                        continue;
                    }
                }
                let g = grads[i] + cfg.weight_decay * data[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        });
        Ok(())
    }
}

/// Global L2-norm clipping: if the norm over all parameter gradients
/// exceeds `magnitude`, every gradient is scaled by `magnitude / norm`.
pub fn clip_gradients(model: &mut Model, magnitude: f64) {
    let mut sq = 0.0;
    model.visit_params(&mut |_, t, _| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > magnitude {
        let scale = magnitude / norm;
        model.visit_params_mut(&mut |_, t, _| {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        });
    }
}

/// Full copy of parameter values (not masks) at a given epoch.
#[derive(Clone, Debug)]
pub struct WeightSnapshot {
    pub epoch: usize,
    arch_tag: String,
    params: Vec<Vec<f64>>,
}

pub fn snapshot_weights(model: &Model, epoch: usize) -> WeightSnapshot {
    let mut params = Vec::new();
    model.visit_params(&mut |_, t, _| params.push(t.data().to_vec()));
    WeightSnapshot { epoch, arch_tag: model.arch_tag().to_string(), params }
}

/// Restores parameter values; current masks win, so masked positions are
/// re-zeroed even where the snapshot held nonzero values.
pub fn restore_weights(model: &mut Model, snapshot: &WeightSnapshot) -> Result<()> {
    if snapshot.arch_tag != model.arch_tag() {
        return Err(Error::ArchitectureMismatch {
            snapshot: snapshot.arch_tag.clone(),
            model: model.arch_tag().to_string(),
        });
    }
    let mut idx = 0usize;
    let mut shape_ok = true;
    model.visit_params_mut(&mut |_, t, _| {
        if idx >= snapshot.params.len() || snapshot.params[idx].len() != t.len() {
            shape_ok = false;
        } else {
            t.data_mut().copy_from_slice(&snapshot.params[idx]);
        }
        idx += 1;
    });
    if !shape_ok || idx != snapshot.params.len() {
        return Err(Error::ArchitectureMismatch {
            snapshot: snapshot.arch_tag.clone(),
            model: model.arch_tag().to_string(),
        });
    }
    for layer in &mut model.layers {
        layer.sync_masks();
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
}

/// Trains for `n_epochs` full passes with seeded shuffling; returns the
/// per-epoch mean loss and accuracy. Deterministic under (seed, data).
pub fn train_epochs(
    model: &mut Model,
    dataset: &Dataset,
    n_epochs: usize,
    batch_size: usize,
    optim: &mut Adam,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train_epochs_with_rng(model, dataset, n_epochs, batch_size, optim, &mut rng)
}

/// As [`train_epochs`] but drawing shuffles and dropout from a caller-owned
/// stream, so interleaved pruning phases keep one deterministic sequence.
pub fn train_epochs_with_rng(
    model: &mut Model,
    dataset: &Dataset,
    n_epochs: usize,
    batch_size: usize,
    optim: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochMetrics>> {
    if dataset.len() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut metrics = Vec::with_capacity(n_epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..n_epochs {
        model.set_mode(Mode::Train);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut hit_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let (x, y) = dataset.gather(chunk);
            let logits = model.forward(&x, Some(rng))?;
            let loss = cross_entropy(&logits, &y)?;
            let dl = cross_entropy_grad(&logits, &y)?;
            model.backward(&dl)?;
            optim.step(model)?;
            loss_sum += loss.scalar * chunk.len() as f64;
            hit_sum += accuracy(&logits, &y) * chunk.len() as f64;
            seen += chunk.len();
        }
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: hit_sum / seen as f64,
        });
    }
    Ok(metrics)
}

/// Mean loss and accuracy over a dataset in eval mode.
pub fn evaluate(model: &mut Model, dataset: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if dataset.len() == 0 {
        return Err(Error::EmptyDataset);
    }
    let saved = model.mode();
    model.set_mode(Mode::Eval);
    let mut loss_sum = 0.0;
    let mut hit_sum = 0.0;
    let order: Vec<usize> = (0..dataset.len()).collect();
    for chunk in order.chunks(batch_size) {
        let (x, y) = dataset.gather(chunk);
        let logits = model.forward(&x, None)?;
        loss_sum += cross_entropy(&logits, &y)?.scalar * chunk.len() as f64;
        hit_sum += accuracy(&logits, &y) * chunk.len() as f64;
    }
    model.set_mode(saved);
    Ok((loss_sum / dataset.len() as f64, hit_sum / dataset.len() as f64))
}

/// Forward/backward on one batch without updating; returns the loss.
pub fn compute_gradients(model: &mut Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = model.forward(x, None)?;
    let loss = cross_entropy(&logits, labels)?;
    let dl = cross_entropy_grad(&logits, labels)?;
    model.backward(&dl)?;
    Ok(loss.scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_architecture, ArchName, ArchSpec, Layer, ParamKind};

    fn tiny_model() -> Model {
        let spec = ArchSpec::new(ArchName::Mlp5, &[4], 2).with_width_scale(0.01);
        build_architecture(&spec).unwrap()
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut m = tiny_model();
        crate::nn::init_orthogonal(&mut m, 1);
        let before: Vec<Vec<f64>> = {
            let mut v = Vec::new();
            m.visit_params(&mut |_, t, _| v.push(t.data().to_vec()));
            v
        };
        m.visit_params_mut(&mut |_, t, _| {
            t.grad_or_init().iter_mut().for_each(|g| *g = 0.0);
        });
        let mut adam = Adam::new(&m, AdamConfig { weight_decay: 0.0, ..Default::default() });
        adam.step(&mut m).unwrap();
        let mut idx = 0;
        m.visit_params(&mut |_, t, _| {
            assert_eq!(t.data(), before[idx].as_slice());
            idx += 1;
        });
    }

    #[test]
    fn single_scalar_matches_hand_computed_update() {
        // w = 1, g = 0.1, defaults minus decay/clip; first step by the
        // standard formulas written out by hand:
        //   m   = 0.1 * 0.1        = 0.01
        //   v   = 0.001 * 0.01     = 1e-5
        //   m^  = 0.01 / 0.1       = 0.1
        //   v^  = 1e-5 / 0.001     = 0.01
        //   w'  = 1 - 2e-3 * 0.1 / (0.1 + 1e-8)
        let expected = 1.0 - 2e-3 * 0.1 / (0.1f64 + 1e-8);

        let mut m = Model::from_parts(
            vec![Layer::Linear(crate::nn::Linear::new(1, 1))],
            vec![1],
            1,
            "scalar".into(),
        );
        if let Layer::Linear(l) = &mut m.layers[0] {
            l.weight.data_mut()[0] = 1.0;
            l.weight.set_grad(vec![0.1]);
            l.bias.set_grad(vec![0.0]);
        }
        let mut adam = Adam::new(
            &m,
            AdamConfig { weight_decay: 0.0, clip_magnitude: None, ..Default::default() },
        );
        adam.step(&mut m).unwrap();
        if let Layer::Linear(l) = &m.layers[0] {
            assert!((l.weight.data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_element_stays_zero_under_nonzero_gradient() {
        let mut m = tiny_model();
        crate::nn::init_orthogonal(&mut m, 2);
        if let Layer::Linear(l) = &mut m.layers[1] {
            l.weight_mask.data_mut()[0] = 0.0;
            l.sync_masks();
        }
        m.visit_params_mut(&mut |d, t, _| {
            let n = t.len();
            if d.kind == ParamKind::Weight {
                t.set_grad(vec![0.5; n]);
            } else {
                t.set_grad(vec![0.0; n]);
            }
        });
        let mut adam = Adam::new(&m, AdamConfig::default());
        adam.step(&mut m).unwrap();
        if let Layer::Linear(l) = &m.layers[1] {
            assert_eq!(l.weight.data()[0], 0.0);
        }
    }

    #[test]
    fn clip_is_identity_below_threshold_and_idempotent_above() {
        let mut m = tiny_model();
        // Construct gradients with a known norm.
        let mut total = 0usize;
        m.visit_params(&mut |_, t, _| total += t.len());
        let per = 20.0 / (total as f64).sqrt(); // norm 20
        m.visit_params_mut(&mut |_, t, _| {
            let n = t.len();
            t.set_grad(vec![per; n]);
        });
        clip_gradients(&mut m, 10.0);
        let mut sq = 0.0;
        m.visit_params(&mut |_, t, _| sq += t.grad().unwrap().iter().map(|v| v * v).sum::<f64>());
        assert!((sq.sqrt() - 10.0).abs() < 1e-9);

        // Second application changes nothing.
        let before: Vec<f64> = {
            let mut v = Vec::new();
            m.visit_params(&mut |_, t, _| v.extend_from_slice(t.grad().unwrap()));
            v
        };
        clip_gradients(&mut m, 10.0);
        let after: Vec<f64> = {
            let mut v = Vec::new();
            m.visit_params(&mut |_, t, _| v.extend_from_slice(t.grad().unwrap()));
            v
        };
        assert_eq!(before, after);

        // All-zero gradients: no NaNs, unchanged.
        m.visit_params_mut(&mut |_, t, _| {
            let n = t.len();
            t.set_grad(vec![0.0; n]);
        });
        clip_gradients(&mut m, 10.0);
        m.visit_params(&mut |_, t, _| assert!(t.grad().unwrap().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn snapshot_restore_roundtrip_and_mask_precedence() {
        let mut m = tiny_model();
        crate::nn::init_orthogonal(&mut m, 3);
        let snap = snapshot_weights(&m, 0);

        // Perturb, restore: bitwise identical.
        m.visit_params_mut(&mut |_, t, _| t.data_mut().iter_mut().for_each(|v| *v += 1.0));
        restore_weights(&mut m, &snap).unwrap();
        let mut idx = 0;
        m.visit_params(&mut |_, t, _| {
            assert_eq!(t.data(), snap.params[idx].as_slice());
            idx += 1;
        });

        // Mask a weight, restore: masked position stays zero.
        if let Layer::Linear(l) = &mut m.layers[1] {
            l.weight_mask.data_mut()[0] = 0.0;
            l.sync_masks();
        }
        restore_weights(&mut m, &snap).unwrap();
        if let Layer::Linear(l) = &m.layers[1] {
            assert_eq!(l.weight.data()[0], 0.0);
        }

        // Different architecture: error.
        let mut other =
            build_architecture(&ArchSpec::new(ArchName::Mlp5, &[4], 2).with_width_scale(0.02))
                .unwrap();
        assert!(matches!(
            restore_weights(&mut other, &snap),
            Err(Error::ArchitectureMismatch { .. })
        ));
    }
}
