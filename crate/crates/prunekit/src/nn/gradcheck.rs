use crate::error::{Error, Result};
use crate::nn::{cross_entropy, cross_entropy_grad, Layer, Mode, Model};
use crate::tensor::Tensor;

const PARAM_BUDGET: usize = 10_000;

/// Relative error with a floor so near-zero gradient pairs compare in
/// absolute terms.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn snapshot_bn_stats(model: &Model) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    for layer in &model.layers {
        if let Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b) = layer {
            out.push((b.running_mean.clone(), b.running_var.clone()));
        }
    }
    out
}

fn restore_bn_stats(model: &mut Model, stats: &[(Vec<f64>, Vec<f64>)]) {
    let mut it = stats.iter();
    for layer in &mut model.layers {
        if let Layer::BatchNorm1d(b) | Layer::BatchNorm2d(b) = layer {
            let (m, v) = it.next().expect("stat snapshot out of sync");
            b.running_mean.clone_from(m);
            b.running_var.clone_from(v);
        }
    }
}

/// Compares analytic parameter gradients against central finite differences
/// on the mean cross-entropy; returns the worst relative error.
///
/// Runs with dropout forced off (perturbations must see a deterministic
/// forward); batch-norm running statistics are restored afterwards, so the
/// check has no side effects.
pub fn grad_check(model: &mut Model, x: &Tensor, labels: &[usize], step: f64) -> Result<f64> {
    let mut n_params = 0usize;
    model.visit_params(&mut |_, t, _| n_params += t.len());
    if n_params > PARAM_BUDGET {
        return Err(Error::InvalidDimension(format!(
            "grad_check limited to {PARAM_BUDGET} parameters, model has {n_params}"
        )));
    }

    let stats = snapshot_bn_stats(model);
    model.set_dropout_disabled(true);
    let result = (|| -> Result<f64> {
        let logits = model.forward(x, None)?;
        let dl = cross_entropy_grad(&logits, labels)?;
        model.backward(&dl)?;

        let descs = model.param_descs();
        let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(descs.len());
        for &d in &descs {
            analytic.push(
                model
                    .param_tensor(d)
                    .grad()
                    .ok_or(Error::MissingGradients)?
                    .to_vec(),
            );
        }

        let mut worst = 0.0f64;
        for (d, grads) in descs.iter().zip(&analytic) {
            for i in 0..grads.len() {
                let original = model.param_tensor(*d).data()[i];

                model.param_tensor_mut(*d).data_mut()[i] = original + step;
                restore_bn_stats(model, &stats);
                let lp = {
                    let logits = model.forward(x, None)?;
                    cross_entropy(&logits, labels)?.scalar
                };

                model.param_tensor_mut(*d).data_mut()[i] = original - step;
                restore_bn_stats(model, &stats);
                let lm = {
                    let logits = model.forward(x, None)?;
                    cross_entropy(&logits, labels)?.scalar
                };

                model.param_tensor_mut(*d).data_mut()[i] = original;
                let fd = (lp - lm) / (2.0 * step);
                worst = worst.max(rel_err(grads[i], fd));
            }
        }
        Ok(worst)
    })();
    restore_bn_stats(model, &stats);
    model.set_dropout_disabled(false);
    result
}

/// Absolute gradient of the maximum logit with respect to the input pixels,
/// scaled into [0, 1]. Evaluated in eval mode on a single sample.
pub fn input_saliency(model: &mut Model, sample: &Tensor) -> Result<Tensor> {
    let saved_mode = model.mode();
    model.set_mode(Mode::Eval);
    let result = (|| -> Result<Tensor> {
        let logits = model.forward(sample, None)?;
        let mut best = 0usize;
        for (i, v) in logits.data().iter().enumerate() {
            if *v > logits.data()[best] {
                best = i;
            }
        }
        let mut seed = vec![0.0; logits.len()];
        seed[best] = 1.0;
        model.backward(&Tensor::from_vec(logits.shape(), seed))?;
        let g = model.input_grad().expect("backward stores the input gradient");
        let mut abs: Vec<f64> = g.data().iter().map(|v| v.abs()).collect();
        let max = abs.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            abs.iter_mut().for_each(|v| *v /= max);
        }
        Ok(Tensor::from_vec(g.shape(), abs))
    })();
    model.set_mode(saved_mode);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_architecture, init_orthogonal, ArchName, ArchSpec};

    #[test]
    fn two_layer_mlp_passes() {
        let spec = ArchSpec::new(ArchName::Mlp5, &[6], 3).with_width_scale(0.02); // width 10
        let mut m = build_architecture(&spec).unwrap();
        init_orthogonal(&mut m, 3);
        m.set_mode(Mode::Train);
        let x = Tensor::from_vec(&[4, 6], (0..24).map(|i| (i as f64 * 0.37).sin()).collect());
        let err = grad_check(&mut m, &x, &[0, 1, 2, 0], 1e-5).unwrap();
        assert!(err < 1e-4, "grad_check error {err}");
    }

    #[test]
    fn saliency_is_zero_when_input_layer_masked() {
        let spec = ArchSpec::new(ArchName::Mlp5, &[5], 2).with_width_scale(0.01);
        let mut m = build_architecture(&spec).unwrap();
        init_orthogonal(&mut m, 1);
        // Mask every weight of the first linear layer.
        for layer in &mut m.layers {
            if let Layer::Linear(l) = layer {
                l.weight_mask.data_mut().iter_mut().for_each(|v| *v = 0.0);
                l.sync_masks();
                break;
            }
        }
        let s = input_saliency(&mut m, &Tensor::from_vec(&[1, 5], vec![1.0; 5])).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saliency_of_linear_model_tracks_weight_magnitudes() {
        // Single linear layer: logit_o = sum_i w_oi x_i, saliency ∝ |w_best,i|.
        let mut m = Model::from_parts(
            vec![Layer::Linear(crate::nn::Linear::new(4, 2))],
            vec![4],
            2,
            "tiny".into(),
        );
        if let Layer::Linear(l) = &mut m.layers[0] {
            l.weight.data_mut().copy_from_slice(&[0.5, -2.0, 1.0, 0.25, -0.1, -0.1, -0.1, -0.1]);
        }
        let s = input_saliency(&mut m, &Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 1.0, 1.0]))
            .unwrap();
        // Logit 0 wins; |w| = [0.5, 2, 1, 0.25] -> normalised by 2.
        let want = [0.25, 1.0, 0.5, 0.125];
        for (a, b) in s.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
