//! Central-difference verification of the hand-written backward pass.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Audio2RigModel, ModelError};
use crate::nn::Parameters;
use crate::rig::EmotionLabel;
use crate::trainer::{mse_grad, mse_loss};

/// One clip with a regression target.
#[derive(Clone, Debug)]
pub struct Probe {
    pub features: Array2<f64>,
    pub labels: Vec<EmotionLabel>,
    pub target: Array2<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, NORM_FLOOR)`.
    pub rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub groups: Vec<GroupError>,
}

/// Denominator floor for the relative error. Some gradients vanish
/// identically (a key bias shifts every logit of a softmax row equally), and
/// their central differences are pure rounding noise.
pub const NORM_FLOOR: f64 = 1e-6;

fn probe_loss(model: &Audio2RigModel, probe: &Probe) -> Result<f64, ModelError> {
    let (pred, _) = model.forward_train::<ChaCha8Rng>(&probe.features.view(), &probe.labels, None)?;
    Ok(mse_loss(&pred, &probe.target).expect("probe target shape"))
}

fn nudge(model: &mut Audio2RigModel, tensor: usize, entry: usize, delta: f64) {
    let mut i = 0;
    model.visit_mut("", &mut |_, data| {
        if i == tensor {
            data[entry] += delta;
        }
        i += 1;
    });
}

/// Compares analytic MSE gradients with central differences for every
/// parameter tensor. `max_per_tensor` limits the entries checked in large
/// tensors to an evenly spaced subset.
pub fn grad_check(
    model: &Audio2RigModel,
    probe: &Probe,
    eps: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport, ModelError> {
    let mut model = model.clone();
    model.config.dropout = 0.0;
    let (pred, tape) = model.forward_train::<ChaCha8Rng>(&probe.features.view(), &probe.labels, None)?;
    let d_pred = mse_grad(&pred, &probe.target).expect("probe target shape");
    let grad = model.backward(&probe.features.view(), &probe.labels, &tape, &d_pred);

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grad.visit("", &mut |name, _, data| analytic.push((name.to_string(), data.to_vec())));

    let mut groups = Vec::with_capacity(analytic.len());
    let mut max_abs_analytic = 0f64;
    for (tensor, (name, values)) in analytic.iter().enumerate() {
        let len = values.len();
        let stride = max_per_tensor.map_or(1, |m| len.div_ceil(m.max(1)));
        let (mut diff, mut a_norm, mut n_norm, mut checked) = (0.0, 0.0, 0.0, 0);
        for entry in (0..len).step_by(stride) {
            nudge(&mut model, tensor, entry, eps);
            let plus = probe_loss(&model, probe)?;
            nudge(&mut model, tensor, entry, -2.0 * eps);
            let minus = probe_loss(&model, probe)?;
            nudge(&mut model, tensor, entry, eps);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = values[entry];
            diff += (a - numeric).powi(2);
            a_norm += a * a;
            n_norm += numeric * numeric;
            max_abs_analytic = max_abs_analytic.max(a.abs());
            checked += 1;
        }
        let (a_norm, n_norm) = (a_norm.sqrt(), n_norm.sqrt());
        let rel_error = diff.sqrt() / (a_norm + n_norm).max(NORM_FLOOR);
        groups.push(GroupError { name: name.clone(), analytic_norm: a_norm, numeric_norm: n_norm, rel_error, checked });
    }
    let max_rel_error = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, max_abs_analytic, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio2rig::ModelConfig;
    use crate::nn::standard_normal;
    use crate::rig::RIG_CHANNELS;
    use rand::SeedableRng;

    fn probe(frames: usize, features: usize, seed: u64) -> Probe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = (0..frames).map(|t| EmotionLabel::ALL[t % 3]).collect();
        Probe {
            features: standard_normal((frames, features), &mut rng),
            labels,
            target: standard_normal((frames, RIG_CHANNELS), &mut rng) * 0.5,
        }
    }

    #[test]
    fn one_layer_two_heads() {
        let mut cfg = ModelConfig::desk(8, 16, 2, 1);
        cfg.d_ff = 32;
        cfg.emotion_dim = 16;
        let model = Audio2RigModel::new(cfg, 3).unwrap();
        let report = grad_check(&model, &probe(4, 8, 1), 1e-5, None).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:#?}");
        let mut tensors = 0;
        model.visit("", &mut |_, _, _| tensors += 1);
        assert_eq!(report.groups.len(), tensors);
    }

    #[test]
    fn linear_head_is_exact() {
        let model = Audio2RigModel::new(ModelConfig::desk(8, 16, 2, 0), 4).unwrap();
        let report = grad_check(&model, &probe(4, 8, 2), 1e-4, None).unwrap();
        let head: Vec<_> = report.groups.iter().filter(|g| g.name.starts_with("head")).collect();
        assert_eq!(head.len(), 2);
        for g in head {
            assert!(g.rel_error < 1e-8, "{g:?}");
        }
    }

    #[test]
    fn zero_loss_probe_has_zero_gradient() {
        let model = Audio2RigModel::new(ModelConfig::desk(8, 16, 2, 1), 5).unwrap();
        let mut p = probe(4, 8, 3);
        p.target = model.predict(&p.features.view(), &p.labels).unwrap();
        let report = grad_check(&model, &p, 1e-5, Some(8)).unwrap();
        assert_eq!(report.max_abs_analytic, 0.0);
        assert!(report.groups.iter().all(|g| g.numeric_norm < 1e-8));
    }
}
