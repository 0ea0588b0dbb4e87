//! Central finite differences against backpropagated gradients.

use serde::Serialize;

use super::model::{FusionClassifier, WeightedExample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Max over parameters of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter index attaining the maximum.
    pub worst_param: usize,
    /// Max relative error within each named block.
    pub per_block: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Step that balances truncation and roundoff for [`grad_check`] on
/// unit-scale inputs.
pub const DEFAULT_STEP: f64 = 3e-3;

/// Compares every parameter's analytic gradient of the batch loss with the
/// five-point central difference
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
///
/// The fourth-order stencil allows a step large enough that roundoff in the
/// loss stays well below the smallest gradients compared; the two-point
/// rule cannot resolve gradients near the `1e-8` floor.
pub fn grad_check(model: &FusionClassifier, batch: &[WeightedExample<'_>], step: f64) -> Result<GradCheckReport> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {step}")));
    }
    let (_, analytic) = model.loss_and_grad(batch)?;
    let mut probe = model.clone();
    let mut errors = Vec::with_capacity(analytic.len());
    for (i, &exact) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        let mut at = |delta: f64| {
            probe.params_mut()[i] = orig + delta;
            probe.loss(batch)
        };
        let numeric = (-at(2.0 * step)? + 8.0 * at(step)? - 8.0 * at(-step)? + at(-2.0 * step)?) / (12.0 * step);
        probe.params_mut()[i] = orig;
        errors.push(relative_error(exact, numeric));
    }
    let (worst_param, max_rel_error) =
        errors.iter().copied().enumerate().fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let per_block = model
        .blocks()
        .map(|(name, offset, rows, cols)| {
            let worst = errors[offset..offset + rows * cols].iter().copied().fold(0.0, f64::max);
            (name.to_string(), worst)
        })
        .collect();
    Ok(GradCheckReport { max_rel_error, worst_param, per_block })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::loss::{softmax, SoftLabel, Target};
    use crate::neural::model::{ModelConfig, ModelInput, Scheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(n: usize, comments: usize, di: usize, dt: usize, seed: u64) -> Vec<ModelInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |d: usize| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        (0..n)
            .map(|_| ModelInput { image: v(di), text: v(dt), comments: (0..comments).map(|_| v(dt)).collect() })
            .collect()
    }

    #[test]
    fn both_schemes_pass_on_mixed_targets() {
        for scheme in [Scheme::Early, Scheme::Late] {
            let cfg = ModelConfig { hidden: 4, attn_hidden: 3, ..ModelConfig::new(scheme, 5, 4, 3) };
            let model = FusionClassifier::new(cfg, 11).unwrap();
            let xs = inputs(3, 4, 5, 4, 2);
            let batch = vec![
                WeightedExample { input: &xs[0], target: Target::Label(2), weight: 0.5 },
                WeightedExample { input: &xs[1], target: Target::Label(0), weight: 0.5 },
                WeightedExample {
                    input: &xs[2],
                    target: Target::Soft(SoftLabel::new(vec![0.2, 0.5, 0.3]).unwrap()),
                    weight: 1.0,
                },
            ];
            let report = grad_check(&model, &batch, DEFAULT_STEP).unwrap();
            assert!(report.max_rel_error < 1e-5, "{scheme}: {report:?}");
        }
    }

    #[test]
    fn ignored_block_has_zero_gradient() {
        // With one comment the attention weight is 1 whatever the scorer says.
        let cfg = ModelConfig { hidden: 3, attn_hidden: 2, ..ModelConfig::new(Scheme::Early, 4, 3, 2) };
        let model = FusionClassifier::new(cfg, 1).unwrap();
        let xs = inputs(1, 1, 4, 3, 5);
        let batch = [WeightedExample { input: &xs[0], target: Target::Label(1), weight: 1.0 }];
        let (_, grad) = model.loss_and_grad(&batch).unwrap();
        for (name, off, rows, cols) in model.blocks() {
            if name.starts_with("early.attn") {
                assert!(grad[off..off + rows * cols].iter().all(|&g| g == 0.0), "{name}");
            }
        }
        let report = grad_check(&model, &batch, DEFAULT_STEP).unwrap();
        for (name, err) in &report.per_block {
            if name.starts_with("early.attn") {
                assert!(*err < 1e-3, "{name}: {err}");
            }
        }
    }

    #[test]
    fn head_gradient_is_softmax_minus_onehot_times_input() {
        let cfg = ModelConfig { hidden: 3, attn_hidden: 2, ..ModelConfig::new(Scheme::Late, 4, 3, 3) };
        let model = FusionClassifier::new(cfg, 8).unwrap();
        let xs = inputs(1, 2, 4, 3, 6);
        let batch = [WeightedExample { input: &xs[0], target: Target::Label(1), weight: 1.0 }];
        let (_, grad) = model.loss_and_grad(&batch).unwrap();
        let out = model.forward(&xs[0]).unwrap();
        let mut delta = softmax(&out.logits);
        delta[1] -= 1.0;
        let (_, off, _, _) = model.blocks().find(|b| b.0 == "head.bias").unwrap();
        for c in 0..3 {
            assert!((grad[off + c] - delta[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_steps() {
        let cfg = ModelConfig { hidden: 2, attn_hidden: 2, ..ModelConfig::new(Scheme::Early, 2, 2, 2) };
        let model = FusionClassifier::new(cfg, 0).unwrap();
        let xs = inputs(1, 1, 2, 2, 0);
        let batch = [WeightedExample { input: &xs[0], target: Target::Label(0), weight: 1.0 }];
        for step in [0.0, -1e-3, f64::NAN] {
            assert!(matches!(grad_check(&model, &batch, step), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
