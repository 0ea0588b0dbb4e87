//! The classifier, losses and optimizer checked against straightforward
//! reference implementations written from the definitions.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmc_core::neural::{
    adamw_step, attend_comments, cross_entropy_loss, kl_loss, AdamW, AdamWState, ModelInput, Target,
};
use xmc_core::{FusionClassifier, ModelConfig, Scheme, SoftLabel};

/// Named parameter blocks as plain matrices.
struct Params<'a> {
    model: &'a FusionClassifier,
}

impl Params<'_> {
    fn block(&self, name: &str) -> (Vec<Vec<f64>>, usize, usize) {
        let (_, off, rows, cols) = self.model.blocks().find(|b| b.0 == name).unwrap_or_else(|| panic!("{name}"));
        let p = self.model.params();
        let m = (0..rows).map(|r| p[off + r * cols..off + (r + 1) * cols].to_vec()).collect();
        (m, rows, cols)
    }

    /// `W x + b` for the layer called `name`.
    fn affine(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (w, _, cols) = self.block(&format!("{name}.weight"));
        assert_eq!(cols, x.len(), "{name}");
        let (b, _, _) = self.block(&format!("{name}.bias"));
        w.iter().zip(&b).map(|(row, bi)| bi[0] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
    }

    fn attention(&self, name: &str, anchor: &[f64], states: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let (v, _, _) = self.block(&format!("{name}.out"));
        let scores: Vec<f64> = states
            .iter()
            .map(|h| {
                let joined: Vec<f64> = anchor.iter().chain(h).copied().collect();
                let act = self.affine(&format!("{name}.hidden"), &joined);
                act.iter().zip(&v[0]).map(|(a, w)| a.tanh() * w).sum()
            })
            .collect();
        let betas = reference_softmax(&scores);
        let mut u = vec![0.0; anchor.len()];
        for (b, h) in betas.iter().zip(states) {
            for (ui, hi) in u.iter_mut().zip(h) {
                *ui += b * hi;
            }
        }
        (u, betas)
    }
}

fn reference_softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn tanh_all(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::tanh).collect()
}

/// Logits and attention weights computed layer by layer.
fn reference_forward(model: &FusionClassifier, x: &ModelInput) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = Params { model };
    let joint: Vec<f64> = x.image.iter().chain(&x.text).copied().collect();
    let hf = p.affine("base.out", &tanh_all(p.affine("base.hidden", &joint)));
    match model.config().scheme {
        Scheme::Early => {
            let proj = p.affine("early.image_proj", &x.image);
            let states: Vec<Vec<f64>> = x
                .comments
                .iter()
                .map(|c| tanh_all(p.affine("early.comment", &proj.iter().chain(c).copied().collect::<Vec<_>>())))
                .collect();
            let (u, betas) = p.attention("early.attn", &hf, &states);
            let head_in: Vec<f64> = hf.iter().chain(&u).copied().collect();
            (p.affine("head", &head_in), vec![betas])
        }
        Scheme::Late => {
            let hv = p.affine("late.image_proj", &x.image);
            let ht = p.affine("late.text_proj", &x.text);
            let states: Vec<Vec<f64>> = x.comments.iter().map(|c| tanh_all(p.affine("late.comment", c))).collect();
            let (uv, bv) = p.attention("late.image_attn", &hv, &states);
            let (ut, bt) = p.attention("late.text_attn", &ht, &states);
            let head_in: Vec<f64> = uv.iter().chain(&ut).chain(&hf).copied().collect();
            (p.affine("head", &head_in), vec![bv, bt])
        }
    }
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, di: usize, dt: usize) -> ModelInput {
    let mut v = |d: usize| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    ModelInput { image: v(di), text: v(dt), comments: (0..n).map(|_| v(dt)).collect() }
}

#[test]
fn forward_matches_layerwise_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for scheme in [Scheme::Early, Scheme::Late] {
        for seed in 0..4 {
            let mut config = ModelConfig::new(scheme, 7, 5, 3);
            config.hidden = 6;
            config.attn_hidden = 4;
            let model = FusionClassifier::new(config, seed).unwrap();
            let x = random_input(&mut rng, 1 + seed as usize, 7, 5);
            let out = model.forward(&x).unwrap();
            let (logits, betas) = reference_forward(&model, &x);
            for (a, b) in out.logits.iter().zip(&logits) {
                assert!((a - b).abs() < 1e-12, "{scheme:?}: {a} vs {b}");
            }
            let mut got = vec![out.betas.clone()];
            got.extend(out.text_betas.clone());
            assert_eq!(got.len(), betas.len());
            for (g, w) in got.iter().flatten().zip(betas.iter().flatten()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_matches_handworked_example() {
    // Scores 0, ln 2, ln 3 give weights 1/6, 2/6, 3/6.
    let states = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let scores = [0.0, 2f64.ln(), 3f64.ln()];
    let att = attend_comments(&[0.0], &states, |_, h| {
        let idx = states.iter().position(|s| s == h).unwrap();
        scores[idx]
    })
    .unwrap();
    let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    for (b, w) in att.betas.iter().zip(want) {
        assert!((b - w).abs() < 1e-12);
    }
    assert!((att.u[0] - 4.0 / 6.0).abs() < 1e-12);
    assert!((att.u[1] - 5.0 / 6.0).abs() < 1e-12);
    assert!(attend_comments(&[0.0], &[], |_, _| 0.0).is_err());
}

#[test]
fn comment_order_permutes_attention_but_not_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for scheme in [Scheme::Early, Scheme::Late] {
        let model = FusionClassifier::new(ModelConfig::new(scheme, 6, 4, 3), 9).unwrap();
        let x = random_input(&mut rng, 4, 6, 4);
        let mut y = x.clone();
        y.comments.reverse();
        let (a, b) = (model.forward(&x).unwrap(), model.forward(&y).unwrap());
        for (p, q) in a.logits.iter().zip(&b.logits) {
            assert!((p - q).abs() < 1e-12);
        }
        let mut rev = b.betas.clone();
        rev.reverse();
        for (p, q) in a.betas.iter().zip(&rev) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

/// Textbook AdamW, one parameter at a time.
fn reference_adamw(theta0: &[f64], grads: &[Vec<f64>], opt: &AdamW) -> Vec<f64> {
    let mut theta = theta0.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as f64;
        for i in 0..theta.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - opt.beta1.powf(t));
            let v_hat = v[i] / (1.0 - opt.beta2.powf(t));
            theta[i] -= opt.lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * theta[i]);
        }
    }
    theta
}

#[test]
fn adamw_matches_reference_over_many_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opt = AdamW { lr: 0.01, beta1: 0.8, beta2: 0.95, eps: 1e-6, weight_decay: 0.1 };
    let theta0: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
    let grads: Vec<Vec<f64>> = (0..50).map(|_| (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let want = reference_adamw(&theta0, &grads, &opt);
    let mut theta = theta0.clone();
    let mut state = AdamWState::new(theta.len());
    for g in &grads {
        adamw_step(&mut theta, g, &mut state, &opt).unwrap();
    }
    assert_eq!(state.t, 50);
    for (a, b) in theta.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn adamw_first_step_moves_by_lr_and_decays_weights() {
    // With a bias-corrected first step every coordinate moves by about lr.
    let opt = AdamW { lr: 0.1, weight_decay: 0.0, ..AdamW::default() };
    let mut theta = vec![1.0, -1.0, 0.5];
    let mut state = AdamWState::new(3);
    adamw_step(&mut theta, &[3.0, -0.2, 1e-3], &mut state, &opt).unwrap();
    for (t, want) in theta.iter().zip([0.9, -0.9, 0.4]) {
        assert!((t - want).abs() < 1e-4, "{t}");
    }
    // A zero gradient still applies decoupled decay.
    let opt = AdamW { lr: 0.1, weight_decay: 0.5, ..AdamW::default() };
    let mut theta = vec![2.0];
    adamw_step(&mut theta, &[0.0], &mut AdamWState::new(1), &opt).unwrap();
    assert!((theta[0] - 1.9).abs() < 1e-12);
    let before = theta.clone();
    assert!(adamw_step(&mut theta, &[f64::NAN], &mut AdamWState::new(1), &opt).is_err());
    assert_eq!(theta, before);
}

fn reference_ce(logits: &[f64], y: usize) -> f64 {
    -reference_softmax(logits)[y].ln()
}

fn reference_kl(p: &[f64], logits: &[f64]) -> f64 {
    let q = reference_softmax(logits);
    p.iter().zip(&q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn losses_match_closed_forms() {
    assert!((cross_entropy_loss(&[0.0, 0.0, 0.0], 2).unwrap() - 3f64.ln()).abs() < 1e-12);
    // softmax([ln 1, ln 3]) = [1/4, 3/4].
    let logits = [0.0, 3f64.ln()];
    assert!((cross_entropy_loss(&logits, 0).unwrap() - 4f64.ln()).abs() < 1e-12);
    let half = SoftLabel::new(vec![0.5, 0.5]).unwrap();
    let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    assert!((kl_loss(&half, &logits) - want).abs() < 1e-12);
    // One-hot targets reduce the KL term to cross-entropy.
    let one_hot = SoftLabel::one_hot(1, 2);
    assert!((kl_loss(&one_hot, &logits) - cross_entropy_loss(&logits, 1).unwrap()).abs() < 1e-12);
    assert!(cross_entropy_loss(&logits, 2).is_err());
}

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    (2usize..6).prop_flat_map(|c| proptest::collection::vec(-8.0f64..8.0, c))
}

proptest! {
    #[test]
    fn losses_agree_with_reference(logits in logits_strategy(), raw in proptest::collection::vec(0.0f64..1.0, 6), y in 0usize..6) {
        let c = logits.len();
        let y = y % c;
        prop_assert!((cross_entropy_loss(&logits, y).unwrap() - reference_ce(&logits, y)).abs() < 1e-9);
        let total: f64 = raw[..c].iter().sum::<f64>() + 1e-9;
        let p: Vec<f64> = raw[..c].iter().map(|r| (r + 1e-9 / c as f64) / total).collect();
        let sum: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|x| x / sum).collect();
        let label = SoftLabel::new(p.clone()).unwrap();
        let kl = kl_loss(&label, &logits);
        prop_assert!(kl >= -1e-12);
        prop_assert!((kl - reference_kl(&p, &logits)).abs() < 1e-9);
    }

    #[test]
    fn target_gradients_are_softmax_minus_target(logits in logits_strategy(), y in 0usize..6) {
        let c = logits.len();
        let y = y % c;
        let s = reference_softmax(&logits);
        let (_, g) = Target::Label(y).loss_and_grad(&logits).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let want = s[i] - if i == y { 1.0 } else { 0.0 };
            prop_assert!((gi - want).abs() < 1e-12);
        }
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        let soft = SoftLabel::from_logits(&logits.iter().rev().copied().collect::<Vec<_>>());
        let (_, g) = Target::Soft(soft.clone()).loss_and_grad(&logits).unwrap();
        for i in 0..c {
            prop_assert!((g[i] - (s[i] - soft.probs[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_vanishes_only_at_matching_distribution(logits in logits_strategy()) {
        let same = SoftLabel::from_logits(&logits);
        prop_assert!(kl_loss(&same, &logits).abs() < 1e-12);
    }
}
