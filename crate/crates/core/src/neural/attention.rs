//! Softmax attention over comment states.
//!
//! Each comment state `h_n` gets a score `z_n = sigma(anchor, h_n)`; the
//! weights are `beta = softmax(z)` and the attended vector is
//! `u = sum_n beta_n h_n`.

use super::layers::{add_into, concat, tanh_backward, tanh_in_place, Layout, Linear, Span};
use super::loss::softmax;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    pub u: Vec<f64>,
    pub betas: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Attends over `states` with an arbitrary scorer.
pub fn attend_comments<S>(anchor: &[f64], states: &[Vec<f64>], sigma: S) -> Result<Attended>
where
    S: Fn(&[f64], &[f64]) -> f64,
{
    let scores = states.iter().map(|h| sigma(anchor, h)).collect();
    attend_with_scores(states, scores)
}

fn attend_with_scores(states: &[Vec<f64>], scores: Vec<f64>) -> Result<Attended> {
    let Some(first) = states.first() else {
        return Err(Error::Argument("attention needs at least one comment".into()));
    };
    let width = first.len();
    if states.iter().any(|s| s.len() != width) {
        return Err(Error::Argument("comment states differ in width".into()));
    }
    let betas = softmax(&scores);
    let mut u = vec![0.0; width];
    for (b, h) in betas.iter().zip(states) {
        for (ui, hi) in u.iter_mut().zip(h) {
            *ui += b * hi;
        }
    }
    Ok(Attended { u, betas, scores })
}

/// The feed-forward scorer: `z = v . tanh(W [anchor ; state] + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scorer {
    pub hidden: Linear,
    pub out: Span,
}

impl Scorer {
    pub fn new(layout: &mut Layout, name: &str, width: usize, attn_hidden: usize) -> Self {
        Self {
            hidden: layout.linear(&format!("{name}.hidden"), attn_hidden, 2 * width),
            out: layout.span(format!("{name}.out"), 1, attn_hidden),
        }
    }

    fn activation(&self, p: &[f64], anchor: &[f64], state: &[f64]) -> Vec<f64> {
        let mut a = self.hidden.forward(p, &concat(anchor, state));
        tanh_in_place(&mut a);
        a
    }

    fn score_from(&self, p: &[f64], act: &[f64]) -> f64 {
        p[self.out.range()].iter().zip(act).map(|(v, a)| v * a).sum()
    }
}

/// Forward values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub(crate) acts: Vec<Vec<f64>>,
    pub(crate) out: Attended,
}

pub(crate) fn attend_forward(
    scorer: &Scorer,
    p: &[f64],
    anchor: &[f64],
    states: &[Vec<f64>],
) -> Result<AttentionCache> {
    let acts: Vec<Vec<f64>> = states.iter().map(|h| scorer.activation(p, anchor, h)).collect();
    let scores = acts.iter().map(|a| scorer.score_from(p, a)).collect();
    let out = attend_with_scores(states, scores)?;
    Ok(AttentionCache { acts, out })
}

/// Given `dL/du`, accumulates scorer gradients and adds `dL/d anchor` and
/// `dL/d h_n` into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_backward(
    scorer: &Scorer,
    p: &[f64],
    g: &mut [f64],
    anchor: &[f64],
    states: &[Vec<f64>],
    cache: &AttentionCache,
    du: &[f64],
    d_anchor: &mut [f64],
    d_states: &mut [Vec<f64>],
) {
    let betas = &cache.out.betas;
    let d_beta: Vec<f64> = states.iter().map(|h| h.iter().zip(du).map(|(a, b)| a * b).sum()).collect();
    let mean: f64 = betas.iter().zip(&d_beta).map(|(b, d)| b * d).sum();
    let width = anchor.len();
    for n in 0..states.len() {
        for (ds, d) in d_states[n].iter_mut().zip(du) {
            *ds += betas[n] * d;
        }
        let dz = betas[n] * (d_beta[n] - mean);
        if dz == 0.0 {
            continue;
        }
        let act = &cache.acts[n];
        for (k, a) in act.iter().enumerate() {
            g[scorer.out.offset + k] += dz * a;
        }
        let d_act: Vec<f64> = p[scorer.out.range()].iter().map(|v| dz * v).collect();
        let d_pre = tanh_backward(act, &d_act);
        let d_in = scorer.hidden.backward(p, g, &concat(anchor, &states[n]), &d_pre);
        add_into(d_anchor, &d_in[..width]);
        add_into(&mut d_states[n], &d_in[width..]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_gets_all_weight() {
        let h = vec![vec![0.3, -0.7]];
        let a = attend_comments(&[1.0, 1.0], &h, |_, _| 42.0).unwrap();
        assert_eq!(a.betas, vec![1.0]);
        assert_eq!(a.u, h[0]);
    }

    #[test]
    fn identical_states_are_uniform() {
        let h = vec![vec![0.5, 0.25]; 4];
        let a = attend_comments(&[0.1, 0.2], &h, |x, y| x[0] * y[0] + y[1]).unwrap();
        for b in &a.betas {
            assert!((b - 0.25).abs() < 1e-15);
        }
        for (u, s) in a.u.iter().zip(&h[0]) {
            assert!((u - s).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_set_scores() {
        let h = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let a = attend_comments(&[0.0], &h, |_, s| if s[0] > 0.0 { 0.0 } else { 3f64.ln() }).unwrap();
        assert!((a.betas[0] - 0.25).abs() < 1e-12 && (a.betas[1] - 0.75).abs() < 1e-12);
        assert!((a.u[0] - 0.25).abs() < 1e-12 && (a.u[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(attend_comments(&[0.0], &[], |_, _| 0.0).is_err());
    }

    #[test]
    fn shift_invariance() {
        let h = vec![vec![1.0], vec![2.0], vec![-1.0]];
        let z = [0.3, -0.2, 1.1];
        let a = attend_comments(&[0.0], &h, |_, s| z[(s[0] as i64 + 1).clamp(0, 2) as usize]).unwrap();
        let b = attend_comments(&[0.0], &h, |_, s| z[(s[0] as i64 + 1).clamp(0, 2) as usize] + 7.5).unwrap();
        for (x, y) in a.betas.iter().zip(&b.betas) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.betas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
