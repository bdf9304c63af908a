//! Augmented views of target event representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_eval, ModelConfig, ModelParams};
use crate::numcore::{RngStreams, Stream, Tensor};
use crate::propagation::{dropedge, normalize, PropagationGraph};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// No augmented view: the target-wise term is disabled.
    #[default]
    None,
    Adversarial,
    FeatureDropout,
    GraphDropedge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentStrategy {
    pub kind: AugmentKind,
    /// Adversarial perturbation norm.
    pub epsilon: f64,
    /// Per-coordinate drop probability for feature dropout.
    pub feature_dropout: f64,
    /// Per-edge removal probability for graph dropedge.
    pub dropedge: f64,
}

impl Default for AugmentStrategy {
    fn default() -> Self {
        Self {
            kind: AugmentKind::Adversarial,
            epsilon: 0.5,
            feature_dropout: 0.2,
            dropedge: 0.2,
        }
    }
}

impl AugmentStrategy {
    pub fn none() -> Self {
        Self {
            kind: AugmentKind::None,
            ..Default::default()
        }
    }

    pub fn of(kind: AugmentKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.kind != AugmentKind::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AugmentKind::Adversarial && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("adversarial epsilon must be positive".into()));
        }
        for (name, p) in [("feature_dropout", self.feature_dropout), ("dropedge", self.dropedge)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Gradient norms below this leave the representation unperturbed.
pub const MIN_GRAD_NORM: f64 = 1e-12;

/// `ε · g / ‖g‖₂`, or zeros for a vanishing gradient.
pub fn fgv_delta(grad: &[f64], epsilon: f64) -> Vec<f64> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm < MIN_GRAD_NORM {
        return vec![0.0; grad.len()];
    }
    grad.iter().map(|g| epsilon * g / norm).collect()
}

/// Fast-gradient-value view `o + ε · g / ‖g‖₂`.
pub fn adversarial(repr: &[f64], grad: &[f64], epsilon: f64) -> Vec<f64> {
    repr.iter().zip(fgv_delta(grad, epsilon)).map(|(o, d)| o + d).collect()
}

/// 0/1 mask from the `feature_dropout` stream; each coordinate is dropped
/// with probability `p`.
pub fn draw_feature_mask(dim: usize, p: f64, streams: &mut RngStreams) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            if streams.bernoulli(Stream::FeatureDropout, p) {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Zeroes coordinates of `repr` with probability `p`; survivors keep their
/// value.
pub fn feature_dropout(repr: &[f64], p: f64, streams: &mut RngStreams) -> Vec<f64> {
    repr.iter()
        .zip(draw_feature_mask(repr.len(), p, streams))
        .map(|(o, m)| o * m)
        .collect()
}

/// The pooled representation of a second, eval-mode pass over a copy of
/// the thread with reply edges randomly removed.
pub fn dropedge_view(
    graph: &PropagationGraph,
    embeddings: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    p: f64,
    streams: &mut RngStreams,
) -> Result<Vec<f64>> {
    let deformed = dropedge(graph, p, streams);
    Ok(forward_eval(params, cfg, embeddings, &normalize(&deformed))?.repr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_repr() {
        let o = [1.0, -2.0, 3.0];
        assert_eq!(adversarial(&o, &[0.0; 3], 0.5), o);
    }

    #[test]
    fn perturbation_has_norm_epsilon() {
        let o = [0.1, 0.2, 0.3, 0.4];
        let view = adversarial(&o, &[3.0, -1.0, 0.5, 2.0], 0.7);
        let dist = o.iter().zip(&view).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((dist - 0.7).abs() < 1e-12);
    }

    #[test]
    fn quadratic_ascent() {
        // L(o) = ‖o‖²/2 has gradient o
        let o = [3.0, 4.0];
        let view = adversarial(&o, &o, 1.0);
        assert!((view[0] - 3.6).abs() < 1e-12 && (view[1] - 4.8).abs() < 1e-12);
        let l = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / 2.0;
        assert!(l(&view) > l(&o));
    }

    #[test]
    fn feature_dropout_extremes() {
        let o = [1.0, 2.0, 3.0];
        let mut s = RngStreams::new(0);
        assert_eq!(feature_dropout(&o, 0.0, &mut s), o);
        assert_eq!(feature_dropout(&o, 1.0, &mut s), [0.0; 3]);
    }

    #[test]
    fn feature_dropout_golden_mask() {
        let mask = draw_feature_mask(8, 0.5, &mut RngStreams::new(2024));
        assert_eq!(mask, GOLDEN_MASK_SEED_2024);
    }

    const GOLDEN_MASK_SEED_2024: [f64; 8] = [0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];

    #[test]
    fn feature_dropout_mean_survivors() {
        let trials = 5000;
        let total: f64 = (0..trials)
            .map(|s| draw_feature_mask(8, 0.5, &mut RngStreams::new(s)).iter().sum::<f64>())
            .sum();
        let mean = total / trials as f64;
        // Binomial(8, 1/2): sd 2, so the sample mean has sd 2/√5000
        assert!((mean - 4.0).abs() < 3.0 * 2.0 / (trials as f64).sqrt(), "{mean}");
    }

    #[test]
    fn validation() {
        assert!(AugmentStrategy {
            epsilon: 0.0,
            ..AugmentStrategy::of(AugmentKind::Adversarial)
        }
        .validate()
        .is_err());
        assert!(AugmentStrategy {
            dropedge: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AugmentStrategy::default().validate().is_ok());
    }
}
