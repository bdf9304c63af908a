//! Classification, supervised-contrastive, cross-domain contrastive and
//! target-wise contrastive losses, plus the joint objective.
//!
//! All contrastive terms share one primitive, [`Tape::contrastive`], over a
//! cosine-similarity matrix divided by the temperature. The `record_*`
//! functions build terms on a tape; the plain functions evaluate them on
//! concrete batches.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataio::{Label, Role};
use crate::error::{Error, Result};
use crate::numcore::tape::PROB_FLOOR;
use crate::numcore::{ContrastiveSpec, Precision, Tape, Tensor, Var};

/// `(u·v) / (‖u‖ ‖v‖ τ)`
pub fn sim(u: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv * tau))
}

/// Event representations of one side of a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub role: Role,
    /// `N × d`
    pub reprs: Tensor,
    pub labels: Vec<Label>,
    /// `N × classes`, when a classifier has been applied.
    pub probs: Option<Tensor>,
    /// `N × d` augmented views, target batches only.
    pub augmented: Option<Tensor>,
}

impl Batch {
    pub fn new(role: Role, reprs: Tensor, labels: Vec<Label>) -> Self {
        Self {
            role,
            reprs,
            labels,
            probs: None,
            augmented: None,
        }
    }

    pub fn with_probs(mut self, probs: Tensor) -> Self {
        self.probs = Some(probs);
        self
    }

    pub fn with_augmented(mut self, augmented: Tensor) -> Self {
        self.augmented = Some(augmented);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean negative log-probability of the true class, probabilities floored
/// at `1e-12`.
pub fn ce_loss(probs: &Tensor, labels: &[Label]) -> Result<f64> {
    if probs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            op: "ce_loss",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, l)| -probs.get(i, l.index()).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Cosine similarities of the rows of `a` against the rows of `b`, over τ.
pub fn record_sim_matrix(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    let an = tape.normalize_rows(a)?;
    let bn = if a == b { an } else { tape.normalize_rows(b)? };
    let s = tape.matmul_t(an, bn)?;
    Ok(tape.scale(s, 1.0 / tau))
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

pub fn record_ce(tape: &mut Tape, logits: Var, labels: &[Label]) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    tape.cross_entropy(logits, &idx)
}

/// Supervised contrastive loss within the source batch.
///
/// Anchors with no same-label peer contribute 0; the outer mean still
/// divides by the batch size.
pub fn record_scl_source(tape: &mut Tape, reprs: Var, labels: &[Label], tau: f64) -> Result<Var> {
    let n = labels.len();
    if n < 2 {
        warn!("source contrastive term skipped: batch of {n}");
        return Ok(zero(tape));
    }
    let mut spec = ContrastiveSpec::new(n, n, n as f64);
    for i in 0..n {
        let peers = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if peers == 0 {
            continue;
        }
        spec.weights[i] = 1.0 / peers as f64;
        for j in 0..n {
            if j != i {
                spec.set_denominator(i, j);
                if labels[j] == labels[i] {
                    spec.set_positive(i, j);
                }
            }
        }
    }
    let s = record_sim_matrix(tape, reprs, reprs, tau)?;
    tape.contrastive(s, spec)
}

/// Contrastive loss of target anchors against the source batch; the
/// denominator runs over every source sample.
pub fn record_scl_cross(
    tape: &mut Tape,
    target: Var,
    target_labels: &[Label],
    source: Var,
    source_labels: &[Label],
    tau: f64,
) -> Result<Var> {
    let (nt, ns) = (target_labels.len(), source_labels.len());
    if nt == 0 || ns == 0 {
        warn!("cross-domain contrastive term skipped: empty batch");
        return Ok(zero(tape));
    }
    let mut spec = ContrastiveSpec::new(nt, ns, nt as f64);
    for i in 0..nt {
        let positives = source_labels.iter().filter(|&&l| l == target_labels[i]).count();
        if positives == 0 {
            continue;
        }
        spec.weights[i] = 1.0 / positives as f64;
        for j in 0..ns {
            spec.set_denominator(i, j);
            if source_labels[j] == target_labels[i] {
                spec.set_positive(i, j);
            }
        }
    }
    let s = record_sim_matrix(tape, target, source, tau)?;
    tape.contrastive(s, spec)
}

/// Target-wise contrastive loss: each anchor picks its own augmented view
/// out of the other `2(N−1)` originals and views.
///
/// With `include_positive == false` the positive pair is left out of the
/// denominator, so the value can be negative.
pub fn record_tcl(tape: &mut Tape, target: Var, augmented: Var, tau: f64, include_positive: bool) -> Result<Var> {
    let n = tape.value(target).rows();
    if tape.value(augmented).rows() != n || tape.value(augmented).cols() != tape.value(target).cols() {
        return Err(Error::Shape {
            op: "tcl",
            lhs: tape.value(target).shape().to_vec(),
            rhs: tape.value(augmented).shape().to_vec(),
        });
    }
    if n < 2 {
        warn!("target-wise contrastive term skipped: batch of {n}");
        return Ok(zero(tape));
    }
    let mut spec = ContrastiveSpec::new(n, 2 * n, n as f64);
    for i in 0..n {
        spec.weights[i] = 1.0;
        spec.set_positive(i, n + i);
        if include_positive {
            spec.set_denominator(i, n + i);
        }
        for k in 0..n {
            if k != i {
                spec.set_denominator(i, k);
                spec.set_denominator(i, n + k);
            }
        }
    }
    let anchors = tape.normalize_rows(target)?;
    let views = tape.normalize_rows(augmented)?;
    let all = tape.vstack(&[anchors, views])?;
    let s = tape.matmul_t(anchors, all)?;
    let s = tape.scale(s, 1.0 / tau);
    tape.contrastive(s, spec)
}

fn with_tape<F>(f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let v = f(&mut tape)?;
    Ok(tape.value(v).data()[0])
}

pub fn scl_source(batch: &Batch, tau: f64) -> Result<f64> {
    with_tape(|t| {
        let r = t.constant(batch.reprs.clone());
        record_scl_source(t, r, &batch.labels, tau)
    })
}

pub fn scl_cross(target: &Batch, source: &Batch, tau: f64) -> Result<f64> {
    with_tape(|t| {
        let rt = t.constant(target.reprs.clone());
        let rs = t.constant(source.reprs.clone());
        record_scl_cross(t, rt, &target.labels, rs, &source.labels, tau)
    })
}

pub fn tcl(target: &Batch, tau: f64, include_positive: bool) -> Result<f64> {
    let aug = target
        .augmented
        .as_ref()
        .ok_or_else(|| Error::Training("target batch has no augmented views".into()))?;
    with_tape(|t| {
        let rt = t.constant(target.reprs.clone());
        let ra = t.constant(aug.clone());
        record_tcl(t, rt, ra, tau, include_positive)
    })
}

/// Component losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce_source: f64,
    pub ce_target: f64,
    pub scl_source: f64,
    pub scl_target: f64,
    pub tcl_target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_source: f64,
    pub ce_target: f64,
    pub scl_source: f64,
    pub scl_target: f64,
    pub tcl_target: f64,
    pub loss_source: f64,
    pub loss_target: f64,
    pub loss: f64,
    pub alpha: f64,
    pub tau: f64,
}

impl LossReport {
    /// Name of the first non-finite field, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("ce_source", self.ce_source),
            ("ce_target", self.ce_target),
            ("scl_source", self.scl_source),
            ("scl_target", self.scl_target),
            ("tcl_target", self.tcl_target),
            ("loss_source", self.loss_source),
            ("loss_target", self.loss_target),
            ("loss", self.loss),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// `Lˢ = (1−α)CEˢ + α·SCLˢ`, `Lᵗ = (1−α)CEᵗ + α(SCLᵗ + TCLᵗ)`,
/// `L = (Lˢ + Lᵗ)/2`.
pub fn joint(terms: LossTerms, alpha: f64, tau: f64) -> LossReport {
    let loss_source = (1.0 - alpha) * terms.ce_source + alpha * terms.scl_source;
    let loss_target = (1.0 - alpha) * terms.ce_target + alpha * (terms.scl_target + terms.tcl_target);
    LossReport {
        ce_source: terms.ce_source,
        ce_target: terms.ce_target,
        scl_source: terms.scl_source,
        scl_target: terms.scl_target,
        tcl_target: terms.tcl_target,
        loss_source,
        loss_target,
        loss: 0.5 * loss_source + 0.5 * loss_target,
        alpha,
        tau,
    }
}

/// Tape handles of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct JointVars {
    pub loss_source: Var,
    pub loss_target: Var,
    pub loss: Var,
}

/// Records [`joint`] with the same association order as the value path.
pub fn record_joint(
    tape: &mut Tape,
    ce_source: Var,
    ce_target: Var,
    scl_source: Var,
    scl_target: Var,
    tcl_target: Var,
    alpha: f64,
) -> Result<JointVars> {
    let loss_source = tape.lin_comb(&[(ce_source, 1.0 - alpha), (scl_source, alpha)])?;
    let contrastive_target = tape.add(scl_target, tcl_target)?;
    let loss_target = tape.lin_comb(&[(ce_target, 1.0 - alpha), (contrastive_target, alpha)])?;
    let loss = tape.lin_comb(&[(loss_source, 0.5), (loss_target, 0.5)])?;
    Ok(JointVars {
        loss_source,
        loss_target,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: f64 = std::f64::consts::E;

    fn batch(rows: &[Vec<f64>], labels: &[Label], role: Role) -> Batch {
        Batch::new(role, Tensor::from_rows(rows).unwrap(), labels.to_vec())
    }

    #[test]
    fn sim_cases() {
        let x = [0.3, -1.2, 2.0];
        assert!((sim(&x, &x, 0.5).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 3.0], 0.5).unwrap(), 0.0);
        let s = sim(&[1.0, 0.0], &[1.0, 1.0], 0.5).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(sim(&[0.0, 0.0], &[1.0, 0.0], 1.0), Err(Error::ZeroVector)));
    }

    #[test]
    fn ce_cases() {
        let labels = [Label::Rumor, Label::NonRumor];
        let perfect = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(ce_loss(&perfect, &labels).unwrap(), 0.0);
        let half = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((ce_loss(&half, &labels).unwrap() - 2f64.ln()).abs() < 1e-12);
        let mixed = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.25, 0.75]]).unwrap();
        assert!((ce_loss(&mixed, &labels).unwrap() - 4f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn scl_source_anchor() {
        use Label::*;
        let b = batch(
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            &[Rumor, Rumor, NonRumor],
            Role::Source,
        );
        let expected = 2.0 * -(E / (E + 1.0)).ln() / 3.0;
        let got = scl_source(&b, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.208841).abs() < 1e-6);
    }

    #[test]
    fn scl_source_without_positives() {
        use Label::*;
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[Rumor, NonRumor], Role::Source);
        assert_eq!(scl_source(&b, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn scl_source_identical_pair() {
        let b = batch(&[vec![0.2, 0.4], vec![0.2, 0.4]], &[Label::Rumor; 2], Role::Source);
        assert!(scl_source(&b, 0.3).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scl_source_single_sample() {
        let b = batch(&[vec![0.2, 0.4]], &[Label::Rumor], Role::Source);
        assert_eq!(scl_source(&b, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn scl_cross_anchor() {
        use Label::*;
        let t = batch(&[vec![1.0, 0.0]], &[Rumor], Role::Target);
        let s = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[Rumor, NonRumor], Role::Source);
        let got = scl_cross(&t, &s, 1.0).unwrap();
        assert!((got - 0.31326).abs() < 1e-5);
        assert!((got + (E / (E + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn scl_cross_label_absent() {
        use Label::*;
        let t = batch(&[vec![1.0, 0.0]], &[Rumor], Role::Target);
        let s = batch(&[vec![1.0, 0.0]], &[NonRumor], Role::Source);
        assert_eq!(scl_cross(&t, &s, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn scl_cross_single_duplicate() {
        let t = batch(&[vec![1.0, 2.0]], &[Label::Rumor], Role::Target);
        let s = batch(&[vec![1.0, 2.0]], &[Label::Rumor], Role::Source);
        assert!(scl_cross(&t, &s, 0.7).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tcl_anchor() {
        use Label::*;
        let rows = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = batch(&rows, &[Rumor, NonRumor], Role::Target).with_augmented(Tensor::from_rows(&rows).unwrap());
        let got = tcl(&b, 1.0, false).unwrap();
        assert!((got - (2f64.ln() - 1.0)).abs() < 1e-12);
        assert!((got + 0.30685).abs() < 1e-5);
    }

    #[test]
    fn tcl_all_orthogonal() {
        // 3 originals and 3 views, all mutually orthogonal: every sim is 0
        let eye = Tensor::identity(6);
        let orig = Tensor::from_rows(&eye.to_rows()[..3]).unwrap();
        let aug = Tensor::from_rows(&eye.to_rows()[3..]).unwrap();
        let b = Batch::new(Role::Target, orig, vec![Label::Rumor; 3]).with_augmented(aug);
        let got = tcl(&b, 0.5, false).unwrap();
        assert!((got - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tcl_single_sample_skipped() {
        let b =
            batch(&[vec![1.0, 0.0]], &[Label::Rumor], Role::Target).with_augmented(Tensor::row_vector(vec![0.0, 1.0]));
        assert_eq!(tcl(&b, 1.0, false).unwrap(), 0.0);
    }

    #[test]
    fn tcl_with_positive_in_denominator_is_nonnegative() {
        let rows = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = batch(&rows, &[Label::Rumor; 2], Role::Target).with_augmented(Tensor::from_rows(&rows).unwrap());
        assert!(tcl(&b, 1.0, true).unwrap() >= 0.0);
    }

    #[test]
    fn joint_extremes() {
        let terms = LossTerms {
            ce_source: 0.7,
            ce_target: 0.9,
            scl_source: 1.3,
            scl_target: 2.1,
            tcl_target: -0.2,
        };
        let r0 = joint(terms, 0.0, 0.5);
        assert_eq!(r0.loss, (0.7 + 0.9) / 2.0);
        let r1 = joint(terms, 1.0, 0.5);
        assert_eq!(r1.loss_source, 1.3);
        assert_eq!(r1.loss_target, 2.1 + -0.2);
        let half = joint(terms, 0.5, 0.5);
        assert!((half.loss - (half.loss_source + half.loss_target) / 2.0).abs() < 1e-15);
        assert!(half.non_finite_term().is_none());
    }

    #[test]
    fn recorded_joint_matches_value_path() {
        let mut tape = Tape::default();
        let v: Vec<Var> = [0.7, 0.9, 1.3, 2.1, -0.2]
            .iter()
            .map(|&x| tape.param(Tensor::scalar(x)))
            .collect();
        let j = record_joint(&mut tape, v[0], v[1], v[2], v[3], v[4], 0.37).unwrap();
        let r = joint(
            LossTerms {
                ce_source: 0.7,
                ce_target: 0.9,
                scl_source: 1.3,
                scl_target: 2.1,
                tcl_target: -0.2,
            },
            0.37,
            0.5,
        );
        assert_eq!(tape.value(j.loss).data()[0], r.loss);
        assert_eq!(tape.value(j.loss_source).data()[0], r.loss_source);
        assert_eq!(tape.value(j.loss_target).data()[0], r.loss_target);
    }
}
