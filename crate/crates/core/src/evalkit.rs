//! Classification metrics, early-detection curves and PCA export.

use serde::{Deserialize, Serialize};

use crate::dataio::{format_checkpoint, CheckpointSpec, Event, Label};
use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::model::{forward_eval, ModelConfig, ModelParams};
use crate::trainer::PreparedEvent;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// `2PR/(P+R)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub f1_rumor: f64,
    pub f1_nonrumor: f64,
    pub rumor: Confusion,
    pub nonrumor: Confusion,
    pub count: usize,
}

pub fn compute_metrics(predictions: &[Label], labels: &[Label]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "compute_metrics",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::Degenerate("no events to evaluate".into()));
    }
    let confusion = |class: Label| {
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p == class, y == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    };
    let rumor = confusion(Label::Rumor);
    let nonrumor = confusion(Label::NonRumor);
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    let f1_rumor = rumor.f1();
    let f1_nonrumor = nonrumor.f1();
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: (f1_rumor + f1_nonrumor) / 2.0,
        f1_rumor,
        f1_nonrumor,
        rumor,
        nonrumor,
        count: labels.len(),
    })
}

/// Fixed-width report line: accuracy, macro-F1, then per-class F1.
pub fn format_metrics(m: &Metrics) -> String {
    format!(
        "Acc. {:.3}  Mac-F1 {:.3}  F1(R) {:.3}  F1(N) {:.3}",
        m.accuracy, m.macro_f1, m.f1_rumor, m.f1_nonrumor
    )
}

/// Arg-max class; ties resolve to the lower class index.
pub fn predict_label(probs: &[f64]) -> Label {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Label::from_index(best).unwrap_or(Label::NonRumor)
}

pub fn predict(params: &ModelParams, cfg: &ModelConfig, events: &[PreparedEvent]) -> Result<Vec<Label>> {
    events
        .iter()
        .map(|e| Ok(predict_label(&forward_eval(params, cfg, &e.x, &e.a_hat)?.probs)))
        .collect()
}

pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, events: &[PreparedEvent]) -> Result<Metrics> {
    let preds = predict(params, cfg, events)?;
    let labels: Vec<Label> = events.iter().map(|e| e.label).collect();
    compute_metrics(&preds, &labels)
}

/// Event representations from an eval-mode pass.
pub fn representations(params: &ModelParams, cfg: &ModelConfig, events: &[PreparedEvent]) -> Result<Vec<Vec<f64>>> {
    events
        .iter()
        .map(|e| Ok(forward_eval(params, cfg, &e.x, &e.a_hat)?.repr))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyDetectionCurve {
    pub checkpoints: CheckpointSpec,
    pub metrics: Vec<Metrics>,
}

impl EarlyDetectionCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,accuracy,macro_f1,f1_rumor,f1_nonrumor\n");
        for (&cp, m) in self.checkpoints.values.iter().zip(&self.metrics) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                format_checkpoint(cp),
                m.accuracy,
                m.macro_f1,
                m.f1_rumor,
                m.f1_nonrumor
            ));
        }
        out
    }
}

/// Evaluates the model on every test event truncated at each checkpoint,
/// re-embedding only the surviving posts.
pub fn early_detection(
    params: &ModelParams,
    cfg: &ModelConfig,
    events: &[Event],
    checkpoints: &CheckpointSpec,
    provider: &EmbeddingProvider,
) -> Result<EarlyDetectionCurve> {
    let mut metrics = Vec::with_capacity(checkpoints.values.len());
    for &cp in &checkpoints.values {
        let truncated = events
            .iter()
            .map(|e| PreparedEvent::new(&e.truncate(checkpoints.mode, cp), provider))
            .collect::<Result<Vec<_>>>()?;
        metrics.push(evaluate(params, cfg, &truncated)?);
    }
    Ok(EarlyDetectionCurve {
        checkpoints: checkpoints.clone(),
        metrics,
    })
}

/// Eigenvalues (descending) and matching unit eigenvectors of a symmetric
/// matrix, by cyclic Jacobi rotations.
///
/// Each eigenvector's largest-magnitude component is made positive.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let scale = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-12 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = v.iter().map(|row| row[i]).collect();
            let mut lead = 0;
            for (k, x) in col.iter().enumerate() {
                if x.abs() > col[lead].abs() {
                    lead = k;
                }
            }
            if col[lead] < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    (values, vectors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedFeatures {
    /// One row of `out_dim` coordinates per input.
    pub coords: Vec<Vec<f64>>,
    /// Fraction of total variance per kept component, descending.
    pub explained_variance: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

pub fn pca_project(reprs: &[Vec<f64>], out_dim: usize) -> Result<ProjectedFeatures> {
    let n = reprs.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("PCA needs at least 2 points, got {n}")));
    }
    let d = reprs[0].len();
    if d < out_dim || reprs.iter().any(|r| r.len() != d) {
        return Err(Error::Degenerate(format!(
            "PCA to {out_dim} dims needs equal-width inputs of at least that width"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in reprs {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = reprs
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let total: f64 = (0..d).map(|i| cov[i][i]).sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("all representations are identical".into()));
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let components: Vec<Vec<f64>> = vectors.into_iter().take(out_dim).collect();
    let explained_variance = values.iter().take(out_dim).map(|&v| v.max(0.0) / total).collect();
    let coords = centered
        .iter()
        .map(|row| {
            components
                .iter()
                .map(|c| c.iter().zip(row).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(ProjectedFeatures {
        coords,
        explained_variance,
        components,
    })
}

/// `event_id,label,x,y` rows.
pub fn pca_csv(ids: &[String], labels: &[Label], features: &ProjectedFeatures) -> String {
    let mut out = String::from("event_id,label,x,y\n");
    for ((id, label), c) in ids.iter().zip(labels).zip(&features.coords) {
        out.push_str(&format!(
            "{},{},{},{}\n",
            id,
            label,
            c[0],
            c.get(1).copied().unwrap_or(0.0)
        ));
    }
    out
}
