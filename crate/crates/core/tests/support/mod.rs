//! Direct-summation oracles and random fixtures shared by the integration
//! tests. The oracles are written loop-by-loop from the loss definitions and
//! deliberately share no code with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rumorgraph::dataio::{Event, Label, Post};
use rumorgraph::numcore::Tensor;
use rumorgraph::propagation::{normalize, PropagationGraph};
use rumorgraph::trainer::PreparedEvent;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..u.len() {
        s += u[i] * v[i];
    }
    s
}

pub fn oracle_sim(u: &[f64], v: &[f64], tau: f64) -> f64 {
    dot(u, v) / (dot(u, u).sqrt() * dot(v, v).sqrt() * tau)
}

pub fn oracle_ce(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        total -= p[y].max(1e-12).ln();
    }
    total / labels.len() as f64
}

pub fn oracle_scl_source(o: &[Vec<f64>], y: &[usize], tau: f64) -> f64 {
    let n = o.len();
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && y[j] == y[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += oracle_sim(&o[i], &o[k], tau).exp();
            }
        }
        let mut anchor = 0.0;
        for &j in &positives {
            anchor -= (oracle_sim(&o[i], &o[j], tau).exp() / denom).ln();
        }
        total += anchor / positives.len() as f64;
    }
    total / n as f64
}

pub fn oracle_scl_cross(t: &[Vec<f64>], yt: &[usize], s: &[Vec<f64>], ys: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..t.len() {
        let positives: Vec<usize> = (0..s.len()).filter(|&j| ys[j] == yt[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for sk in s {
            denom += oracle_sim(&t[i], sk, tau).exp();
        }
        let mut anchor = 0.0;
        for &j in &positives {
            anchor -= (oracle_sim(&t[i], &s[j], tau).exp() / denom).ln();
        }
        total += anchor / positives.len() as f64;
    }
    total / t.len() as f64
}

pub fn oracle_tcl(o: &[Vec<f64>], aug: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
    let n = o.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += oracle_sim(&o[i], &o[k], tau).exp() + oracle_sim(&o[i], &aug[k], tau).exp();
            }
        }
        let pos = oracle_sim(&o[i], &aug[i], tau).exp();
        if include_positive {
            denom += pos;
        }
        total += (pos / denom).ln();
    }
    -total / n as f64
}

/// `D^{-1/2} (A + I) D^{-1/2}` by explicit double loops.
pub fn oracle_normalize(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(i, j) in edges {
        a[i][j] = 1.0;
        a[j][i] = 1.0;
    }
    let mut deg = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            deg[i] += a[i][j];
        }
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = a[i][j] / (deg[i] * deg[j]).sqrt();
        }
    }
    out
}

/// Parent-before-child random tree: node `c > 0` attaches to a uniformly
/// chosen earlier node.
pub fn random_tree(n: usize, r: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (1..n).map(|c| (r.gen_range(0..c), c)).collect()
}

pub fn random_vectors(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn random_labels(n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(0..2)).collect()
}

pub fn label_of(i: usize) -> Label {
    Label::from_index(i).unwrap()
}

/// An event with random text and strictly increasing timestamps.
pub fn random_event(id: &str, n: usize, label: Label, r: &mut ChaCha8Rng) -> Event {
    let words = [
        "fake",
        "true",
        "source",
        "confirmed",
        "hoax",
        "news",
        "police",
        "report",
        "why",
        "really",
    ];
    let text = |r: &mut ChaCha8Rng| {
        (0..4)
            .map(|_| words[r.gen_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let claim = Post {
        post_id: format!("{id}-0"),
        parent_id: None,
        text: text(r),
        timestamp: 1_000,
    };
    let mut ts = 1_000;
    let replies = random_tree(n, r)
        .into_iter()
        .map(|(p, c)| {
            ts += r.gen_range(1..600);
            Post {
                post_id: format!("{id}-{c}"),
                parent_id: Some(format!("{id}-{p}")),
                text: text(r),
                timestamp: ts,
            }
        })
        .collect();
    Event::new(id, label, claim, replies).unwrap()
}

/// A prepared event with random node features and a random tree.
pub fn random_prepared(id: &str, n: usize, d_in: usize, label: Label, r: &mut ChaCha8Rng) -> PreparedEvent {
    let graph = PropagationGraph::from_edges(n, random_tree(n, r));
    PreparedEvent {
        event_id: id.to_string(),
        label,
        x: Tensor::from_rows(&random_vectors(n, d_in, r)).unwrap(),
        a_hat: normalize(&graph),
        graph,
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, 0 when both vanish.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .data()
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.data().iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
