//! Two-layer multi-scale GCN with claim-residual concatenation, mean
//! pooling, and an affine softmax head.
//!
//! Per layer `l = 1, 2`:
//!
//! ```text
//! H⁽ˡ⁾ = ReLU(Â · H̃⁽ˡ⁻¹⁾ · Wˡ⁻¹ + bˡ⁻¹)
//! H̃⁽ˡ⁾ = LayerNorm(H⁽ˡ⁾ ∥ h₀⁽ˡ⁻¹⁾)
//! ```
//!
//! where `h₀⁽ˡ⁻¹⁾` is the claim row of the un-concatenated `H⁽ˡ⁻¹⁾` (with
//! `H⁽⁰⁾ = H̃⁽⁰⁾ = X`) broadcast to every node. The event vector is the
//! column mean of `H̃⁽²⁾`, of width `d_out + d_hidden`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{glorot_uniform, Precision, RngStreams, Stream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub classes: usize,
    pub layers: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 768,
            d_hidden: 512,
            d_out: 128,
            classes: 2,
            layers: 2,
            dropout: 0.2,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, classes: usize) -> Self {
        Self {
            d_in,
            d_hidden,
            d_out,
            classes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 || self.classes == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.layers != 2 {
            return Err(Error::Config(format!(
                "only 2 graph-convolution layers are supported, got {}",
                self.layers
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1]".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Width of the pooled event representation.
    pub fn repr_dim(&self) -> usize {
        self.d_out + self.d_hidden
    }
}

/// Closed-form trainable parameter count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (i, h, o, c) = (cfg.d_in, cfg.d_hidden, cfg.d_out, cfg.classes);
    i * h + h + 2 * (h + i) + (h + i) * o + o + 2 * (o + h) + (o + h) * c + c
}

pub const PARAM_NAMES: [&str; 10] = [
    "w0", "b0", "ln1_gain", "ln1_bias", "w1", "b1", "ln2_gain", "ln2_bias", "wc", "bc",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub w0: Tensor,
    pub b0: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub wc: Tensor,
    pub bc: Tensor,
}

impl ModelParams {
    /// Glorot-uniform weights (drawn in `w0, w1, wc` order), zero biases,
    /// unit LayerNorm gains.
    pub fn init(cfg: &ModelConfig, streams: &mut RngStreams) -> Self {
        let (i, h, o, c) = (cfg.d_in, cfg.d_hidden, cfg.d_out, cfg.classes);
        let w0 = glorot_uniform(i, h, streams);
        let w1 = glorot_uniform(h + i, o, streams);
        let wc = glorot_uniform(o + h, c, streams);
        Self {
            w0,
            b0: Tensor::zeros(&[h]),
            ln1_gain: Tensor::ones(&[h + i]),
            ln1_bias: Tensor::zeros(&[h + i]),
            w1,
            b1: Tensor::zeros(&[o]),
            ln2_gain: Tensor::ones(&[o + h]),
            ln2_bias: Tensor::zeros(&[o + h]),
            wc,
            bc: Tensor::zeros(&[c]),
        }
    }

    /// Parameters in snapshot order.
    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.w0,
            &self.b0,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w1,
            &self.b1,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.wc,
            &self.bc,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.w0,
            &mut self.b0,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.wc,
            &mut self.bc,
        ]
    }

    pub fn from_tensors(ts: Vec<Tensor>) -> Result<Self> {
        let arr: [Tensor; 10] = ts
            .try_into()
            .map_err(|v: Vec<Tensor>| Error::Snapshot(format!("expected 10 tensors, got {}", v.len())))?;
        let [w0, b0, ln1_gain, ln1_bias, w1, b1, ln2_gain, ln2_bias, wc, bc] = arr;
        Ok(Self {
            w0,
            b0,
            ln1_gain,
            ln1_bias,
            w1,
            b1,
            ln2_gain,
            ln2_bias,
            wc,
            bc,
        })
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let [w0, b0, ln1_gain, ln1_bias, w1, b1, ln2_gain, ln2_bias, wc, bc] =
            self.tensors().map(|t| tape.param(t.clone()));
        ParamVars {
            w0,
            b0,
            ln1_gain,
            ln1_bias,
            w1,
            b1,
            ln2_gain,
            ln2_bias,
            wc,
            bc,
        }
    }
}

/// Tape handles of [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub w0: Var,
    pub b0: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub wc: Var,
    pub bc: Var,
}

impl ParamVars {
    pub fn all(&self) -> [Var; 10] {
        [
            self.w0,
            self.b0,
            self.ln1_gain,
            self.ln1_bias,
            self.w1,
            self.b1,
            self.ln2_gain,
            self.ln2_bias,
            self.wc,
            self.bc,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `H̃⁽²⁾`, `n × (d_out + d_hidden)`
    pub nodes: Var,
    /// Pooled event representation, `1 × (d_out + d_hidden)`
    pub repr: Var,
}

/// Records the two graph-convolution layers and pooling for one event.
///
/// `dropout_mask` (0/1, shaped like `H̃⁽¹⁾`) is applied between the layers
/// without rescaling; pass `None` in eval mode.
pub fn encode(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pv: &ParamVars,
    x: &Tensor,
    a_hat: &Tensor,
    dropout_mask: Option<Tensor>,
) -> Result<Encoded> {
    if x.rows() != a_hat.rows() || a_hat.rows() != a_hat.cols() || x.cols() != cfg.d_in {
        return Err(Error::Shape {
            op: "encode",
            lhs: x.shape().to_vec(),
            rhs: a_hat.shape().to_vec(),
        });
    }
    let xv = tape.constant(x.clone());
    let av = tape.constant(a_hat.clone());

    let ax = tape.matmul(av, xv)?;
    let z0 = tape.matmul(ax, pv.w0)?;
    let z0 = tape.add_row(z0, pv.b0)?;
    let h1 = tape.relu(z0);
    let cat1 = tape.concat_broadcast(h1, xv, 0)?;
    let mut ht1 = tape.layer_norm(cat1, pv.ln1_gain, pv.ln1_bias, cfg.ln_eps)?;
    if let Some(mask) = dropout_mask {
        ht1 = tape.mask(ht1, mask)?;
    }

    let ah = tape.matmul(av, ht1)?;
    let z1 = tape.matmul(ah, pv.w1)?;
    let z1 = tape.add_row(z1, pv.b1)?;
    let h2 = tape.relu(z1);
    let cat2 = tape.concat_broadcast(h2, h1, 0)?;
    let ht2 = tape.layer_norm(cat2, pv.ln2_gain, pv.ln2_bias, cfg.ln_eps)?;

    let repr = tape.mean_rows(ht2);
    Ok(Encoded { nodes: ht2, repr })
}

/// Logits `O · W_c + b_c` for a stack of event representations.
pub fn classify(tape: &mut Tape, pv: &ParamVars, reprs: Var) -> Result<Var> {
    let z = tape.matmul(reprs, pv.wc)?;
    tape.add_row(z, pv.bc)
}

/// Keep-mask for the between-layer dropout: each entry is zeroed with
/// probability `rate`.
pub fn draw_dropout_mask(rows: usize, cols: usize, rate: f64, streams: &mut RngStreams) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            if streams.bernoulli(Stream::Dropout, rate) {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches value count")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub nodes: Tensor,
    pub repr: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Eval-mode forward pass (no stochastic masks).
pub fn forward_eval(params: &ModelParams, cfg: &ModelConfig, x: &Tensor, a_hat: &Tensor) -> Result<Forward> {
    let mut tape = Tape::new(Precision::F64);
    let pv = params.register(&mut tape);
    let enc = encode(&mut tape, cfg, &pv, x, a_hat, None)?;
    let logits = classify(&mut tape, &pv, enc.repr)?;
    let probs = tape.softmax_rows(logits);
    Ok(Forward {
        nodes: tape.value(enc.nodes).clone(),
        repr: tape.value(enc.repr).data().to_vec(),
        probs: tape.value(probs).data().to_vec(),
    })
}

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
}

/// Header JSON line, then every parameter as little-endian `f64` in
/// [`PARAM_NAMES`] order.
pub fn snapshot_bytes(cfg: &ModelConfig, seed: u64, params: &ModelParams) -> Result<Vec<u8>> {
    let header = SnapshotHeader {
        format_version: SNAPSHOT_FORMAT_VERSION,
        config: cfg.clone(),
        seed,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_snapshot(path: &Path, cfg: &ModelConfig, seed: u64, params: &ModelParams) -> Result<()> {
    let bytes = snapshot_bytes(cfg, seed, params)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_snapshot(bytes: &[u8]) -> Result<(SnapshotHeader, ModelParams)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Snapshot("missing header line".into()))?;
    let header: SnapshotHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format_version != SNAPSHOT_FORMAT_VERSION {
        return Err(Error::Snapshot(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header.config.validate()?;
    let template = ModelParams::init(&header.config, &mut RngStreams::new(0));
    let body = &bytes[nl + 1..];
    if body.len() != template.count() * 8 {
        return Err(Error::Snapshot(format!(
            "expected {} parameter bytes, found {}",
            template.count() * 8,
            body.len()
        )));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tensors = template
        .tensors()
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), values.by_ref().take(t.len()).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, ModelParams::from_tensors(tensors)?))
}

pub fn read_snapshot(path: &Path) -> Result<(SnapshotHeader, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_snapshot(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::{normalize, PropagationGraph};

    #[test]
    fn paper_scale_parameter_count() {
        let cfg = ModelConfig::new(768, 512, 128, 2);
        assert_eq!(param_count(&cfg), 562_818);
    }

    #[test]
    fn unit_config_count() {
        // 1 + 1 + 4 + 2 + 1 + 4 + 4 + 2
        assert_eq!(param_count(&ModelConfig::new(1, 1, 1, 2)), 19);
    }

    #[test]
    fn extra_classes_add_head_weights() {
        let two = param_count(&ModelConfig::new(6, 5, 4, 2));
        let four = param_count(&ModelConfig::new(6, 5, 4, 4));
        assert_eq!(four - two, (4 + 5) * 2 + 2);
    }

    #[test]
    fn init_matches_closed_form() {
        let cfg = ModelConfig::new(7, 5, 3, 2);
        let p = ModelParams::init(&cfg, &mut RngStreams::new(1));
        assert_eq!(p.count(), param_count(&cfg));
        assert!(p.ln1_gain.data().iter().all(|&v| v == 1.0));
        assert!(p.b0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn only_two_layers() {
        let cfg = ModelConfig {
            layers: 3,
            ..ModelConfig::new(4, 4, 4, 2)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_node_pools_its_row() {
        let cfg = ModelConfig::new(4, 3, 2, 2);
        let p = ModelParams::init(&cfg, &mut RngStreams::new(3));
        let x = Tensor::row_vector(vec![0.5, -1.0, 2.0, 0.0]);
        let f = forward_eval(&p, &cfg, &x, &Tensor::identity(1)).unwrap();
        assert_eq!(f.repr, f.nodes.row(0));
        let total: f64 = f.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let cfg = ModelConfig::new(4, 3, 2, 2);
        let p = ModelParams::init(&cfg, &mut RngStreams::new(3));
        let x = Tensor::zeros(&[2, 4]);
        assert!(forward_eval(&p, &cfg, &x, &Tensor::identity(3)).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = ModelConfig::new(5, 4, 3, 2);
        let p = ModelParams::init(&cfg, &mut RngStreams::new(8));
        let bytes = snapshot_bytes(&cfg, 8, &p).unwrap();
        let (h, q) = parse_snapshot(&bytes).unwrap();
        assert_eq!(h.config, cfg);
        assert_eq!(h.seed, 8);
        assert_eq!(q, p);
        assert!(parse_snapshot(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn star_forward_is_finite() {
        let cfg = ModelConfig::new(3, 4, 2, 2);
        let p = ModelParams::init(&cfg, &mut RngStreams::new(4));
        let g = PropagationGraph::from_edges(3, [(0, 1), (0, 2)]);
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let f = forward_eval(&p, &cfg, &x, &normalize(&g)).unwrap();
        assert_eq!(f.repr.len(), cfg.repr_dim());
        assert!(f.repr.iter().all(|v| v.is_finite()));
    }
}
