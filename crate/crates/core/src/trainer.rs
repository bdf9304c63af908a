//! The nested source/target mini-batch loop, early stopping and the
//! inverted k-fold few-shot protocol.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::augment::{fgv_delta, AugmentKind, AugmentStrategy};
use crate::dataio::{split_folds, Dataset, Event, Label};
use crate::embed::{embed_event, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::evalkit::{compute_metrics, predict_label, Metrics};
use crate::model::{classify, draw_dropout_mask, encode, forward_eval, ModelConfig, ModelParams, PARAM_NAMES};
use crate::numcore::{
    derive_seed, AdamWConfig, AdamWState, Precision, RngStreams, Stream, StreamPositions, Tape, Tensor, Var,
};
use crate::objectives::{
    ce_loss, joint, record_ce, record_joint, record_scl_cross, record_scl_source, record_tcl, LossReport, LossTerms,
};
use crate::propagation::{build_graph, dropedge, normalize, PropagationGraph};

/// An event with its node features and normalized adjacency resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEvent {
    pub event_id: String,
    pub label: Label,
    pub x: Tensor,
    pub graph: PropagationGraph,
    pub a_hat: Tensor,
}

impl PreparedEvent {
    pub fn new(event: &Event, provider: &EmbeddingProvider) -> Result<Self> {
        let graph = build_graph(event);
        Ok(Self {
            event_id: event.event_id.clone(),
            label: event.label,
            x: embed_event(event, provider)?.rows,
            a_hat: normalize(&graph),
            graph,
        })
    }
}

pub fn prepare_all(events: &[Event], provider: &EmbeddingProvider) -> Result<Vec<PreparedEvent>> {
    events.iter().map(|e| PreparedEvent::new(e, provider)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub source_batch_size: usize,
    pub target_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub augment: AugmentStrategy,
    /// Keep the positive pair in the target-wise denominator.
    pub tcl_include_positive: bool,
    pub model: ModelConfig,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 0.5,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            source_batch_size: 32,
            target_batch_size: 32,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.1,
            augment: AugmentStrategy::default(),
            tcl_include_positive: false,
            model: ModelConfig::default(),
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if self.source_batch_size == 0 || self.target_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1]".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning rate and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Every random quantity one step consumes, drawn up front so a step can be
/// replayed with frozen noise.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub source_masks: Vec<Option<Tensor>>,
    pub target_masks: Vec<Option<Tensor>>,
    pub augment: AugmentNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AugmentNoise {
    None,
    /// A fixed perturbation, or `None` to derive it from the target loss.
    Adversarial(Option<Tensor>),
    /// `N × d` keep-mask over the target representations.
    FeatureDropout(Tensor),
    /// Deformed adjacencies and independent dropout masks per target event.
    Dropedge {
        a_hats: Vec<Tensor>,
        masks: Vec<Option<Tensor>>,
    },
}

fn dropout_masks(events: &[&PreparedEvent], cfg: &TrainConfig, streams: &mut RngStreams) -> Vec<Option<Tensor>> {
    let width = cfg.model.d_hidden + cfg.model.d_in;
    events
        .iter()
        .map(|e| (cfg.model.dropout > 0.0).then(|| draw_dropout_mask(e.x.rows(), width, cfg.model.dropout, streams)))
        .collect()
}

/// Draws dropout masks for source then target events, then the
/// augmentation noise.
pub fn draw_noise(
    source: &[&PreparedEvent],
    target: &[&PreparedEvent],
    cfg: &TrainConfig,
    streams: &mut RngStreams,
) -> StepNoise {
    let source_masks = dropout_masks(source, cfg, streams);
    let target_masks = dropout_masks(target, cfg, streams);
    let a = &cfg.augment;
    let augment = match a.kind {
        AugmentKind::None => AugmentNoise::None,
        AugmentKind::Adversarial => AugmentNoise::Adversarial(None),
        AugmentKind::FeatureDropout => {
            let (n, d) = (target.len(), cfg.model.repr_dim());
            let data = (0..n * d)
                .map(|_| {
                    if streams.bernoulli(Stream::FeatureDropout, a.feature_dropout) {
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect();
            AugmentNoise::FeatureDropout(Tensor::new(vec![n, d], data).expect("shape matches value count"))
        }
        AugmentKind::GraphDropedge => {
            let a_hats = target
                .iter()
                .map(|e| normalize(&dropedge(&e.graph, a.dropedge, streams)))
                .collect();
            AugmentNoise::Dropedge {
                a_hats,
                masks: dropout_masks(target, cfg, streams),
            }
        }
    };
    StepNoise {
        source_masks,
        target_masks,
        augment,
    }
}

/// Loss report and per-parameter gradients of one step.
pub struct StepOutcome {
    pub report: LossReport,
    pub grads: Vec<Tensor>,
}

fn labels_of(events: &[&PreparedEvent]) -> Vec<Label> {
    events.iter().map(|e| e.label).collect()
}

fn encode_batch(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pv: &crate::model::ParamVars,
    events: &[&PreparedEvent],
    a_hats: Option<&[Tensor]>,
    masks: &[Option<Tensor>],
) -> Result<Var> {
    let reprs = events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let a = a_hats.map_or(&e.a_hat, |a| &a[i]);
            Ok(encode(tape, cfg, pv, &e.x, a, masks[i].clone())?.repr)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.vstack(&reprs)
}

/// Per-event perturbations `ε · g / ‖g‖` where `g` is the gradient of the
/// target cross-entropy (originals only) with respect to each event
/// representation.
pub fn adversarial_delta(
    params: &ModelParams,
    target: &[&PreparedEvent],
    cfg: &TrainConfig,
    masks: &[Option<Tensor>],
) -> Result<Tensor> {
    let mut tape = Tape::new(cfg.precision);
    let pv = params.register(&mut tape);
    let ot = encode_batch(&mut tape, &cfg.model, &pv, target, None, masks)?;
    let logits = classify(&mut tape, &pv, ot)?;
    let ce = record_ce(&mut tape, logits, &labels_of(target))?;
    let g = tape.backward(ce)?.get_or_zeros(ot, tape.value(ot));
    let rows: Vec<Vec<f64>> = (0..g.rows())
        .map(|r| fgv_delta(g.row(r), cfg.augment.epsilon))
        .collect();
    Tensor::from_rows(&rows)
}

/// Records the full joint objective for one (source, target) batch pair
/// and differentiates it.
///
/// With `include_contrastive == false` the three contrastive terms are left
/// out entirely, which gives the pure cross-entropy objective.
pub fn step_gradients(
    params: &ModelParams,
    source: &[&PreparedEvent],
    target: &[&PreparedEvent],
    cfg: &TrainConfig,
    noise: &StepNoise,
    include_contrastive: bool,
) -> Result<StepOutcome> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Training("both mini-batches must be non-empty".into()));
    }
    let mc = &cfg.model;
    let mut tape = Tape::new(cfg.precision);
    let pv = params.register(&mut tape);
    let (ls, lt) = (labels_of(source), labels_of(target));

    let os = encode_batch(&mut tape, mc, &pv, source, None, &noise.source_masks)?;
    let logits_s = classify(&mut tape, &pv, os)?;
    let ce_s = record_ce(&mut tape, logits_s, &ls)?;

    let ot = encode_batch(&mut tape, mc, &pv, target, None, &noise.target_masks)?;
    let logits_t = classify(&mut tape, &pv, ot)?;

    let augmented = match &noise.augment {
        AugmentNoise::None => None,
        AugmentNoise::Adversarial(fixed) => {
            let delta = match fixed {
                Some(d) => d.clone(),
                None => adversarial_delta(params, target, cfg, &noise.target_masks)?,
            };
            let dv = tape.constant(delta);
            Some(tape.add(ot, dv)?)
        }
        AugmentNoise::FeatureDropout(mask) => Some(tape.mask(ot, mask.clone())?),
        AugmentNoise::Dropedge { a_hats, masks } => {
            Some(encode_batch(&mut tape, mc, &pv, target, Some(a_hats), masks)?)
        }
    };

    let ce_t = match augmented {
        Some(aug) => {
            let logits_a = classify(&mut tape, &pv, aug)?;
            let all = tape.vstack(&[logits_t, logits_a])?;
            let doubled: Vec<Label> = lt.iter().chain(&lt).copied().collect();
            record_ce(&mut tape, all, &doubled)?
        }
        None => record_ce(&mut tape, logits_t, &lt)?,
    };

    let (scl_s, scl_t, tcl) = if include_contrastive {
        let scl_s = record_scl_source(&mut tape, os, &ls, cfg.tau)?;
        let scl_t = record_scl_cross(&mut tape, ot, &lt, os, &ls, cfg.tau)?;
        let tcl = match augmented {
            Some(aug) => record_tcl(&mut tape, ot, aug, cfg.tau, cfg.tcl_include_positive)?,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        (scl_s, scl_t, tcl)
    } else {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z, z)
    };

    let jv = record_joint(&mut tape, ce_s, ce_t, scl_s, scl_t, tcl, cfg.alpha)?;
    let scalar = |v: Var| tape.value(v).data()[0];
    let report = LossReport {
        ce_source: scalar(ce_s),
        ce_target: scalar(ce_t),
        scl_source: scalar(scl_s),
        scl_target: scalar(scl_t),
        tcl_target: scalar(tcl),
        loss_source: scalar(jv.loss_source),
        loss_target: scalar(jv.loss_target),
        loss: scalar(jv.loss),
        alpha: cfg.alpha,
        tau: cfg.tau,
    };
    if let Some(term) = report.non_finite_term() {
        return Err(Error::Training(format!("non-finite loss term {term}")));
    }
    let grads = tape.backward(jv.loss)?;
    let grads = pv.all().iter().map(|&v| grads.get_or_zeros(v, tape.value(v))).collect();
    Ok(StepOutcome { report, grads })
}

/// Scalar value of the joint objective for given parameters and frozen
/// noise, for finite-difference checks.
pub fn step_loss(
    params: &ModelParams,
    source: &[&PreparedEvent],
    target: &[&PreparedEvent],
    cfg: &TrainConfig,
    noise: &StepNoise,
) -> Result<f64> {
    Ok(step_gradients(params, source, target, cfg, noise, true)?.report.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Absent when monitoring falls back to the training loss.
    pub val_macro_f1: Option<f64>,
    pub val_ce: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: AdamWState,
    pub epoch: usize,
    pub step: u64,
    /// Best monitored macro-F1 so far.
    pub best_score: Option<f64>,
    pub best_ce: f64,
    pub best_params: ModelParams,
    pub stale_epochs: usize,
    pub streams: RngStreams,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    params: ModelParams,
    optimizer: AdamWState,
    epoch: usize,
    step: u64,
    best_score: Option<f64>,
    best_ce: f64,
    best_params: ModelParams,
    stale_epochs: usize,
    streams: StreamPositions,
    history: Vec<EpochRecord>,
}

impl TrainState {
    /// Fresh parameters from the `init` stream and zeroed optimizer moments.
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut streams = RngStreams::new(cfg.seed);
        let mut params = ModelParams::init(&cfg.model, &mut streams);
        for t in params.tensors_mut() {
            cfg.precision.apply(t);
        }
        let optimizer = AdamWState::new(cfg.adamw(), &params.tensors());
        Self {
            best_params: params.clone(),
            params,
            optimizer,
            epoch: 0,
            step: 0,
            best_score: None,
            best_ce: f64::INFINITY,
            stale_epochs: 0,
            streams,
            history: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let saved = SavedState {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            step: self.step,
            best_score: self.best_score,
            best_ce: self.best_ce,
            best_params: self.best_params.clone(),
            stale_epochs: self.stale_epochs,
            streams: self.streams.positions(),
            history: self.history.clone(),
        };
        Ok(serde_json::to_string(&saved)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SavedState = serde_json::from_str(text)?;
        let streams = RngStreams::restore(&s.streams)
            .ok_or_else(|| Error::Snapshot("malformed random stream positions".into()))?;
        Ok(Self {
            params: s.params,
            optimizer: s.optimizer,
            epoch: s.epoch,
            step: s.step,
            best_score: s.best_score,
            best_ce: s.best_ce,
            best_params: s.best_params,
            stale_epochs: s.stale_epochs,
            streams,
            history: s.history,
        })
    }
}

/// Draws noise, computes the joint objective and applies one AdamW update.
pub fn train_step(
    state: &mut TrainState,
    source: &[&PreparedEvent],
    target: &[&PreparedEvent],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let noise = draw_noise(source, target, cfg, &mut state.streams);
    let out = step_gradients(&state.params, source, target, cfg, &noise, true)?;
    let mut params = state.params.tensors_mut();
    state.optimizer.step(&mut params, &out.grads, &PARAM_NAMES)?;
    for t in params.iter_mut() {
        cfg.precision.apply(t);
    }
    state.step += 1;
    Ok(out.report)
}

/// `⌈N_t / b_t⌉ · ⌈M / b_s⌉`
pub fn steps_per_epoch(n_target: usize, n_source: usize, cfg: &TrainConfig) -> usize {
    n_target.div_ceil(cfg.target_batch_size) * n_source.div_ceil(cfg.source_batch_size)
}

/// One pass of the nested loop: every shuffled target batch meets every
/// source batch. Source order is shuffled once, after the target order.
pub fn train_epoch(
    state: &mut TrainState,
    source: &[PreparedEvent],
    target: &[&PreparedEvent],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(LogRecord),
) -> Result<Vec<LossReport>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Training("source and target sets must be non-empty".into()));
    }
    let mut t_order: Vec<&PreparedEvent> = target.to_vec();
    state.streams.shuffle(Stream::Shuffle, &mut t_order);
    let mut s_order: Vec<&PreparedEvent> = source.iter().collect();
    state.streams.shuffle(Stream::Shuffle, &mut s_order);
    let epoch = state.epoch + 1;
    let mut reports = Vec::with_capacity(steps_per_epoch(target.len(), source.len(), cfg));
    for tb in t_order.chunks(cfg.target_batch_size) {
        for sb in s_order.chunks(cfg.source_batch_size) {
            let report = train_step(state, sb, tb, cfg)?;
            log(LogRecord::Step(StepRecord {
                epoch,
                step: state.step,
                report,
            }));
            reports.push(report);
        }
    }
    state.epoch = epoch;
    Ok(reports)
}

/// Stratified carve of `fraction` of each class: returns (train, val)
/// indices, or `None` when some class has fewer than 2 events.
pub fn carve_validation(labels: &[Label], fraction: f64, seed: u64) -> Option<(Vec<usize>, Vec<usize>)> {
    let mut streams = RngStreams::new(derive_seed(seed, 0x7661_6c69_6461_7465));
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [Label::NonRumor, Label::Rumor] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return None;
        }
        streams.shuffle(Stream::Shuffle, &mut idx);
        let take = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..take]);
        train.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Some((train, val))
}

/// Early-stopping driver over a fixed source set and target training fold.
pub struct Fitter<'a> {
    cfg: &'a TrainConfig,
    source: &'a [PreparedEvent],
    train: Vec<&'a PreparedEvent>,
    /// `None` when the fold is too small to carve; the training fold's
    /// loss is monitored instead.
    val: Option<Vec<&'a PreparedEvent>>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub epochs: usize,
}

impl<'a> Fitter<'a> {
    pub fn new(cfg: &'a TrainConfig, source: &'a [PreparedEvent], target: &'a [PreparedEvent]) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() || target.is_empty() {
            return Err(Error::Training("source and target sets must be non-empty".into()));
        }
        let labels: Vec<Label> = target.iter().map(|e| e.label).collect();
        let (train, val) = match carve_validation(&labels, cfg.val_fraction, cfg.seed) {
            Some((tr, va)) if cfg.val_fraction > 0.0 => (
                tr.iter().map(|&i| &target[i]).collect(),
                Some(va.iter().map(|&i| &target[i]).collect()),
            ),
            _ => {
                warn!(
                    "target fold of {} events cannot spare a stratified validation set; monitoring training loss",
                    target.len()
                );
                (target.iter().collect(), None)
            }
        };
        Ok(Self {
            cfg,
            source,
            train,
            val,
        })
    }

    pub fn train_events(&self) -> &[&'a PreparedEvent] {
        &self.train
    }

    pub fn validation_events(&self) -> Option<&[&'a PreparedEvent]> {
        self.val.as_deref()
    }

    fn monitor(&self, params: &ModelParams) -> Result<(Option<f64>, f64)> {
        let events = self.val.as_deref().unwrap_or(&self.train);
        let mut probs = Vec::with_capacity(events.len());
        for e in events {
            probs.push(forward_eval(params, &self.cfg.model, &e.x, &e.a_hat)?.probs);
        }
        let labels: Vec<Label> = events.iter().map(|e| e.label).collect();
        let ce = ce_loss(&Tensor::from_rows(&probs)?, &labels)?;
        let f1 = match self.val {
            Some(_) => {
                let preds: Vec<Label> = probs.iter().map(|p| predict_label(p)).collect();
                Some(compute_metrics(&preds, &labels)?.macro_f1)
            }
            None => None,
        };
        Ok((f1, ce))
    }

    /// Whether another epoch would run.
    pub fn should_continue(&self, state: &TrainState) -> bool {
        state.epoch < self.cfg.max_epochs && state.stale_epochs < self.cfg.patience
    }

    /// One epoch plus the validation bookkeeping.
    ///
    /// Patience counts epochs without a strict macro-F1 gain; the kept
    /// snapshot is also replaced on an F1 tie with lower validation loss.
    pub fn run_epoch(&self, state: &mut TrainState, log: &mut dyn FnMut(LogRecord)) -> Result<EpochRecord> {
        train_epoch(state, self.source, &self.train, self.cfg, log)?;
        let (f1, ce) = self.monitor(&state.params)?;
        // Without a validation set the score is the negated training loss.
        let score = f1.unwrap_or(-ce);
        let improved = state.best_score.is_none_or(|b| score > b);
        let tie_better = state.best_score == Some(score) && ce < state.best_ce;
        if improved || tie_better {
            state.best_params = state.params.clone();
            state.best_ce = ce;
            state.best_score = Some(score);
        }
        if improved {
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        let record = EpochRecord {
            epoch: state.epoch,
            val_macro_f1: f1,
            val_ce: ce,
            improved,
        };
        log(LogRecord::Epoch(record.clone()));
        state.history.push(record.clone());
        Ok(record)
    }

    pub fn run(&self, state: &mut TrainState, log: &mut dyn FnMut(LogRecord)) -> Result<()> {
        while self.should_continue(state) {
            self.run_epoch(state, log)?;
        }
        Ok(())
    }
}

/// Trains on `source` plus the target training fold with early stopping
/// and returns the best-validation parameters.
pub fn fit(
    source: &[PreparedEvent],
    target: &[PreparedEvent],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(LogRecord),
) -> Result<FitResult> {
    let fitter = Fitter::new(cfg, source, target)?;
    let mut state = TrainState::new(cfg);
    fitter.run(&mut state, log)?;
    info!(
        "stopped after {} epochs, best monitored score {:?}",
        state.epoch, state.best_score
    );
    Ok(FitResult {
        params: state.best_params,
        history: state.history,
        epochs: state.epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_events: usize,
    pub test_events: usize,
    pub epochs: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub f1_rumor: f64,
    pub f1_nonrumor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mean: MeanMetrics,
}

pub fn mean_metrics(ms: &[Metrics]) -> MeanMetrics {
    let n = ms.len().max(1) as f64;
    let avg = |f: fn(&Metrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
    MeanMetrics {
        accuracy: avg(|m| m.accuracy),
        macro_f1: avg(|m| m.macro_f1),
        f1_rumor: avg(|m| m.f1_rumor),
        f1_nonrumor: avg(|m| m.f1_nonrumor),
    }
}

/// Inverted k-fold protocol: each fold in turn is the small training set,
/// the other `k − 1` folds are the test set.
///
/// `keep_params` receives each fold's trained parameters.
pub fn cross_validate(
    source: &Dataset,
    target: &Dataset,
    provider: &EmbeddingProvider,
    k: usize,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(usize, LogRecord),
    keep_params: &mut dyn FnMut(usize, &ModelParams),
) -> Result<CvReport> {
    cfg.validate()?;
    let plan = split_folds(target, k, cfg.seed)?;
    let src = prepare_all(&source.events, provider)?;
    let tgt = prepare_all(&target.events, provider)?;
    let mut folds = Vec::with_capacity(k);
    for (f, train_idx) in plan.fold_indices(target).iter().enumerate() {
        let train: Vec<PreparedEvent> = train_idx.iter().map(|&i| tgt[i].clone()).collect();
        let test: Vec<&PreparedEvent> = (0..tgt.len())
            .filter(|i| !train_idx.contains(i))
            .map(|i| &tgt[i])
            .collect();
        let fold_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, f as u64),
            ..cfg.clone()
        };
        let result = fit(&src, &train, &fold_cfg, &mut |r| log(f, r))?;
        keep_params(f, &result.params);
        let mut preds = Vec::with_capacity(test.len());
        for e in &test {
            preds.push(predict_label(
                &forward_eval(&result.params, &cfg.model, &e.x, &e.a_hat)?.probs,
            ));
        }
        let labels: Vec<Label> = test.iter().map(|e| e.label).collect();
        let metrics = compute_metrics(&preds, &labels)?;
        info!(
            "fold {f}: macro-F1 {:.4} after {} epochs",
            metrics.macro_f1, result.epochs
        );
        folds.push(FoldReport {
            fold: f,
            train_events: train.len(),
            test_events: test.len(),
            epochs: result.epochs,
            metrics,
        });
    }
    let mean = mean_metrics(&folds.iter().map(|f| f.metrics).collect::<Vec<_>>());
    Ok(CvReport { folds, mean })
}

/// Loss terms evaluated without recording (no dropout, no augmentation).
pub fn eval_terms(
    params: &ModelParams,
    source: &[&PreparedEvent],
    target: &[&PreparedEvent],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let frozen = TrainConfig {
        model: ModelConfig {
            dropout: 0.0,
            ..cfg.model.clone()
        },
        augment: AugmentStrategy::none(),
        ..cfg.clone()
    };
    let noise = StepNoise {
        source_masks: vec![None; source.len()],
        target_masks: vec![None; target.len()],
        augment: AugmentNoise::None,
    };
    let r = step_gradients(params, source, target, &frozen, &noise, true)?.report;
    Ok(joint(
        LossTerms {
            ce_source: r.ce_source,
            ce_target: r.ce_target,
            scl_source: r.scl_source,
            scl_target: r.scl_target,
            tcl_target: r.tcl_target,
        },
        cfg.alpha,
        cfg.tau,
    ))
}
