//! Training loop: adapter or baseline on top of a (frozen or unfrozen)
//! backbone, with a decoupled-weight-decay Adam optimizer, per-step
//! gradient audits, and a memory ledger captured from a representative
//! step.
//!
//! Frozen traces of a sample never change across steps, so each run keeps
//! a trace cache keyed by input storage; this changes nothing numerically.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accountant::{
    audit_gradients, audit_memory, count_flops, GradientAudit, MemoryLedger, ParamRegistry,
};
use crate::autograph::{GradientMap, ReduceKind, Tape, Tensor};
use crate::backbones::{Backbone, BackboneTrace, EncoderView, Family};
use crate::error::{Error, Result};
use crate::mtsa::{mtsa_apply, Aggregator, Insertion, MtsaConfig, MtsaParams};
use crate::report::{EpochMetrics, MetricsSection, RunConfigEcho, RunReport};
use crate::rng::{derive_seed, fill_uniform, rng};

use super::task::{DomainData, Label, Sample, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Warmup {
    None,
    Linear,
    Cosine,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: Warmup,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for adapter training.
    pub fn default_sherl(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            epochs: 12,
            batch_size: 32,
            warmup: Warmup::Linear,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 1e-2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Frozen backbone, adapter plus head trained.
    Sherl { aggregator: Aggregator },
    /// Frozen backbone, only a fresh head trained.
    LinearProbe,
    /// Everything trained.
    FullFt,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub insertion: Insertion,
    pub reduction: usize,
}

impl Strategy {
    pub fn sherl(reduction: usize) -> Strategy {
        Strategy {
            kind: StrategyKind::Sherl {
                aggregator: Aggregator::Mtsa,
            },
            insertion: Insertion::Standard,
            reduction,
        }
    }

    pub fn sherl_variant(aggregator: Aggregator, reduction: usize) -> Strategy {
        Strategy {
            kind: StrategyKind::Sherl { aggregator },
            insertion: Insertion::Standard,
            reduction,
        }
    }

    pub fn linear_probe() -> Strategy {
        Strategy {
            kind: StrategyKind::LinearProbe,
            insertion: Insertion::Standard,
            reduction: 1,
        }
    }

    pub fn full_ft() -> Strategy {
        Strategy {
            kind: StrategyKind::FullFt,
            insertion: Insertion::Standard,
            reduction: 1,
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            StrategyKind::Sherl { aggregator } => {
                let mut s = format!("sherl:{}", aggregator.label());
                if self.insertion != Insertion::Standard {
                    s.push(':');
                    s.push_str(&self.insertion.label());
                }
                format!("{s}:r{}", self.reduction)
            }
            StrategyKind::LinearProbe => "linear_probe".into(),
            StrategyKind::FullFt => "full_ft".into(),
        }
    }
}

// ── head ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl HeadParams {
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> HeadParams {
        let mut r = rng(derive_seed(seed, "head-init"));
        let mut w = vec![0.0; in_dim * out_dim];
        fill_uniform(&mut r, &mut w, 1.0 / (in_dim as f64).sqrt());
        HeadParams {
            w: Tensor::new(vec![in_dim, out_dim], w).expect("head shape").with_grad(),
            b: Tensor::zeros(vec![out_dim]).with_grad(),
        }
    }
}

// ── trainable bundle ─────────────────────────────────────────────────

/// Everything a strategy updates, visited in a stable order.
#[derive(Clone)]
pub struct Trainables {
    pub adapter: Option<MtsaParams>,
    /// Encoder-side adapter for encoder-decoder runs.
    pub adapter_enc: Option<MtsaParams>,
    pub head: HeadParams,
    /// Trainable backbone clone, present only for full fine-tuning.
    pub backbone: Option<Backbone>,
}

impl Trainables {
    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(a) = &self.adapter {
            a.for_each(&mut |name, t| f(name, t));
        }
        if let Some(a) = &self.adapter_enc {
            a.for_each(&mut |name, t| f(&format!("enc.{name}"), t));
        }
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
        if let Some(bb) = &self.backbone {
            bb.for_each_param(&mut |name, t| f(&format!("backbone.{name}"), t));
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(a) = &mut self.adapter {
            a.for_each_mut(&mut |name, t| f(name, t));
        }
        if let Some(a) = &mut self.adapter_enc {
            a.for_each_mut(&mut |name, t| f(&format!("enc.{name}"), t));
        }
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
        if let Some(bb) = &mut self.backbone {
            bb.for_each_param_mut(&mut |name, t| f(&format!("backbone.{name}"), t));
        }
    }

    pub fn watch(&self, tape: &mut Tape) -> Trainables {
        let mut out = self.clone();
        out.for_each_mut(&mut |_, t| *t = tape.watch(t));
        out
    }

    /// Value-only copy for evaluation passes: nothing records.
    pub fn detached(&self) -> Trainables {
        let mut out = self.clone();
        out.for_each_mut(&mut |_, t| *t = t.detached());
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adam with decoupled weight decay. Parameters the backward pass did not
/// reach this step are left untouched.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    eps: f64,
    t: u64,
    state: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> AdamW {
        AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            weight_decay: cfg.weight_decay,
            eps: 1e-8,
            t: 0,
            state: Default::default(),
        }
    }

    /// Bytes of every parameter in this optimizer's update set.
    pub fn update_set_bytes(&self, params: &Trainables) -> usize {
        let mut n = 0;
        params.for_each(&mut |_, t| n += t.byte_len());
        n
    }

    pub fn step(
        &mut self,
        lr: f64,
        params: &mut Trainables,
        watched: &Trainables,
        grads: &GradientMap,
    ) {
        let mut by_name: std::collections::BTreeMap<String, Tensor> = Default::default();
        watched.for_each(&mut |name, t| {
            if let Some(g) = grads.get(t) {
                by_name.insert(name.to_string(), g.clone());
            }
        });
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let state = &mut self.state;
        let (eps, wd) = (self.eps, self.weight_decay);
        params.for_each_mut(&mut |name, p| {
            let Some(g) = by_name.get(name) else { return };
            let entry = state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            let (m, v) = entry;
            let rg = p.requires_grad();
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g.data()[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g.data()[i] * g.data()[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * data[i]);
            }
            *p = Tensor::new(p.shape().to_vec(), data)
                .expect("update preserves shape")
                .with_requires_grad(rg);
        });
    }
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64 * 0.1).ceil() as usize).clamp(1, 100);
    match cfg.warmup {
        Warmup::None => cfg.learning_rate,
        Warmup::Linear => {
            if step < warm {
                cfg.learning_rate * (step + 1) as f64 / warm as f64
            } else {
                cfg.learning_rate
            }
        }
        Warmup::Cosine => {
            if step < warm {
                cfg.learning_rate * (step + 1) as f64 / warm as f64
            } else {
                let p = (step - warm) as f64 / (total - warm).max(1) as f64;
                cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

// ── adapter sizing per backbone and insertion ────────────────────────

pub(crate) struct StackPlan {
    pub start: usize,
    pub multi: bool,
    pub base_positions: Vec<usize>,
}

pub(crate) fn plan_insertion(bb: &Backbone, insertion: Insertion) -> Result<StackPlan> {
    let depth = regulation_depth(bb);
    let (start, multi) = match insertion {
        Insertion::Standard => (depth - 1, false),
        Insertion::SingleLayer { position } => (position, false),
        Insertion::MultiLayer { start } => (start, true),
    };
    if start == 0 || start >= depth {
        return Err(Error::Config(format!(
            "insertion position {start} outside the late-layer range 1..={}",
            depth - 1
        )));
    }
    let mut base_positions = vec![0];
    for p in 1..start {
        if !bb.spec.drop_mask.contains(&p) {
            base_positions.push(p);
        }
    }
    Ok(StackPlan {
        start,
        multi,
        base_positions,
    })
}

fn regulation_depth(bb: &Backbone) -> usize {
    match bb.spec.family {
        Family::Cnn => bb.spec.stage_channels.len() - 1,
        _ => bb.spec.n_layers,
    }
}

/// Token count and width of the regulation layer's input space.
pub fn regulation_tokens_and_dim(bb: &Backbone) -> (usize, usize) {
    match bb.spec.family {
        Family::Transformer => (bb.spec.seq_len, bb.spec.model_dim),
        Family::EncoderDecoder => (bb.spec.dec_len, bb.spec.model_dim),
        Family::Cnn => {
            let (_, mut h, mut w) = bb.spec.input_shape;
            for _ in 0..bb.spec.stage_channels.len() - 2 {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            let ch = &bb.spec.stage_channels;
            (h * w, ch[ch.len() - 2])
        }
    }
}

/// Width of the final output tokens fed to the head.
pub fn final_feature_dim(bb: &Backbone) -> usize {
    match bb.spec.family {
        Family::Cnn => *bb.spec.stage_channels.last().expect("stages"),
        _ => bb.spec.model_dim,
    }
}

fn source_dim_at(bb: &Backbone, position: usize) -> usize {
    match bb.spec.family {
        Family::Cnn => bb.spec.stage_channels[position],
        _ => bb.spec.model_dim,
    }
}

/// Full adapter config sized for the chosen insertion (multi-layer slots
/// included), plus the encoder-side config for encoder-decoder backbones.
pub(crate) fn build_adapter_configs(
    bb: &Backbone,
    aggregator: Aggregator,
    insertion: Insertion,
    reduction: usize,
) -> Result<(MtsaConfig, Option<MtsaConfig>, StackPlan)> {
    if bb.spec.family == Family::Cnn && insertion != Insertion::Standard {
        return Err(Error::Config(
            "CNN backbones support standard insertion only".into(),
        ));
    }
    let plan = plan_insertion(bb, insertion)?;
    let (tokens, model_dim) = regulation_tokens_and_dim(bb);
    let depth = regulation_depth(bb);
    let span = if plan.multi { depth - plan.start } else { 1 };
    let mut dims: Vec<usize> = plan
        .base_positions
        .iter()
        .map(|&p| source_dim_at(bb, p))
        .collect();
    dims.extend(std::iter::repeat(model_dim).take(span));
    let cfg = MtsaConfig::new(
        dims.len(),
        tokens,
        dims,
        model_dim,
        reduction,
        aggregator,
        insertion,
    )?;
    let enc_cfg = if bb.spec.family == Family::EncoderDecoder {
        let n_enc = bb.spec.kept_positions(bb.spec.n_layers).len();
        Some(MtsaConfig::new(
            n_enc,
            bb.spec.seq_len,
            vec![bb.spec.model_dim; n_enc],
            bb.spec.model_dim,
            reduction,
            aggregator,
            Insertion::Standard,
        )?)
    } else {
        None
    };
    Ok((cfg, enc_cfg, plan))
}

/// The adapter configuration a strategy would train with on a backbone.
pub fn adapter_config_for(bb: &Backbone, strategy: &Strategy) -> Result<MtsaConfig> {
    match &strategy.kind {
        StrategyKind::Sherl { aggregator } => {
            let (c, _, _) =
                build_adapter_configs(bb, *aggregator, strategy.insertion, strategy.reduction)?;
            Ok(c)
        }
        _ => Err(Error::Config("strategy has no adapter".into())),
    }
}

// ── per-run context ──────────────────────────────────────────────────

/// Frozen traces per sample, keyed by the sample's input storage. A trace
/// is a pure function of the frozen backbone and the input, so reuse is
/// value-neutral.
pub(crate) struct TraceCache {
    plain: RefCell<HashMap<usize, Rc<BackboneTrace>>>,
    enc: RefCell<HashMap<usize, Rc<EncoderView>>>,
}

impl TraceCache {
    fn new() -> TraceCache {
        TraceCache {
            plain: RefCell::new(HashMap::new()),
            enc: RefCell::new(HashMap::new()),
        }
    }

    fn key(sample: &Sample) -> usize {
        std::sync::Arc::as_ptr(sample.input.data_arc()) as usize
    }

    fn plain(&self, bb: &Backbone, sample: &Sample) -> Result<Rc<BackboneTrace>> {
        let key = Self::key(sample);
        if let Some(t) = self.plain.borrow().get(&key) {
            return Ok(Rc::clone(t));
        }
        let t = Rc::new(bb.trace(&sample.input)?);
        self.plain.borrow_mut().insert(key, Rc::clone(&t));
        Ok(t)
    }

    fn encoder(&self, bb: &Backbone, sample: &Sample) -> Result<Rc<EncoderView>> {
        let key = Self::key(sample);
        if let Some(t) = self.enc.borrow().get(&key) {
            return Ok(Rc::clone(t));
        }
        let t = Rc::new(bb.encdec_encoder_view(&sample.input)?);
        self.enc.borrow_mut().insert(key, Rc::clone(&t));
        Ok(t)
    }
}

/// Everything a forward pass needs that stays fixed across steps.
pub(crate) struct RunCtx<'a> {
    pub backbone: &'a Backbone,
    pub strategy: &'a Strategy,
    pub cfg: Option<&'a MtsaConfig>,
    pub enc_cfg: Option<&'a MtsaConfig>,
    pub plan: Option<&'a StackPlan>,
    pub cache: &'a TraceCache,
}

// ── forward passes ───────────────────────────────────────────────────

fn head_forward(
    tape: &mut Tape,
    head: &HeadParams,
    features: &Tensor,
    label: &Label,
) -> Result<Tensor> {
    let prev = tape.origin().to_string();
    tape.set_origin("head");
    let out = match label {
        Label::Class(_) => {
            let pooled = tape.reduce_rows(ReduceKind::Mean, features)?;
            tape.linear(&pooled, &head.w, &head.b)
        }
        Label::Seq(_) => tape.linear(features, &head.w, &head.b),
    };
    tape.set_origin(&prev);
    out
}

/// Run the late stack from `plan.start`, mixing the adapter blend into one
/// or every late layer.
fn stack_forward(
    tape: &mut Tape,
    bb: &Backbone,
    layer_inputs: &[Tensor],
    cfg: &MtsaConfig,
    params: &MtsaParams,
    plan: &StackPlan,
    ctx: Option<&Tensor>,
    depth: usize,
) -> Result<Tensor> {
    let mut sources: Vec<Tensor> = plan
        .base_positions
        .iter()
        .map(|&p| layer_inputs[p].detached())
        .collect();
    let mut cur = layer_inputs[plan.start].detached();
    if !plan.multi {
        let mut hidden = sources;
        hidden.push(cur.clone());
        let sub = cfg.with_sources(hidden.len())?;
        let mut x = mtsa_apply(tape, &hidden, &cur, &sub, params)?;
        for q in plan.start..depth {
            x = bb.run_layer(tape, q, &x, ctx)?;
        }
        Ok(x)
    } else {
        for q in plan.start..depth {
            let mut hidden = sources.clone();
            hidden.push(cur.clone());
            let sub = cfg.with_sources(hidden.len())?;
            let mixed = mtsa_apply(tape, &hidden, &cur, &sub, params)?;
            sources.push(cur.clone());
            cur = bb.run_layer(tape, q, &mixed, ctx)?;
        }
        Ok(cur)
    }
}

/// One sample's feature tokens under the configured strategy. Consumed
/// detached inputs are appended to `inputs` for audit registration.
fn strategy_features(
    tape: &mut Tape,
    ctx: &RunCtx<'_>,
    run_bb: &Backbone,
    watched: &Trainables,
    sample: &Sample,
    inputs: &mut Vec<(String, Tensor)>,
    tag: &str,
) -> Result<Tensor> {
    match &ctx.strategy.kind {
        StrategyKind::FullFt => {
            let bbw = watched
                .backbone
                .as_ref()
                .ok_or_else(|| Error::Contract("full fine-tune without backbone".into()))?;
            bbw.forward_recorded(tape, &sample.input)
        }
        StrategyKind::LinearProbe => {
            let trace = ctx.cache.plain(run_bb, sample)?;
            inputs.push((format!("{tag}.features"), trace.final_output.clone()));
            Ok(trace.final_output.clone())
        }
        StrategyKind::Sherl { .. } => {
            let cfg = ctx
                .cfg
                .ok_or_else(|| Error::Contract("adapter config missing".into()))?;
            let plan = ctx
                .plan
                .ok_or_else(|| Error::Contract("insertion plan missing".into()))?;
            let params = watched
                .adapter
                .as_ref()
                .ok_or_else(|| Error::Contract("adapter params missing".into()))?;
            match run_bb.spec.family {
                Family::Cnn => {
                    let trace = ctx.cache.plain(run_bb, sample)?;
                    for (i, s) in trace.sources.iter().enumerate() {
                        inputs.push((format!("{tag}.src{i}"), s.clone()));
                    }
                    inputs.push((format!("{tag}.last_input"), trace.last_layer_input.clone()));
                    let mixed =
                        mtsa_apply(tape, &trace.sources, &trace.last_layer_input, cfg, params)?;
                    run_bb.replay_last(tape, &mixed, None)
                }
                Family::Transformer => {
                    let trace = ctx.cache.plain(run_bb, sample)?;
                    for (i, s) in trace.layer_inputs.iter().enumerate() {
                        inputs.push((format!("{tag}.x{i}"), s.clone()));
                    }
                    stack_forward(
                        tape,
                        run_bb,
                        &trace.layer_inputs,
                        cfg,
                        params,
                        plan,
                        None,
                        run_bb.spec.n_layers,
                    )
                }
                Family::EncoderDecoder => {
                    let enc_cfg = ctx
                        .enc_cfg
                        .ok_or_else(|| Error::Contract("encoder adapter config missing".into()))?;
                    let enc_params = watched
                        .adapter_enc
                        .as_ref()
                        .ok_or_else(|| Error::Contract("encoder adapter missing".into()))?;
                    let view = ctx.cache.encoder(run_bb, sample)?;
                    for (i, s) in view.sources.iter().enumerate() {
                        inputs.push((format!("{tag}.enc{i}"), s.clone()));
                    }
                    inputs.push((format!("{tag}.memory"), view.memory.clone()));
                    let memory =
                        mtsa_apply(tape, &view.sources, &view.memory, enc_cfg, enc_params)?;
                    // Shallow decoder layers consume the updated memory by
                    // value; only the recorded late stack sees it live.
                    let dec_inputs = run_bb.encdec_decoder_inputs(&memory.detached())?;
                    for (i, s) in dec_inputs.iter().enumerate() {
                        inputs.push((format!("{tag}.dec{i}"), s.clone()));
                    }
                    stack_forward(
                        tape,
                        run_bb,
                        &dec_inputs,
                        cfg,
                        params,
                        plan,
                        Some(&memory),
                        run_bb.spec.n_layers,
                    )
                }
            }
        }
    }
}

// ── evaluation ───────────────────────────────────────────────────────

fn batch_targets(samples: &[&Sample]) -> Vec<usize> {
    let mut t = Vec::new();
    for s in samples {
        match &s.label {
            Label::Class(c) => t.push(*c),
            Label::Seq(v) => t.extend_from_slice(v),
        }
    }
    t
}

fn accuracy_of(logits: &Tensor, samples: &[&Sample]) -> f64 {
    let (_, c) = logits.dim2().expect("logits are 2-D");
    let targets = batch_targets(samples);
    let mut correct = 0usize;
    for (row, &t) in targets.iter().enumerate() {
        let r = &logits.data()[row * c..(row + 1) * c];
        let arg = (0..c)
            .max_by(|&a, &b| r[a].partial_cmp(&r[b]).expect("finite logits"))
            .expect("non-empty row");
        if arg == t {
            correct += 1;
        }
    }
    correct as f64 / targets.len() as f64
}

/// Frozen evaluation pass: accuracy and mean loss over a split.
fn evaluate(ctx: &RunCtx<'_>, trainables: &Trainables, samples: &[Sample]) -> Result<(f64, f64)> {
    let frozen = trainables.detached();
    let eval_bb = frozen.backbone.as_ref().unwrap_or(ctx.backbone);
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    let mut sink = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        // The frozen bundle records nothing, so one tape serves the pass.
        let feats = strategy_features(&mut tape, ctx, eval_bb, &frozen, s, &mut sink, &format!("eval{i}"))?;
        rows.push(head_forward(&mut tape, &frozen.head, &feats, &s.label)?);
        refs.push(s);
    }
    let row_refs: Vec<&Tensor> = rows.iter().collect();
    let logits = tape.concat_rows(&row_refs)?;
    let targets = batch_targets(&refs);
    let loss = tape.cross_entropy_mean(&logits, &targets)?.scalar_value()?;
    Ok((accuracy_of(&logits, &refs), loss))
}

/// Evaluate a parameter bundle under a strategy on arbitrary samples,
/// without training. Returns (accuracy, mean loss).
pub fn evaluate_strategy(
    strategy: &Strategy,
    backbone: &Backbone,
    trainables: &Trainables,
    samples: &[Sample],
) -> Result<(f64, f64)> {
    let (cfg, enc_cfg, plan) = match &strategy.kind {
        StrategyKind::Sherl { aggregator } => {
            let (c, e, p) = build_adapter_configs(
                backbone,
                *aggregator,
                strategy.insertion,
                strategy.reduction,
            )?;
            (Some(c), e, Some(p))
        }
        _ => (None, None, None),
    };
    let cache = TraceCache::new();
    let ctx = RunCtx {
        backbone,
        strategy,
        cfg: cfg.as_ref(),
        enc_cfg: enc_cfg.as_ref(),
        plan: plan.as_ref(),
        cache: &cache,
    };
    evaluate(&ctx, trainables, samples)
}

// ── the training loop ────────────────────────────────────────────────

pub struct TrainOutcome {
    pub report: RunReport,
    pub trainables: Trainables,
}

/// Train a strategy on one domain split and assemble the run report.
pub fn train(
    strategy: &Strategy,
    backbone: &Backbone,
    task: &TaskSpec,
    data: &DomainData,
    cfg: &TrainConfig,
    domain_label: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();

    let (adapter_cfg, enc_cfg, plan) = match &strategy.kind {
        StrategyKind::Sherl { aggregator } => {
            let (c, e, p) = build_adapter_configs(
                backbone,
                *aggregator,
                strategy.insertion,
                strategy.reduction,
            )?;
            (Some(c), e, Some(p))
        }
        _ => (None, None, None),
    };
    let cache = TraceCache::new();
    let ctx = RunCtx {
        backbone,
        strategy,
        cfg: adapter_cfg.as_ref(),
        enc_cfg: enc_cfg.as_ref(),
        plan: plan.as_ref(),
        cache: &cache,
    };

    let mut trainables = Trainables {
        adapter: adapter_cfg
            .as_ref()
            .map(|c| MtsaParams::init(c, derive_seed(cfg.seed, "adapter"))),
        adapter_enc: enc_cfg
            .as_ref()
            .map(|c| MtsaParams::init(c, derive_seed(cfg.seed, "adapter-enc"))),
        head: HeadParams::init(final_feature_dim(backbone), task.n_classes, cfg.seed),
        backbone: match strategy.kind {
            StrategyKind::FullFt => Some(backbone.trainable_clone()),
            _ => None,
        },
    };

    let flops = adapter_cfg.as_ref().map(count_flops);
    let mut optimizer = AdamW::new(cfg);
    let total_steps = cfg.epochs * data.train.len().div_ceil(cfg.batch_size);

    let (_, initial_train_loss) = evaluate(&ctx, &trainables, &data.train)?;

    let mut ledger: Option<MemoryLedger> = None;
    let mut audit: Option<GradientAudit> = None;
    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    // Instrumentation pass: one recorded forward/backward on the first
    // batch, without an update, so zero-epoch runs still carry a ledger.
    if !data.train.is_empty() {
        let first: Vec<usize> = (0..cfg.batch_size.min(data.train.len())).collect();
        let (l, a, _, _) = run_step(&ctx, &trainables, data, &first, 0)?;
        ledger = Some(l);
        audit = Some(a);
    }

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle(&mut order, derive_seed(cfg.seed, &format!("shuffle-{epoch}")));
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (l, a, grads_and_watched, loss_value) =
                run_step(&ctx, &trainables, data, chunk, step)?;
            ledger = Some(l);
            audit = Some(a);
            let (watched, grads) = grads_and_watched;
            optimizer.step(lr_at(cfg, step, total_steps), &mut trainables, &watched, &grads);
            batch_losses.push(loss_value);
            step += 1;
        }
        let (val_acc, val_loss) = evaluate(&ctx, &trainables, &data.val)?;
        per_epoch.push(EpochMetrics {
            epoch,
            mean_batch_loss: batch_losses.iter().sum::<f64>() / batch_losses.len().max(1) as f64,
            val_accuracy: val_acc,
            val_loss,
        });
    }

    let (_, final_train_loss) = evaluate(&ctx, &trainables, &data.train)?;
    let (test_acc, test_loss) = evaluate(&ctx, &trainables, &data.test)?;

    let ledger = ledger.ok_or_else(|| Error::Contract("no training data".into()))?;
    let audit = audit.ok_or_else(|| Error::Contract("no training data".into()))?;
    let report = RunReport {
        config: RunConfigEcho {
            backbone: backbone.spec.clone(),
            task: task.clone(),
            strategy: strategy.clone(),
            train: cfg.clone(),
            domain: domain_label.to_string(),
        },
        metrics: MetricsSection {
            per_epoch,
            final_test_accuracy: test_acc,
            final_test_loss: test_loss,
            initial_train_loss,
            final_train_loss,
            trainable_scalars: trainables.num_scalars(),
            steps: step,
        },
        memory: ledger,
        gradient_audit: audit,
        flops,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { report, trainables })
}

/// One recorded training step: forward batch, loss, backward, audits.
#[allow(clippy::type_complexity)]
fn run_step(
    ctx: &RunCtx<'_>,
    trainables: &Trainables,
    data: &DomainData,
    batch: &[usize],
    step: usize,
) -> Result<(MemoryLedger, GradientAudit, (Trainables, GradientMap), f64)> {
    let mut tape = Tape::new();
    let watched = trainables.watch(&mut tape);
    let run_bb = watched.backbone.as_ref().unwrap_or(ctx.backbone);

    let mut inputs = Vec::new();
    let mut rows = Vec::with_capacity(batch.len());
    let mut refs = Vec::with_capacity(batch.len());
    for (i, &idx) in batch.iter().enumerate() {
        let sample = &data.train[idx];
        let feats =
            strategy_features(&mut tape, ctx, run_bb, &watched, sample, &mut inputs, &format!("s{i}"))?;
        rows.push(head_forward(&mut tape, &watched.head, &feats, &sample.label)?);
        refs.push(sample);
    }
    let row_refs: Vec<&Tensor> = rows.iter().collect();
    let prev = tape.origin().to_string();
    tape.set_origin("head");
    let logits = tape.concat_rows(&row_refs)?;
    let targets = batch_targets(&refs);
    let loss = tape.cross_entropy_mean(&logits, &targets)?;
    tape.set_origin(&prev);

    let loss_value = loss.scalar_value()?;
    if !loss_value.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("loss became {loss_value}"),
        });
    }

    let grads = tape.backward(&loss)?;

    let mut registry = ParamRegistry::new();
    watched.for_each(&mut |name, t| registry.add_param(name, true, t));
    if watched.backbone.is_none() {
        ctx.backbone.for_each_param(&mut |name, t| {
            registry.add_param(&format!("backbone.{name}"), false, t);
        });
    }
    for (name, t) in &inputs {
        registry.add_input(name, t);
    }
    let audit = audit_gradients(&tape, &grads, &registry)?;
    let ledger = audit_memory(&tape, &registry)?;
    Ok((ledger, audit, (watched, grads), loss_value))
}

fn shuffle(order: &mut [usize], seed: u64) {
    use rand::seq::SliceRandom;
    let mut r = rng(seed);
    order.shuffle(&mut r);
}
