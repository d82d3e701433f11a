//! Multi-Tiered Sensing Adapter.
//!
//! The adapter consumes N detached hidden-state sets from a frozen
//! backbone plus the original input of its final layer, and produces a
//! gated replacement for that input:
//!
//! 1. per-source down-projection + ReLU into a shared low dimension d,
//! 2. channel gating and residual enhancement of each projected set,
//! 3. regrouping from layer-wise to token-wise feature sets,
//! 4. a per-token redundancy rate from the rectified cross-layer cosine
//!    matrix (each feature's rate counts its near-duplicates, so a value
//!    of 1 means "related to nothing else"),
//! 5. redundancy-normalized linear attention with the deepest set as
//!    guidance, and
//! 6. a universal up-projection blended with the original layer input
//!    through the gate u = tanh(alpha/T), alpha zero-initialized so a
//!    fresh adapter is an exact identity.
//!
//! Ablation aggregators (plain linear attention, a learnable rate vector,
//! 4-head softmax attention, max/average pooling) replace step 4-5 only;
//! projection, gating and the output gate stay identical so comparisons
//! isolate the aggregation rule.

use serde::{Deserialize, Serialize};

use crate::autograph::{ReduceKind, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Norm floor shared by both normalizations and the rate guard.
pub const NORM_EPS: f64 = 1e-12;

/// Default gate temperature.
pub const DEFAULT_GATE_TEMPERATURE: f64 = 0.1;

/// Aggregation rule for the early route.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregator {
    /// Redundancy-normalized linear attention (the full mechanism).
    Mtsa,
    /// Linear attention with the redundancy rate removed.
    LinearA,
    /// Linear attention with the rate replaced by a learnable vector
    /// initialized to all ones.
    LinearAR,
    /// Multi-head softmax attention with guidance as query.
    Mhsa { heads: usize },
    MaxPool,
    AvePool,
}

impl Aggregator {
    pub fn label(&self) -> String {
        match self {
            Aggregator::Mtsa => "mtsa".into(),
            Aggregator::LinearA => "linear_a".into(),
            Aggregator::LinearAR => "linear_a_r".into(),
            Aggregator::Mhsa { heads } => format!("mhsa{heads}"),
            Aggregator::MaxPool => "max_pool".into(),
            Aggregator::AvePool => "ave_pool".into(),
        }
    }
}

/// Where the blended features enter the late route.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Insertion {
    /// Feed the blend into the last layer only.
    Standard,
    /// Feed the blend once, at the given 0-based layer.
    SingleLayer { position: usize },
    /// Feed a cumulative blend into every layer from `start` to the last,
    /// each late layer's own input joining the source pool.
    MultiLayer { start: usize },
}

impl Insertion {
    pub fn label(&self) -> String {
        match self {
            Insertion::Standard => "standard".into(),
            Insertion::SingleLayer { position } => format!("single{position}"),
            Insertion::MultiLayer { start } => format!("multi{start}"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MtsaConfig {
    /// Count of feature sources (input embedding + kept shallow layers).
    pub n_sources: usize,
    /// Tokens per source (K).
    pub tokens: usize,
    /// Width of each source, in source order.
    pub source_dims: Vec<usize>,
    /// Width of the late layer's input (D).
    pub model_dim: usize,
    /// Reduction factor r with d = D/r.
    pub reduction: usize,
    /// Adapter width d.
    pub hidden_dim: usize,
    /// Temperature of the output gate.
    pub gate_temperature: f64,
    pub aggregator: Aggregator,
    pub insertion: Insertion,
}

impl MtsaConfig {
    pub fn new(
        n_sources: usize,
        tokens: usize,
        source_dims: Vec<usize>,
        model_dim: usize,
        reduction: usize,
        aggregator: Aggregator,
        insertion: Insertion,
    ) -> Result<MtsaConfig> {
        if n_sources < 2 {
            return Err(Error::Config(format!(
                "adapter needs at least 2 sources (one early set plus guidance), got {n_sources}"
            )));
        }
        if source_dims.len() != n_sources {
            return Err(Error::Config(format!(
                "source_dims has {} entries for {n_sources} sources",
                source_dims.len()
            )));
        }
        if reduction == 0 || model_dim % reduction != 0 {
            return Err(Error::Config(format!(
                "reduction {reduction} must divide model dim {model_dim} exactly"
            )));
        }
        let hidden_dim = model_dim / reduction;
        if let Aggregator::Mhsa { heads } = aggregator {
            if heads == 0 || hidden_dim % heads != 0 {
                return Err(Error::Config(format!(
                    "mhsa heads {heads} must divide adapter width {hidden_dim}"
                )));
            }
        }
        Ok(MtsaConfig {
            n_sources,
            tokens,
            source_dims,
            model_dim,
            reduction,
            hidden_dim,
            gate_temperature: DEFAULT_GATE_TEMPERATURE,
            aggregator,
            insertion,
        })
    }

    /// View of this config restricted to the first `n` source slots;
    /// cumulative multi-layer insertion grows the pool one slot per layer.
    pub fn with_sources(&self, n: usize) -> Result<MtsaConfig> {
        if n < 2 || n > self.n_sources {
            return Err(Error::Config(format!(
                "source subset {n} outside 2..={}",
                self.n_sources
            )));
        }
        let mut out = self.clone();
        out.n_sources = n;
        out.source_dims = self.source_dims[..n].to_vec();
        Ok(out)
    }
}

/// Extra projections for the multi-head softmax ablation.
#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Learnable state of the adapter.
#[derive(Clone, Debug)]
pub struct MtsaParams {
    /// Per-source down-projection weights (D_n x d) and biases.
    pub down_w: Vec<Tensor>,
    pub down_b: Vec<Tensor>,
    /// Per-source gating matrices W (d x d).
    pub enhance_w: Vec<Tensor>,
    /// Per-source enhancement matrices W' (d x d).
    pub enhance_wp: Vec<Tensor>,
    /// Universal up-projection (d x D) and bias.
    pub up_w: Tensor,
    pub up_b: Tensor,
    /// Gate scalar, exactly zero at construction.
    pub alpha: Tensor,
    /// Present iff aggregator = LinearAR; initialized to ones.
    pub learnable_r: Option<Tensor>,
    /// Present iff aggregator = Mhsa.
    pub mhsa: Option<MhsaParams>,
}

impl MtsaParams {
    /// Fan-in-scaled uniform init; biases zero, alpha exactly zero,
    /// learnable rate (when present) exactly ones.
    pub fn init(cfg: &MtsaConfig, seed: u64) -> MtsaParams {
        let d = cfg.hidden_dim;
        let mut r = rng::rng(rng::derive_seed(seed, "mtsa-init"));
        let mut mat = |rows: usize, cols: usize, fan_in: usize| {
            let mut buf = vec![0.0; rows * cols];
            rng::fill_uniform(&mut r, &mut buf, 1.0 / (fan_in as f64).sqrt());
            Tensor::new(vec![rows, cols], buf).expect("init shape").with_grad()
        };
        let mut down_w = Vec::new();
        let mut down_b = Vec::new();
        let mut enhance_w = Vec::new();
        let mut enhance_wp = Vec::new();
        for &dn in &cfg.source_dims {
            down_w.push(mat(dn, d, dn));
            down_b.push(Tensor::zeros(vec![d]).with_grad());
        }
        for _ in 0..cfg.n_sources {
            enhance_w.push(mat(d, d, d));
            enhance_wp.push(mat(d, d, d));
        }
        let up_w = mat(d, cfg.model_dim, d);
        let up_b = Tensor::zeros(vec![cfg.model_dim]).with_grad();
        let alpha = Tensor::scalar(0.0).with_grad();
        let learnable_r = match cfg.aggregator {
            Aggregator::LinearAR => Some(Tensor::ones(vec![cfg.n_sources - 1]).with_grad()),
            _ => None,
        };
        let mhsa = match cfg.aggregator {
            Aggregator::Mhsa { .. } => Some(MhsaParams {
                wq: mat(d, d, d),
                wk: mat(d, d, d),
                wv: mat(d, d, d),
                wo: mat(d, d, d),
            }),
            _ => None,
        };
        MtsaParams {
            down_w,
            down_b,
            enhance_w,
            enhance_wp,
            up_w,
            up_b,
            alpha,
            learnable_r,
            mhsa,
        }
    }

    /// Register every tensor on a tape and return the tracked view used for
    /// one forward/backward cycle.
    pub fn watch(&self, tape: &mut Tape) -> MtsaParams {
        let mut out = self.clone();
        out.for_each_mut(&mut |_, t| *t = tape.watch(t));
        out
    }

    /// Visit tensors in a stable order with their canonical names.
    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        // Iteration order is the update order; keep it stable.
        for (i, t) in self.down_w.iter().enumerate() {
            f(&format!("mtsa.down.{i}.w"), t);
        }
        for (i, t) in self.down_b.iter().enumerate() {
            f(&format!("mtsa.down.{i}.b"), t);
        }
        for (i, t) in self.enhance_w.iter().enumerate() {
            f(&format!("mtsa.enhance.{i}.w"), t);
        }
        for (i, t) in self.enhance_wp.iter().enumerate() {
            f(&format!("mtsa.enhance.{i}.wp"), t);
        }
        f("mtsa.up.w", &self.up_w);
        f("mtsa.up.b", &self.up_b);
        f("mtsa.alpha", &self.alpha);
        if let Some(t) = &self.learnable_r {
            f("mtsa.learnable_r", t);
        }
        if let Some(m) = &self.mhsa {
            f("mtsa.mhsa.wq", &m.wq);
            f("mtsa.mhsa.wk", &m.wk);
            f("mtsa.mhsa.wv", &m.wv);
            f("mtsa.mhsa.wo", &m.wo);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.down_w.iter_mut().enumerate() {
            f(&format!("mtsa.down.{i}.w"), t);
        }
        for (i, t) in self.down_b.iter_mut().enumerate() {
            f(&format!("mtsa.down.{i}.b"), t);
        }
        for (i, t) in self.enhance_w.iter_mut().enumerate() {
            f(&format!("mtsa.enhance.{i}.w"), t);
        }
        for (i, t) in self.enhance_wp.iter_mut().enumerate() {
            f(&format!("mtsa.enhance.{i}.wp"), t);
        }
        f("mtsa.up.w", &mut self.up_w);
        f("mtsa.up.b", &mut self.up_b);
        f("mtsa.alpha", &mut self.alpha);
        if let Some(t) = &mut self.learnable_r {
            f("mtsa.learnable_r", t);
        }
        if let Some(m) = &mut self.mhsa {
            f("mtsa.mhsa.wq", &mut m.wq);
            f("mtsa.mhsa.wk", &mut m.wk);
            f("mtsa.mhsa.wv", &mut m.wv);
            f("mtsa.mhsa.wo", &mut m.wo);
        }
    }

    pub fn flat_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }
}

/// Down-projected sets with their gates and enhanced outputs.
#[derive(Clone, Debug)]
pub struct ProjectedFeatures {
    /// F_n: projected sets, entrywise nonnegative.
    pub f: Vec<Tensor>,
    /// G_n: channel gates, every entry in (0, 1).
    pub gates: Vec<Tensor>,
    /// F'_n = G_n * (F_n W'_n + F_n).
    pub enhanced: Vec<Tensor>,
}

/// Token-wise regrouping of the enhanced sets.
#[derive(Clone, Debug)]
pub struct TokenGroups {
    /// e_k: one 1xd guidance row per token, from the deepest set.
    pub guidance: Vec<Tensor>,
    /// E_k: one (N-1)xd early matrix per token, rows in source order.
    pub early: Vec<Tensor>,
}

/// Cross-layer similarity structure per token.
#[derive(Clone, Debug)]
pub struct RedundancyProfile {
    /// S_k: raw cosine matrices.
    pub cosine: Vec<Tensor>,
    /// r_k: row sums of the rectified cosine matrices.
    pub rate: Vec<Tensor>,
}

/// Aggregation output per token plus the stacked result.
#[derive(Clone, Debug)]
pub struct BlendedFeatures {
    /// m_k: attention weights; entrywise >= 0 summing to 1, or all-zero
    /// when every rectified score vanishes.
    pub weights: Vec<Tensor>,
    /// Stacked e'_k rows (K x d).
    pub blended: Tensor,
}

/// F_n = ReLU(h_n W_n + b_n) for every source.
pub fn down_project(
    tape: &mut Tape,
    hidden_states: &[Tensor],
    cfg: &MtsaConfig,
    params: &MtsaParams,
) -> Result<Vec<Tensor>> {
    if hidden_states.len() != cfg.n_sources {
        return Err(Error::Config(format!(
            "expected {} hidden-state sets, got {}",
            cfg.n_sources,
            hidden_states.len()
        )));
    }
    let mut out = Vec::with_capacity(cfg.n_sources);
    for (n, h) in hidden_states.iter().enumerate() {
        let (k, dn) = h.dim2()?;
        if k != cfg.tokens || dn != cfg.source_dims[n] {
            return Err(Error::Config(format!(
                "source {n}: got {k}x{dn}, config wants {}x{}",
                cfg.tokens, cfg.source_dims[n]
            )));
        }
        let z = tape.linear(h, &params.down_w[n], &params.down_b[n])?;
        out.push(tape.relu(&z)?);
    }
    Ok(out)
}

/// G_n = sigmoid(F_n W_n); F'_n = G_n * (F_n W'_n + F_n).
pub fn enhance_and_gate(
    tape: &mut Tape,
    f: &[Tensor],
    params: &MtsaParams,
) -> Result<ProjectedFeatures> {
    let mut gates = Vec::with_capacity(f.len());
    let mut enhanced = Vec::with_capacity(f.len());
    for (n, fn_) in f.iter().enumerate() {
        let g = tape.matmul(fn_, &params.enhance_w[n])?;
        let g = tape.sigmoid(&g)?;
        let fp = tape.matmul(fn_, &params.enhance_wp[n])?;
        let fp = tape.add(&fp, fn_)?;
        let fp = tape.mul(&g, &fp)?;
        gates.push(g);
        enhanced.push(fp);
    }
    Ok(ProjectedFeatures {
        f: f.to_vec(),
        gates,
        enhanced,
    })
}

/// Regroup layer-wise sets into token-wise ones: token k's guidance is row
/// k of the deepest set, its early matrix stacks row k of every other set
/// in source order.
pub fn regroup(tape: &mut Tape, enhanced: &[Tensor]) -> Result<TokenGroups> {
    if enhanced.len() < 2 {
        return Err(Error::Config("regroup needs at least 2 sources".into()));
    }
    let k_tokens = enhanced[0].rows()?;
    let last = enhanced.len() - 1;
    let mut guidance = Vec::with_capacity(k_tokens);
    let mut early = Vec::with_capacity(k_tokens);
    for k in 0..k_tokens {
        guidance.push(tape.row(&enhanced[last], k)?);
        let rows: Vec<Tensor> = enhanced[..last]
            .iter()
            .map(|e| tape.row(e, k))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        early.push(tape.concat_rows(&refs)?);
    }
    Ok(TokenGroups { guidance, early })
}

/// Cosine matrix and redundancy rate of one token's early set.
///
/// Rows are l2-normalized (zero rows stay zero), the rectified Gram matrix
/// is summed per row. With all rows nonzero every rate is >= 1; a row
/// unrelated to every other gets exactly 1.
pub fn redundancy_rate(tape: &mut Tape, early_k: &Tensor) -> Result<(Tensor, Tensor)> {
    let n1 = early_k.rows()?;
    let en = tape.normalize_l2_rows(early_k, NORM_EPS)?;
    let cosine = tape.matmul_nt(&en, &en)?;
    let rect = tape.relu(&cosine)?;
    let ones = Tensor::new(vec![n1, 1], vec![1.0; n1])?;
    let rate = tape.matmul(&rect, &ones)?;
    let rate = tape.reshape(&rate, vec![n1])?;
    Ok((cosine, rate))
}

/// Redundancy-normalized linear attention for one token:
/// scores = ReLU(e_k E_k^T) / r_k, l1-normalized into m_k, then
/// e'_k = m_k E_k + e_k. An all-zero score vector falls back to
/// m_k = 0 and e'_k = e_k.
pub fn aggregate(
    tape: &mut Tape,
    guidance_k: &Tensor,
    early_k: &Tensor,
    rate_k: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let n1 = early_k.rows()?;
    let raw = tape.matmul_nt(guidance_k, early_k)?;
    let scores = tape.relu(&raw)?;
    let rate_row = tape.reshape(rate_k, vec![1, n1])?;
    // Zero rows legitimately produce a zero rate; their score is zero too,
    // so the guard only converts 0/0 into 0.
    let rate_safe = tape.clamp_min(&rate_row, NORM_EPS)?;
    let scored = tape.div(&scores, &rate_safe)?;
    let weights = tape.normalize_l1_vec(&scored, NORM_EPS)?;
    let agg = tape.matmul(&weights, early_k)?;
    let blended = tape.add(&agg, guidance_k)?;
    Ok((weights, blended))
}

/// Redundancy structure of every token's early set.
pub fn redundancy_profile(tape: &mut Tape, groups: &TokenGroups) -> Result<RedundancyProfile> {
    let mut cosine = Vec::with_capacity(groups.early.len());
    let mut rate = Vec::with_capacity(groups.early.len());
    for early_k in &groups.early {
        let (c, r) = redundancy_rate(tape, early_k)?;
        cosine.push(c);
        rate.push(r);
    }
    Ok(RedundancyProfile { cosine, rate })
}

/// Redundancy-normalized aggregation of every token, stacked.
pub fn aggregate_all(
    tape: &mut Tape,
    groups: &TokenGroups,
    profile: &RedundancyProfile,
) -> Result<BlendedFeatures> {
    let mut weights = Vec::with_capacity(groups.early.len());
    let mut rows = Vec::with_capacity(groups.early.len());
    for k in 0..groups.early.len() {
        let (m, b) = aggregate(tape, &groups.guidance[k], &groups.early[k], &profile.rate[k])?;
        weights.push(m);
        rows.push(b);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    let blended = tape.concat_rows(&refs)?;
    Ok(BlendedFeatures { weights, blended })
}

/// One token step of an ablation aggregator.
pub fn aggregate_variant(
    tape: &mut Tape,
    kind: Aggregator,
    guidance_k: &Tensor,
    early_k: &Tensor,
    cfg: &MtsaConfig,
    params: &MtsaParams,
) -> Result<Tensor> {
    match kind {
        Aggregator::Mtsa => {
            let (_, rate) = redundancy_rate(tape, early_k)?;
            let (_, blended) = aggregate(tape, guidance_k, early_k, &rate)?;
            Ok(blended)
        }
        Aggregator::LinearA => {
            let n1 = early_k.rows()?;
            let ones = Tensor::ones(vec![n1]);
            let (_, blended) = aggregate(tape, guidance_k, early_k, &ones)?;
            Ok(blended)
        }
        Aggregator::LinearAR => {
            let r = params
                .learnable_r
                .as_ref()
                .ok_or_else(|| Error::Config("learnable_r missing for linear_a_r".into()))?;
            let n1 = early_k.rows()?;
            // Cumulative insertion aggregates over a prefix of the slots.
            let r = if r.len() == n1 {
                r.clone()
            } else {
                let row = tape.reshape(r, vec![1, r.len()])?;
                let row = tape.col_block(&row, 0, n1)?;
                tape.reshape(&row, vec![n1])?
            };
            let (_, blended) = aggregate(tape, guidance_k, early_k, &r)?;
            Ok(blended)
        }
        Aggregator::MaxPool => {
            let pooled = tape.reduce_rows(ReduceKind::Max, early_k)?;
            tape.add(&pooled, guidance_k)
        }
        Aggregator::AvePool => {
            let pooled = tape.reduce_rows(ReduceKind::Mean, early_k)?;
            tape.add(&pooled, guidance_k)
        }
        Aggregator::Mhsa { heads } => {
            let m = params
                .mhsa
                .as_ref()
                .ok_or_else(|| Error::Config("mhsa projections missing".into()))?;
            let d = cfg.hidden_dim;
            let dh = d / heads;
            let q = tape.matmul(guidance_k, &m.wq)?;
            let k = tape.matmul(early_k, &m.wk)?;
            let v = tape.matmul(early_k, &m.wv)?;
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.col_block(&q, h * dh, dh)?;
                let kh = tape.col_block(&k, h * dh, dh)?;
                let vh = tape.col_block(&v, h * dh, dh)?;
                let s = tape.matmul_nt(&qh, &kh)?;
                let s = tape.scale(&s, 1.0 / (dh as f64).sqrt())?;
                let a = tape.softmax_rows(&s)?;
                head_outs.push(tape.matmul(&a, &vh)?);
            }
            let refs: Vec<&Tensor> = head_outs.iter().collect();
            let concat = tape.concat_cols(&refs)?;
            let out = tape.matmul(&concat, &m.wo)?;
            tape.add(&out, guidance_k)
        }
    }
}

/// u = tanh(alpha/T); mixed = u * (blended W_up + b_up) + (1-u) * original.
///
/// The convex form makes alpha = 0 an exact identity on the original input.
pub fn up_project_and_mix(
    tape: &mut Tape,
    blended: &Tensor,
    original_last_input: &Tensor,
    cfg: &MtsaConfig,
    params: &MtsaParams,
) -> Result<Tensor> {
    let up = tape.linear(blended, &params.up_w, &params.up_b)?;
    if up.shape() != original_last_input.shape() {
        return Err(Error::Dim(format!(
            "up-projection {:?} vs original input {:?}",
            up.shape(),
            original_last_input.shape()
        )));
    }
    let u = tape.scale(&params.alpha, 1.0 / cfg.gate_temperature)?;
    let u = tape.tanh(&u)?;
    let neg_u = tape.scale(&u, -1.0)?;
    let one_minus = tape.add(&Tensor::scalar(1.0), &neg_u)?;
    let a = tape.mul(&u, &up)?;
    let b = tape.mul(&one_minus, original_last_input)?;
    tape.add(&a, &b)
}

/// Full adapter pass over detached sources. Rejects gradient-carrying
/// hidden states: the early route must stay frozen.
pub fn mtsa_forward(
    tape: &mut Tape,
    hidden_states: &[Tensor],
    original_last_input: &Tensor,
    cfg: &MtsaConfig,
    params: &MtsaParams,
) -> Result<Tensor> {
    for (i, h) in hidden_states.iter().enumerate() {
        if h.requires_grad() {
            return Err(Error::Contract(format!(
                "hidden state {i} requires grad; sources must be detached"
            )));
        }
    }
    if original_last_input.requires_grad() {
        return Err(Error::Contract(
            "original last-layer input must be detached".into(),
        ));
    }
    mtsa_apply(tape, hidden_states, original_last_input, cfg, params)
}

/// Adapter pass that tolerates gradient-carrying sources. Cumulative
/// multi-layer insertion feeds previously mixed layer inputs back into the
/// source pool, and gradients are supposed to flow through those.
pub fn mtsa_apply(
    tape: &mut Tape,
    hidden_states: &[Tensor],
    original_last_input: &Tensor,
    cfg: &MtsaConfig,
    params: &MtsaParams,
) -> Result<Tensor> {
    let prev_origin = tape.origin().to_string();
    tape.set_origin("mtsa");
    let result = (|| {
        let f = down_project(tape, hidden_states, cfg, params)?;
        let proj = enhance_and_gate(tape, &f, params)?;
        let groups = regroup(tape, &proj.enhanced)?;
        let mut blended_rows = Vec::with_capacity(cfg.tokens);
        for k in 0..cfg.tokens {
            blended_rows.push(aggregate_variant(
                tape,
                cfg.aggregator,
                &groups.guidance[k],
                &groups.early[k],
                cfg,
                params,
            )?);
        }
        let refs: Vec<&Tensor> = blended_rows.iter().collect();
        let blended = tape.concat_rows(&refs)?;
        up_project_and_mix(tape, &blended, original_last_input, cfg, params)
    })();
    tape.set_origin(&prev_origin);
    result
}

#[cfg(test)]
mod tests;
