//! Frozen toy backbones: a Transformer encoder, a multi-stage CNN, and an
//! encoder-decoder. Each one exposes
//!
//! * detached hidden states for the adapter's early route (drop-masked),
//! * the original input of its final layer, and
//! * a gradient-recording replay of that final layer on a substituted
//!   input, through which the adapter's late route trains.
//!
//! Source indexing convention: position 0 is the input embedding (or the
//! CNN stem) and position i is the i-th layer, 1-based. Drop-mask entries
//! name positions; entry 0 is accepted but inert — the embedding anchors
//! the source list — matching published drop sets that start at 0. The
//! deepest position doubles as the aggregation guidance and cannot be
//! dropped.

mod cnn;
mod encdec;
mod transformer;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograph::{Tape, Tensor};
use crate::error::{Error, Result};

pub use encdec::{encdec_route, RouteOutput};

/// Layer-norm variance floor used by every toy block.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Transformer,
    Cnn,
    EncoderDecoder,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    /// Layer count; per stack for the encoder-decoder.
    pub n_layers: usize,
    /// Token width D (transformer families).
    pub model_dim: usize,
    pub n_heads: usize,
    /// Tokens per sequence (transformer families).
    pub seq_len: usize,
    /// Decoder query count (encoder-decoder only).
    pub dec_len: usize,
    /// Raw input feature width (transformer families).
    pub input_dim: usize,
    /// Output channels of the stem and each stage (CNN only).
    pub stage_channels: Vec<usize>,
    /// CNN input as (channels, height, width).
    pub input_shape: (usize, usize, usize),
    /// Source positions excluded from the adapter's early route.
    pub drop_mask: BTreeSet<usize>,
    pub seed: u64,
}

impl BackboneSpec {
    pub fn transformer(
        n_layers: usize,
        model_dim: usize,
        n_heads: usize,
        seq_len: usize,
        input_dim: usize,
        drop_mask: BTreeSet<usize>,
        seed: u64,
    ) -> BackboneSpec {
        BackboneSpec {
            family: Family::Transformer,
            n_layers,
            model_dim,
            n_heads,
            seq_len,
            dec_len: 0,
            input_dim,
            stage_channels: Vec::new(),
            input_shape: (0, 0, 0),
            drop_mask,
            seed,
        }
    }

    pub fn cnn(
        stage_channels: Vec<usize>,
        input_shape: (usize, usize, usize),
        drop_mask: BTreeSet<usize>,
        seed: u64,
    ) -> BackboneSpec {
        BackboneSpec {
            family: Family::Cnn,
            n_layers: stage_channels.len(),
            model_dim: 0,
            n_heads: 0,
            seq_len: 0,
            dec_len: 0,
            input_dim: 0,
            stage_channels,
            input_shape,
            drop_mask,
            seed,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn encoder_decoder(
        n_layers: usize,
        model_dim: usize,
        n_heads: usize,
        seq_len: usize,
        dec_len: usize,
        input_dim: usize,
        drop_mask: BTreeSet<usize>,
        seed: u64,
    ) -> BackboneSpec {
        BackboneSpec {
            family: Family::EncoderDecoder,
            n_layers,
            model_dim,
            n_heads,
            seq_len,
            dec_len,
            input_dim,
            stage_channels: Vec::new(),
            input_shape: (0, 0, 0),
            drop_mask,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.family {
            Family::Transformer | Family::EncoderDecoder => {
                if self.n_layers < 2 {
                    return Err(Error::Config(format!(
                        "need at least 2 layers, got {}",
                        self.n_layers
                    )));
                }
                if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
                    return Err(Error::Config(format!(
                        "heads {} must divide model dim {}",
                        self.n_heads, self.model_dim
                    )));
                }
                if self.seq_len == 0 || self.input_dim == 0 {
                    return Err(Error::Config("seq_len and input_dim must be positive".into()));
                }
                if self.family == Family::EncoderDecoder && self.dec_len == 0 {
                    return Err(Error::Config("decoder length must be positive".into()));
                }
            }
            Family::Cnn => {
                if self.stage_channels.len() < 3 {
                    return Err(Error::Config(format!(
                        "cnn needs a stem plus at least 2 stages, got {} channel entries",
                        self.stage_channels.len()
                    )));
                }
                let (c, h, w) = self.input_shape;
                if c == 0 || h < 4 || w < 4 {
                    return Err(Error::Config(format!(
                        "cnn input shape {:?} too small",
                        self.input_shape
                    )));
                }
            }
        }
        let max_droppable = self.max_droppable_position();
        for &e in &self.drop_mask {
            if e == 0 {
                continue; // the embedding source is always kept
            }
            if e > max_droppable {
                return Err(Error::Config(format!(
                    "drop position {e} out of range: droppable positions are 1..={max_droppable} \
                     (the deepest source is the guidance and the last layer is the regulation \
                     layer, not a source)"
                )));
            }
        }
        if self.effective_sources() < 2 {
            return Err(Error::Config(
                "drop mask leaves fewer than 2 sources".into(),
            ));
        }
        Ok(())
    }

    /// Deepest source position that may be dropped (guidance excluded).
    fn max_droppable_position(&self) -> usize {
        match self.family {
            Family::Transformer => self.n_layers - 2,
            Family::Cnn => self.stage_channels.len().saturating_sub(3),
            // Same mask feeds both stacks: encoder guidance sits at
            // position n, decoder guidance at n-1.
            Family::EncoderDecoder => self.n_layers - 2,
        }
    }

    /// Source count after drop-layer masking (embedding + kept layers).
    pub fn effective_sources(&self) -> usize {
        let top = match self.family {
            Family::Transformer => self.n_layers - 1,
            Family::Cnn => self.stage_channels.len() - 2,
            Family::EncoderDecoder => self.n_layers - 1, // decoder side
        };
        1 + (1..=top)
            .filter(|p| !self.drop_mask.contains(p) || *p == top)
            .count()
    }

    /// Positions kept as sources given `top` = the guidance position.
    pub(crate) fn kept_positions(&self, top: usize) -> Vec<usize> {
        let mut kept = vec![0];
        for p in 1..=top {
            if p == top || !self.drop_mask.contains(&p) {
                kept.push(p);
            }
        }
        kept
    }
}

/// Detached view of one frozen forward pass.
pub struct BackboneTrace {
    /// Drop-masked hidden states, each K x D_n, requires_grad = false.
    pub sources: Vec<Tensor>,
    pub source_names: Vec<String>,
    /// Input of every regulation-stack layer, detached.
    pub layer_inputs: Vec<Tensor>,
    /// Original input of the final layer (K x D tokens).
    pub last_layer_input: Tensor,
    /// Final output in token space.
    pub final_output: Tensor,
    /// Ordered labels of executed blocks, for structural assertions.
    pub exec_log: Vec<String>,
    /// Encoder-side view, present for the encoder-decoder family.
    pub encoder: Option<EncoderSide>,
}

/// Encoder half of an encoder-decoder trace.
pub struct EncoderSide {
    pub sources: Vec<Tensor>,
    pub source_names: Vec<String>,
    /// Original cross-attention memory (the encoder's final output).
    pub memory: Tensor,
}

/// Frozen encoder-only view for the aggregation-as-memory route.
pub struct EncoderView {
    pub sources: Vec<Tensor>,
    pub source_names: Vec<String>,
    pub memory: Tensor,
    pub exec_log: Vec<String>,
}

#[derive(Clone)]
pub(crate) enum Net {
    Transformer(transformer::TransformerNet),
    Cnn(cnn::CnnNet),
    EncDec(encdec::EncDecNet),
}

#[derive(Clone)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub(crate) net: Net,
}

impl Backbone {
    /// Deterministic construction from the spec seed; every parameter is
    /// frozen (requires_grad = false).
    pub fn build(spec: &BackboneSpec) -> Result<Backbone> {
        spec.validate()?;
        let net = match spec.family {
            Family::Transformer => Net::Transformer(transformer::TransformerNet::init(spec)),
            Family::Cnn => Net::Cnn(cnn::CnnNet::init(spec)),
            Family::EncoderDecoder => Net::EncDec(encdec::EncDecNet::init(spec)),
        };
        Ok(Backbone {
            spec: spec.clone(),
            net,
        })
    }

    /// Copy with every parameter marked trainable (full fine-tuning).
    pub fn trainable_clone(&self) -> Backbone {
        let mut out = self.clone();
        out.for_each_param_mut(&mut |_, t| *t = t.clone().with_requires_grad(true));
        out
    }

    /// Register all parameters on a tape (only useful on a trainable clone).
    pub fn watch(&self, tape: &mut Tape) -> Backbone {
        let mut out = self.clone();
        out.for_each_param_mut(&mut |_, t| *t = tape.watch(t));
        out
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.net {
            Net::Transformer(n) => n.visit(f),
            Net::Cnn(n) => n.visit(f),
            Net::EncDec(n) => n.visit(f),
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match &mut self.net {
            Net::Transformer(n) => n.visit_mut(f),
            Net::Cnn(n) => n.visit_mut(f),
            Net::EncDec(n) => n.visit_mut(f),
        }
    }

    pub fn param_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn num_param_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.len());
        n
    }

    /// Replace parameter payloads by name (weights-file loading).
    pub fn load_params(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut missing = Vec::new();
        self.for_each_param_mut(&mut |name, t| {
            match entries.iter().find(|(n, _)| n == name) {
                Some((_, src)) if src.shape() == t.shape() => {
                    *t = src.clone().with_requires_grad(t.requires_grad());
                }
                Some((_, src)) => missing.push(format!(
                    "{name}: shape {:?} vs expected {:?}",
                    src.shape(),
                    t.shape()
                )),
                None => missing.push(format!("{name}: absent from file")),
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Weights(missing.join("; ")))
        }
    }

    /// Plain frozen forward to the final token-space output.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        Ok(self.trace_on(&mut tape, input)?.final_output)
    }

    /// Frozen forward exposing detached sources and the last-layer input.
    /// With a healthy (fully frozen) backbone nothing is recorded and the
    /// scratch tape stays empty; the gradient audit is what catches a
    /// backbone that violates this.
    pub fn trace(&self, input: &Tensor) -> Result<BackboneTrace> {
        let mut tape = Tape::new();
        self.trace_on(&mut tape, input)
    }

    pub(crate) fn trace_on(&self, tape: &mut Tape, input: &Tensor) -> Result<BackboneTrace> {
        match &self.net {
            Net::Transformer(n) => n.trace(&self.spec, tape, input),
            Net::Cnn(n) => n.trace(&self.spec, tape, input),
            Net::EncDec(n) => n.trace(&self.spec, tape, input),
        }
    }

    /// Recorded forward for full fine-tuning: parameters must be watched
    /// trainable views. Returns the final token-space output.
    pub fn forward_recorded(&self, tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
        Ok(self.trace_on(tape, input)?.final_output)
    }

    /// Re-run the final frozen layer on a substituted input, recording the
    /// computation so gradients flow through (not into) it. `ctx` carries
    /// the cross-attention memory for the encoder-decoder family.
    pub fn replay_last(
        &self,
        tape: &mut Tape,
        substituted_input: &Tensor,
        ctx: Option<&Tensor>,
    ) -> Result<Tensor> {
        match &self.net {
            Net::Transformer(n) => n.run_layer(&self.spec, tape, self.spec.n_layers - 1, substituted_input),
            Net::Cnn(n) => n.replay_last(&self.spec, tape, substituted_input),
            Net::EncDec(n) => {
                let memory = ctx.ok_or_else(|| {
                    Error::Config("encoder-decoder replay needs the memory context".into())
                })?;
                n.run_decoder_layer(&self.spec, tape, self.spec.n_layers - 1, substituted_input, memory)
            }
        }
    }

    /// Frozen encoder-only pass of an encoder-decoder backbone.
    pub fn encdec_encoder_view(&self, input: &Tensor) -> Result<EncoderView> {
        let Net::EncDec(n) = &self.net else {
            return Err(Error::Config(
                "encoder view requires an encoder-decoder backbone".into(),
            ));
        };
        let mut tape = Tape::new();
        let parts = n.encoder_forward(&self.spec, &mut tape, input)?;
        let (sources, source_names) = n.enc_sources(&self.spec, &parts);
        Ok(EncoderView {
            sources,
            source_names,
            memory: parts.memory.detached(),
            exec_log: parts.exec_log,
        })
    }

    /// Frozen decoder pass over a given memory value (detached inside);
    /// returns every decoder layer's input, queries first.
    pub fn encdec_decoder_inputs(&self, memory: &Tensor) -> Result<Vec<Tensor>> {
        let Net::EncDec(n) = &self.net else {
            return Err(Error::Config(
                "decoder inputs require an encoder-decoder backbone".into(),
            ));
        };
        let mut tape = Tape::new();
        let parts = n.decoder_forward(&self.spec, &mut tape, &memory.detached())?;
        Ok(parts.inputs.iter().map(Tensor::detached).collect())
    }

    /// Run one regulation-stack layer with recording (insertion patterns).
    pub fn run_layer(
        &self,
        tape: &mut Tape,
        idx: usize,
        x: &Tensor,
        ctx: Option<&Tensor>,
    ) -> Result<Tensor> {
        match &self.net {
            Net::Transformer(n) => n.run_layer(&self.spec, tape, idx, x),
            Net::Cnn(_) => Err(Error::Config(
                "per-layer insertion is not supported for the CNN family".into(),
            )),
            Net::EncDec(n) => {
                let memory = ctx.ok_or_else(|| {
                    Error::Config("decoder layers need the memory context".into())
                })?;
                n.run_decoder_layer(&self.spec, tape, idx, x, memory)
            }
        }
    }
}

#[cfg(test)]
mod tests;
