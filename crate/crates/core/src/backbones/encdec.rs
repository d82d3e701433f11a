//! Toy encoder-decoder: a Transformer encoder feeding the cross-attention
//! memory of a decoder with causal self-attention and teacher-forced
//! position queries. The regulation layer is the last decoder layer.
//!
//! Routing rule for the adapter: the encoder is never replayed. Its
//! aggregated features are produced once and used directly as the memory,
//! so every encoder layer runs exactly one forward. Shallow decoder layers
//! consume that memory detached; only the last decoder layer sees the
//! gradient-carrying memory, which is the single path through which the
//! encoder-side adapter trains.

use crate::autograph::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::mtsa::{mtsa_apply, MtsaConfig, MtsaParams};
use crate::rng::{derive_seed, fill_uniform, rng};

use super::transformer::{
    attention, block_forward, init_layer, mat, visit_layer, visit_layer_mut, TfLayer,
};
use super::{Backbone, BackboneSpec, BackboneTrace, EncoderSide, Net, LN_EPS};

/// Decoder block: causal self-attention, cross-attention over the memory,
/// and an MLP, each with a post layer norm.
#[derive(Clone)]
pub(crate) struct DecLayer {
    pub self_attn: TfLayer,
    pub xq: Tensor,
    pub xk: Tensor,
    pub xv: Tensor,
    pub xo: Tensor,
    pub ln3_g: Tensor,
    pub ln3_b: Tensor,
}

#[derive(Clone)]
pub(crate) struct EncDecNet {
    pub enc_embed_w: Tensor,
    pub enc_pos: Tensor,
    pub enc_layers: Vec<TfLayer>,
    /// Frozen decoder position queries (the decoder-side "embedding").
    pub dec_queries: Tensor,
    pub dec_layers: Vec<DecLayer>,
}

pub(crate) struct EncParts {
    pub embed: Tensor,
    pub outputs: Vec<Tensor>,
    pub memory: Tensor,
    pub exec_log: Vec<String>,
}

pub(crate) struct DecParts {
    pub inputs: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
    pub final_output: Tensor,
    pub exec_log: Vec<String>,
}

fn dec_layer_forward(
    tape: &mut Tape,
    l: &DecLayer,
    x: &Tensor,
    memory: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let a = attention(
        tape,
        x,
        None,
        &l.self_attn.wq,
        &l.self_attn.wk,
        &l.self_attn.wv,
        &l.self_attn.wo,
        heads,
        true,
    )?;
    let r = tape.add(x, &a)?;
    let h = tape.layer_norm(&r, &l.self_attn.ln1_g, &l.self_attn.ln1_b, LN_EPS)?;

    let c = attention(tape, &h, Some(memory), &l.xq, &l.xk, &l.xv, &l.xo, heads, false)?;
    let r2 = tape.add(&h, &c)?;
    let h2 = tape.layer_norm(&r2, &l.ln3_g, &l.ln3_b, LN_EPS)?;

    let m = tape.linear(&h2, &l.self_attn.w1, &l.self_attn.b1)?;
    let m = tape.relu(&m)?;
    let m = tape.linear(&m, &l.self_attn.w2, &l.self_attn.b2)?;
    let r3 = tape.add(&h2, &m)?;
    tape.layer_norm(&r3, &l.self_attn.ln2_g, &l.self_attn.ln2_b, LN_EPS)
}

impl EncDecNet {
    pub fn init(spec: &BackboneSpec) -> EncDecNet {
        let mut r = rng(derive_seed(spec.seed, "encdec"));
        let d = spec.model_dim;
        let enc_embed_w = mat(&mut r, spec.input_dim, d);
        let enc_pos = mat(&mut r, spec.seq_len, d);
        let enc_layers = (0..spec.n_layers).map(|_| init_layer(&mut r, d)).collect();
        let mut q = vec![0.0; spec.dec_len * d];
        fill_uniform(&mut r, &mut q, 1.0);
        let dec_queries = Tensor::new(vec![spec.dec_len, d], q).expect("query shape");
        let dec_layers = (0..spec.n_layers)
            .map(|_| DecLayer {
                self_attn: init_layer(&mut r, d),
                xq: mat(&mut r, d, d),
                xk: mat(&mut r, d, d),
                xv: mat(&mut r, d, d),
                xo: mat(&mut r, d, d),
                ln3_g: Tensor::ones(vec![d]),
                ln3_b: Tensor::zeros(vec![d]),
            })
            .collect();
        EncDecNet {
            enc_embed_w,
            enc_pos,
            enc_layers,
            dec_queries,
            dec_layers,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("enc.embed.w", &self.enc_embed_w);
        f("enc.embed.pos", &self.enc_pos);
        for (i, l) in self.enc_layers.iter().enumerate() {
            visit_layer(&format!("enc.layer.{i}"), l, f);
        }
        f("dec.queries", &self.dec_queries);
        for (i, l) in self.dec_layers.iter().enumerate() {
            visit_layer(&format!("dec.layer.{i}.self"), &l.self_attn, f);
            f(&format!("dec.layer.{i}.xq"), &l.xq);
            f(&format!("dec.layer.{i}.xk"), &l.xk);
            f(&format!("dec.layer.{i}.xv"), &l.xv);
            f(&format!("dec.layer.{i}.xo"), &l.xo);
            f(&format!("dec.layer.{i}.ln3.g"), &l.ln3_g);
            f(&format!("dec.layer.{i}.ln3.b"), &l.ln3_b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("enc.embed.w", &mut self.enc_embed_w);
        f("enc.embed.pos", &mut self.enc_pos);
        for (i, l) in self.enc_layers.iter_mut().enumerate() {
            visit_layer_mut(&format!("enc.layer.{i}"), l, f);
        }
        f("dec.queries", &mut self.dec_queries);
        for (i, l) in self.dec_layers.iter_mut().enumerate() {
            visit_layer_mut(&format!("dec.layer.{i}.self"), &mut l.self_attn, f);
            f(&format!("dec.layer.{i}.xq"), &mut l.xq);
            f(&format!("dec.layer.{i}.xk"), &mut l.xk);
            f(&format!("dec.layer.{i}.xv"), &mut l.xv);
            f(&format!("dec.layer.{i}.xo"), &mut l.xo);
            f(&format!("dec.layer.{i}.ln3.g"), &mut l.ln3_g);
            f(&format!("dec.layer.{i}.ln3.b"), &mut l.ln3_b);
        }
    }

    pub fn run_decoder_layer(
        &self,
        spec: &BackboneSpec,
        tape: &mut Tape,
        idx: usize,
        x: &Tensor,
        memory: &Tensor,
    ) -> Result<Tensor> {
        let prev = tape.origin().to_string();
        tape.set_origin(&format!("backbone-dec-layer-{idx}"));
        let out = dec_layer_forward(tape, &self.dec_layers[idx], x, memory, spec.n_heads);
        tape.set_origin(&prev);
        out
    }

    pub(crate) fn encoder_forward(
        &self,
        spec: &BackboneSpec,
        tape: &mut Tape,
        input: &Tensor,
    ) -> Result<EncParts> {
        let mut exec_log = Vec::new();
        tape.set_origin("backbone-enc-embedding");
        let e = tape.matmul(input, &self.enc_embed_w)?;
        let e = tape.add(&e, &self.enc_pos)?;
        exec_log.push("enc-embedding".to_string());
        let mut x = e.clone();
        let mut outputs = Vec::with_capacity(spec.n_layers);
        for (i, l) in self.enc_layers.iter().enumerate() {
            tape.set_origin(&format!("backbone-enc-layer-{i}"));
            x = block_forward(tape, l, &x, spec.n_heads)?;
            outputs.push(x.clone());
            exec_log.push(format!("enc-layer-{i}"));
        }
        Ok(EncParts {
            embed: e,
            memory: x,
            outputs,
            exec_log,
        })
    }

    pub(crate) fn decoder_forward(
        &self,
        spec: &BackboneSpec,
        tape: &mut Tape,
        memory: &Tensor,
    ) -> Result<DecParts> {
        let mut exec_log = Vec::new();
        let mut y = self.dec_queries.clone();
        let mut inputs = Vec::with_capacity(spec.n_layers);
        let mut outputs = Vec::with_capacity(spec.n_layers);
        for (i, l) in self.dec_layers.iter().enumerate() {
            tape.set_origin(&format!("backbone-dec-layer-{i}"));
            inputs.push(y.clone());
            y = dec_layer_forward(tape, l, &y, memory, spec.n_heads)?;
            outputs.push(y.clone());
            exec_log.push(format!("dec-layer-{i}"));
        }
        Ok(DecParts {
            inputs,
            final_output: y.clone(),
            outputs,
            exec_log,
        })
    }

    /// Encoder sources: positions 0..=n with 0 = embedding; the deepest
    /// position (the would-be memory) is the aggregation guidance.
    pub(crate) fn enc_sources(
        &self,
        spec: &BackboneSpec,
        parts: &EncParts,
    ) -> (Vec<Tensor>, Vec<String>) {
        let mut sources = Vec::new();
        let mut names = Vec::new();
        for p in spec.kept_positions(spec.n_layers) {
            if p == 0 {
                sources.push(parts.embed.detached());
                names.push("enc-embedding".to_string());
            } else {
                sources.push(parts.outputs[p - 1].detached());
                names.push(format!("enc-layer-{}", p - 1));
            }
        }
        (sources, names)
    }

    pub(crate) fn dec_sources(
        &self,
        spec: &BackboneSpec,
        parts: &DecParts,
    ) -> (Vec<Tensor>, Vec<String>) {
        let mut sources = Vec::new();
        let mut names = Vec::new();
        for p in spec.kept_positions(spec.n_layers - 1) {
            if p == 0 {
                sources.push(self.dec_queries.detached());
                names.push("dec-queries".to_string());
            } else {
                sources.push(parts.outputs[p - 1].detached());
                names.push(format!("dec-layer-{}", p - 1));
            }
        }
        (sources, names)
    }

    pub fn trace(
        &self,
        spec: &BackboneSpec,
        tape: &mut Tape,
        input: &Tensor,
    ) -> Result<BackboneTrace> {
        let enc = self.encoder_forward(spec, tape, input)?;
        let dec = self.decoder_forward(spec, tape, &enc.memory)?;
        let (enc_sources, enc_names) = self.enc_sources(spec, &enc);
        let (sources, source_names) = self.dec_sources(spec, &dec);
        let mut exec_log = enc.exec_log.clone();
        exec_log.extend(dec.exec_log.clone());
        Ok(BackboneTrace {
            sources,
            source_names,
            last_layer_input: dec.inputs[spec.n_layers - 1].detached(),
            layer_inputs: dec.inputs.iter().map(Tensor::detached).collect(),
            final_output: dec.final_output,
            exec_log,
            encoder: Some(EncoderSide {
                sources: enc_sources,
                source_names: enc_names,
                memory: enc.memory.detached(),
            }),
        })
    }
}

/// Output of the encoder-decoder adapter routing.
pub struct RouteOutput {
    pub output: Tensor,
    /// The gradient-carrying memory fed to the last decoder layer.
    pub memory: Tensor,
    pub enc_sources: Vec<Tensor>,
    pub dec_sources: Vec<Tensor>,
    /// Every block execution, in order; encoder layers appear exactly once.
    pub exec_log: Vec<String>,
}

/// Route both adapters through an encoder-decoder backbone:
///
/// * encoder side — aggregated features are produced once and consumed
///   directly as the cross-attention memory; no encoder layer re-runs;
/// * decoder side — standard last-layer insertion via the final decoder
///   layer, which also receives the gradient-carrying memory.
pub fn encdec_route(
    backbone: &Backbone,
    tape: &mut Tape,
    input: &Tensor,
    enc_cfg: &MtsaConfig,
    enc_params: &MtsaParams,
    dec_cfg: &MtsaConfig,
    dec_params: &MtsaParams,
) -> Result<RouteOutput> {
    let net = match &backbone.net {
        Net::EncDec(n) => n,
        _ => {
            return Err(Error::Config(
                "encdec_route requires an encoder-decoder backbone".into(),
            ))
        }
    };
    let spec = &backbone.spec;

    // Frozen encoder pass (nothing recorded).
    let enc = net.encoder_forward(spec, tape, input)?;
    let (enc_sources, _) = net.enc_sources(spec, &enc);

    // Early route of the encoder adapter: the aggregated blend replaces
    // the memory, mixed against the original encoder output.
    let memory = mtsa_apply(tape, &enc_sources, &enc.memory.detached(), enc_cfg, enc_params)?;

    // Frozen decoder pass over the value of the updated memory.
    let dec = net.decoder_forward(spec, tape, &memory.detached())?;
    let (dec_sources, _) = net.dec_sources(spec, &dec);

    // Decoder adapter plus the recorded final decoder layer; gradients
    // reach the encoder adapter through the memory argument.
    let last = spec.n_layers - 1;
    let mixed = mtsa_apply(
        tape,
        &dec_sources,
        &dec.inputs[last].detached(),
        dec_cfg,
        dec_params,
    )?;
    let output = net.run_decoder_layer(spec, tape, last, &mixed, &memory)?;

    let mut exec_log = enc.exec_log;
    exec_log.extend(dec.exec_log);
    exec_log.push(format!("dec-layer-{last}-replay"));
    Ok(RouteOutput {
        output,
        memory,
        enc_sources,
        dec_sources,
        exec_log,
    })
}
