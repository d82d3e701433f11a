//! Toy Transformer encoder: post-layer-norm blocks of multi-head softmax
//! attention plus a two-layer MLP, sized for desk-scale runs.

use crate::autograph::{Tape, Tensor};
use crate::error::Result;
use crate::rng::{derive_seed, fill_uniform, rng};

use super::{BackboneSpec, BackboneTrace, LN_EPS};

#[derive(Clone)]
pub(crate) struct Embed {
    pub w: Tensor,
    pub pos: Tensor,
}

#[derive(Clone)]
pub(crate) struct TfLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

#[derive(Clone)]
pub(crate) struct TransformerNet {
    pub embed: Embed,
    pub layers: Vec<TfLayer>,
}

pub(crate) fn mat(r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut buf = vec![0.0; rows * cols];
    fill_uniform(r, &mut buf, 1.0 / (rows as f64).sqrt());
    Tensor::new(vec![rows, cols], buf).expect("init shape")
}

pub(crate) fn init_layer(r: &mut rand_chacha::ChaCha8Rng, d: usize) -> TfLayer {
    TfLayer {
        wq: mat(r, d, d),
        wk: mat(r, d, d),
        wv: mat(r, d, d),
        wo: mat(r, d, d),
        ln1_g: Tensor::ones(vec![d]),
        ln1_b: Tensor::zeros(vec![d]),
        w1: mat(r, d, 2 * d),
        b1: Tensor::zeros(vec![2 * d]),
        w2: mat(r, 2 * d, d),
        b2: Tensor::zeros(vec![d]),
        ln2_g: Tensor::ones(vec![d]),
        ln2_b: Tensor::zeros(vec![d]),
    }
}

pub(crate) fn visit_layer(prefix: &str, l: &TfLayer, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.wq"), &l.wq);
    f(&format!("{prefix}.wk"), &l.wk);
    f(&format!("{prefix}.wv"), &l.wv);
    f(&format!("{prefix}.wo"), &l.wo);
    f(&format!("{prefix}.ln1.g"), &l.ln1_g);
    f(&format!("{prefix}.ln1.b"), &l.ln1_b);
    f(&format!("{prefix}.mlp.w1"), &l.w1);
    f(&format!("{prefix}.mlp.b1"), &l.b1);
    f(&format!("{prefix}.mlp.w2"), &l.w2);
    f(&format!("{prefix}.mlp.b2"), &l.b2);
    f(&format!("{prefix}.ln2.g"), &l.ln2_g);
    f(&format!("{prefix}.ln2.b"), &l.ln2_b);
}

pub(crate) fn visit_layer_mut(prefix: &str, l: &mut TfLayer, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.wq"), &mut l.wq);
    f(&format!("{prefix}.wk"), &mut l.wk);
    f(&format!("{prefix}.wv"), &mut l.wv);
    f(&format!("{prefix}.wo"), &mut l.wo);
    f(&format!("{prefix}.ln1.g"), &mut l.ln1_g);
    f(&format!("{prefix}.ln1.b"), &mut l.ln1_b);
    f(&format!("{prefix}.mlp.w1"), &mut l.w1);
    f(&format!("{prefix}.mlp.b1"), &mut l.b1);
    f(&format!("{prefix}.mlp.w2"), &mut l.w2);
    f(&format!("{prefix}.mlp.b2"), &mut l.b2);
    f(&format!("{prefix}.ln2.g"), &mut l.ln2_g);
    f(&format!("{prefix}.ln2.b"), &mut l.ln2_b);
}

/// Multi-head softmax attention. `kv = None` means self-attention; causal
/// masks keys above the diagonal (query and key counts must then agree).
pub(crate) fn attention(
    tape: &mut Tape,
    x: &Tensor,
    kv: Option<&Tensor>,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let kvt = kv.unwrap_or(x);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(kvt, wk)?;
    let v = tape.matmul(kvt, wv)?;
    let d = q.cols()?;
    let dh = d / heads;
    let kq = q.rows()?;
    let kk = k.rows()?;
    let mask = if causal {
        let mut m = vec![0.0; kq * kk];
        for i in 0..kq {
            for j in 0..kk {
                if j > i {
                    m[i * kk + j] = -1e30;
                }
            }
        }
        Some(Tensor::new(vec![kq, kk], m)?)
    } else {
        None
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.col_block(&q, h * dh, dh)?;
        let kh = tape.col_block(&k, h * dh, dh)?;
        let vh = tape.col_block(&v, h * dh, dh)?;
        let s = tape.matmul_nt(&qh, &kh)?;
        let mut s = tape.scale(&s, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = &mask {
            s = tape.add(&s, m)?;
        }
        let a = tape.softmax_rows(&s)?;
        outs.push(tape.matmul(&a, &vh)?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    let cat = tape.concat_cols(&refs)?;
    tape.matmul(&cat, wo)
}

/// Post-LN block: LN(x + attn(x)) then LN(h + mlp(h)).
pub(crate) fn block_forward(
    tape: &mut Tape,
    l: &TfLayer,
    x: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let a = attention(tape, x, None, &l.wq, &l.wk, &l.wv, &l.wo, heads, false)?;
    let r = tape.add(x, &a)?;
    let h = tape.layer_norm(&r, &l.ln1_g, &l.ln1_b, LN_EPS)?;
    let m = tape.linear(&h, &l.w1, &l.b1)?;
    let m = tape.relu(&m)?;
    let m = tape.linear(&m, &l.w2, &l.b2)?;
    let r2 = tape.add(&h, &m)?;
    tape.layer_norm(&r2, &l.ln2_g, &l.ln2_b, LN_EPS)
}

impl TransformerNet {
    pub fn init(spec: &BackboneSpec) -> TransformerNet {
        let mut r = rng(derive_seed(spec.seed, "transformer"));
        let d = spec.model_dim;
        let embed = Embed {
            w: mat(&mut r, spec.input_dim, d),
            pos: mat(&mut r, spec.seq_len, d),
        };
        let layers = (0..spec.n_layers).map(|_| init_layer(&mut r, d)).collect();
        TransformerNet { embed, layers }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("embed.w", &self.embed.w);
        f("embed.pos", &self.embed.pos);
        for (i, l) in self.layers.iter().enumerate() {
            visit_layer(&format!("layer.{i}"), l, f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("embed.w", &mut self.embed.w);
        f("embed.pos", &mut self.embed.pos);
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_layer_mut(&format!("layer.{i}"), l, f);
        }
    }

    pub fn run_layer(
        &self,
        spec: &BackboneSpec,
        tape: &mut Tape,
        idx: usize,
        x: &Tensor,
    ) -> Result<Tensor> {
        let prev = tape.origin().to_string();
        tape.set_origin(&format!("backbone-layer-{idx}"));
        let out = block_forward(tape, &self.layers[idx], x, spec.n_heads);
        tape.set_origin(&prev);
        out
    }

    pub fn trace(
        &self,
        spec: &BackboneSpec,
        tape: &mut Tape,
        input: &Tensor,
    ) -> Result<BackboneTrace> {
        let mut exec_log = Vec::new();
        tape.set_origin("backbone-embedding");
        let e = tape.matmul(input, &self.embed.w)?;
        let e = tape.add(&e, &self.embed.pos)?;
        exec_log.push("embedding".to_string());

        let mut x = e.clone();
        let mut layer_inputs = Vec::with_capacity(spec.n_layers);
        let mut layer_outputs = Vec::with_capacity(spec.n_layers);
        for (i, l) in self.layers.iter().enumerate() {
            tape.set_origin(&format!("backbone-layer-{i}"));
            layer_inputs.push(x.clone());
            x = block_forward(tape, l, &x, spec.n_heads)?;
            layer_outputs.push(x.clone());
            exec_log.push(format!("layer-{i}"));
        }

        // Source position 0 = embedding, position p = output of layer p
        // (1-based); the deepest position is the last layer's input.
        let top = spec.n_layers - 1;
        let mut sources = Vec::new();
        let mut source_names = Vec::new();
        for p in spec.kept_positions(top) {
            if p == 0 {
                sources.push(e.detached());
                source_names.push("embedding".to_string());
            } else {
                sources.push(layer_outputs[p - 1].detached());
                source_names.push(format!("layer-{}", p - 1));
            }
        }
        Ok(BackboneTrace {
            sources,
            source_names,
            last_layer_input: layer_inputs[spec.n_layers - 1].detached(),
            layer_inputs: layer_inputs.iter().map(Tensor::detached).collect(),
            final_output: x,
            exec_log,
            encoder: None,
        })
    }
}
