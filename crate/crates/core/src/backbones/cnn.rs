//! Toy multi-stage CNN: a stride-1 stem followed by stride-2 stages with
//! doubling channels. The final stage is the regulation layer; its input
//! feature map defines the token grid (K = H'·W') for the adapter.

use crate::autograph::{PoolKind, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, fill_uniform, rng};

use super::{BackboneSpec, BackboneTrace};

#[derive(Clone)]
pub(crate) struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// One stage: stride-2 transition conv plus a stride-1 conv, both ReLU.
#[derive(Clone)]
pub(crate) struct Stage {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

#[derive(Clone)]
pub(crate) struct CnnNet {
    pub stem: ConvParams,
    pub stages: Vec<Stage>,
}

fn conv_init(r: &mut rand_chacha::ChaCha8Rng, cout: usize, cin: usize) -> ConvParams {
    let fan_in = (cin * 9) as f64;
    let mut w = vec![0.0; cout * cin * 9];
    fill_uniform(r, &mut w, 1.0 / fan_in.sqrt());
    let mut b = vec![0.0; cout];
    fill_uniform(r, &mut b, 0.1);
    ConvParams {
        w: Tensor::new(vec![cout, cin, 3, 3], w).expect("conv weight shape"),
        b: Tensor::new(vec![cout], b).expect("conv bias shape"),
    }
}

fn stage_forward(tape: &mut Tape, s: &Stage, x: &Tensor) -> Result<Tensor> {
    let y = tape.conv2d(x, &s.conv1.w, &s.conv1.b, 2, 1)?;
    let y = tape.relu(&y)?;
    let y = tape.conv2d(&y, &s.conv2.w, &s.conv2.b, 1, 1)?;
    tape.relu(&y)
}

impl CnnNet {
    pub fn init(spec: &BackboneSpec) -> CnnNet {
        let mut r = rng(derive_seed(spec.seed, "cnn"));
        let ch = &spec.stage_channels;
        let stem = conv_init(&mut r, ch[0], spec.input_shape.0);
        let stages = (1..ch.len())
            .map(|i| Stage {
                conv1: conv_init(&mut r, ch[i], ch[i - 1]),
                conv2: conv_init(&mut r, ch[i], ch[i]),
            })
            .collect();
        CnnNet { stem, stages }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("stem.w", &self.stem.w);
        f("stem.b", &self.stem.b);
        for (i, s) in self.stages.iter().enumerate() {
            f(&format!("stage.{i}.conv1.w"), &s.conv1.w);
            f(&format!("stage.{i}.conv1.b"), &s.conv1.b);
            f(&format!("stage.{i}.conv2.w"), &s.conv2.w);
            f(&format!("stage.{i}.conv2.b"), &s.conv2.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("stem.w", &mut self.stem.w);
        f("stem.b", &mut self.stem.b);
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("stage.{i}.conv1.w"), &mut s.conv1.w);
            f(&format!("stage.{i}.conv1.b"), &mut s.conv1.b);
            f(&format!("stage.{i}.conv2.w"), &mut s.conv2.w);
            f(&format!("stage.{i}.conv2.b"), &mut s.conv2.b);
        }
    }

    /// Final stage on a substituted token matrix: tokens are reshaped back
    /// to the map the stage expects, and its output returns to token space.
    pub fn replay_last(
        &self,
        spec: &BackboneSpec,
        tape: &mut Tape,
        x_tokens: &Tensor,
    ) -> Result<Tensor> {
        let last = self.stages.len() - 1;
        let (h, w) = self.last_input_spatial(spec);
        if x_tokens.rows()? != h * w {
            return Err(Error::Dim(format!(
                "substituted input has {} tokens, final stage expects {}",
                x_tokens.rows()?,
                h * w
            )));
        }
        let prev = tape.origin().to_string();
        tape.set_origin(&format!("backbone-layer-{last}"));
        let map = tape.tokens_to_chw(x_tokens, h, w)?;
        let out = stage_forward(tape, &self.stages[last], &map)?;
        let toks = tape.chw_to_tokens(&out)?;
        tape.set_origin(&prev);
        Ok(toks)
    }

    /// Spatial size of the final stage's input map.
    fn last_input_spatial(&self, spec: &BackboneSpec) -> (usize, usize) {
        let (_, mut h, mut w) = spec.input_shape;
        // Stem is stride 1; each stage before the last halves (ceil).
        for _ in 0..self.stages.len() - 1 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn trace(
        &self,
        spec: &BackboneSpec,
        tape: &mut Tape,
        input: &Tensor,
    ) -> Result<BackboneTrace> {
        let mut exec_log = Vec::new();
        tape.set_origin("backbone-embedding");
        let y = tape.conv2d(input, &self.stem.w, &self.stem.b, 1, 1)?;
        let stem_out = tape.relu(&y)?;
        exec_log.push("stem".to_string());

        let mut x = stem_out.clone();
        let mut stage_inputs = Vec::new();
        let mut stage_outputs = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            tape.set_origin(&format!("backbone-layer-{i}"));
            stage_inputs.push(x.clone());
            x = stage_forward(tape, s, &x)?;
            stage_outputs.push(x.clone());
            exec_log.push(format!("stage-{i}"));
        }

        // All sources are pooled to the final stage's input resolution and
        // flattened to token matrices.
        let (th, tw) = self.last_input_spatial(spec);
        let mut to_tokens = |t: &Tensor| -> Result<Tensor> {
            let (_, h, w) = t.dim3()?;
            let pooled = if (h, w) == (th, tw) {
                t.clone()
            } else {
                tape.pool2d(PoolKind::AdaptiveAvg, t, th, tw)?
            };
            Ok(tape.chw_to_tokens(&pooled)?.detached())
        };

        // Position 0 = stem, position p = output of stage p (1-based); the
        // deepest position is the final stage's input.
        let top = self.stages.len() - 1;
        let mut sources = Vec::new();
        let mut source_names = Vec::new();
        for p in spec.kept_positions(top) {
            if p == 0 {
                sources.push(to_tokens(&stem_out)?);
                source_names.push("stem".to_string());
            } else {
                sources.push(to_tokens(&stage_outputs[p - 1])?);
                source_names.push(format!("stage-{}", p - 1));
            }
        }

        let last_input_tokens = {
            let t = tape.chw_to_tokens(&stage_inputs[top])?;
            t.detached()
        };
        let final_tokens = tape.chw_to_tokens(&x)?;
        let layer_inputs = stage_inputs
            .iter()
            .map(Tensor::detached)
            .collect();
        Ok(BackboneTrace {
            sources,
            source_names,
            layer_inputs,
            last_layer_input: last_input_tokens,
            final_output: final_tokens,
            exec_log,
            encoder: None,
        })
    }
}
