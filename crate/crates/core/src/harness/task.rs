//! Synthetic source/target domain-shift tasks, sized for desk-scale runs.
//!
//! Every target split is a parametric transform of the matching source
//! split: a feature-space rotation (Givens rotations on coordinate pairs),
//! an optional label permutation, and additive noise. The identity shift
//! therefore reproduces the source domain exactly.
//!
//! With `redundancy_stress` on, the informative factor of each sample is
//! written into several identical feature blocks, so frozen layers carry
//! correlated copies of the same signal — the situation the redundancy
//! rate is built to handle.

use serde::{Deserialize, Serialize};

use crate::autograph::Tensor;
use crate::backbones::{BackboneSpec, Family};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, fill_normal, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Continuous token sequences, one class per sequence (Transformer).
    TokenPattern,
    /// Small images with class-positioned blobs (CNN).
    ImageBlob,
    /// Symbol sequences copied with a cyclic shift (encoder-decoder).
    Seq2SeqCopy,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ShiftParams {
    /// Rotation angle applied to feature coordinate pairs.
    pub angle: f64,
    /// Permute class labels in the target domain.
    pub label_remap: bool,
    /// Std-dev of additive target-domain noise.
    pub noise: f64,
}

impl ShiftParams {
    pub fn identity() -> ShiftParams {
        ShiftParams {
            angle: 0.0,
            label_remap: false,
            noise: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle == 0.0 && !self.label_remap && self.noise == 0.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Class count, or vocabulary size for the copy task.
    pub n_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub shift: ShiftParams,
    pub redundancy_stress: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Seq(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Tensor,
    pub label: Label,
}

#[derive(Clone, Debug)]
pub struct DomainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub source: DomainData,
    pub target: DomainData,
}

/// Compatibility between task kinds and backbone families.
pub fn expected_family(kind: TaskKind) -> Family {
    match kind {
        TaskKind::TokenPattern => Family::Transformer,
        TaskKind::ImageBlob => Family::Cnn,
        TaskKind::Seq2SeqCopy => Family::EncoderDecoder,
    }
}

/// Deterministic source/target dataset pair for a backbone's input shape.
pub fn generate_task(spec: &TaskSpec, backbone: &BackboneSpec) -> Result<TaskData> {
    if spec.n_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            spec.n_classes
        )));
    }
    if expected_family(spec.kind) != backbone.family {
        return Err(Error::Config(format!(
            "task {:?} expects a {:?} backbone, got {:?}",
            spec.kind,
            expected_family(spec.kind),
            backbone.family
        )));
    }
    let gen: Box<dyn Fn(&TaskSpec, &BackboneSpec, &str, usize) -> Result<Vec<Sample>>> =
        match spec.kind {
            TaskKind::TokenPattern => Box::new(gen_token_pattern),
            TaskKind::ImageBlob => Box::new(gen_image_blob),
            TaskKind::Seq2SeqCopy => Box::new(gen_seq_copy),
        };
    let source = DomainData {
        train: gen(spec, backbone, "train", spec.train_size)?,
        val: gen(spec, backbone, "val", spec.val_size)?,
        test: gen(spec, backbone, "test", spec.test_size)?,
    };
    let target = DomainData {
        train: apply_shift(spec, &source.train, "train")?,
        val: apply_shift(spec, &source.val, "val")?,
        test: apply_shift(spec, &source.test, "test")?,
    };
    Ok(TaskData { source, target })
}

fn class_stream(spec: &TaskSpec, split: &str) -> rand_chacha::ChaCha8Rng {
    rng(derive_seed(spec.seed, &format!("labels-{split}")))
}

fn noise_stream(spec: &TaskSpec, split: &str, tag: &str) -> rand_chacha::ChaCha8Rng {
    rng(derive_seed(spec.seed, &format!("{tag}-{split}")))
}

// ── token-pattern classification ─────────────────────────────────────

const BLOCK: usize = 4;

fn gen_token_pattern(
    spec: &TaskSpec,
    bb: &BackboneSpec,
    split: &str,
    count: usize,
) -> Result<Vec<Sample>> {
    let k = bb.seq_len;
    let dim = bb.input_dim;
    if dim % BLOCK != 0 || dim / BLOCK < 2 {
        return Err(Error::Config(format!(
            "token task wants input_dim a multiple of {BLOCK} with at least 2 blocks, got {dim}"
        )));
    }
    let blocks = dim / BLOCK;
    let info_blocks = if spec.redundancy_stress {
        (blocks - 1).min(3).max(1)
    } else {
        1
    };

    // Class prototypes: one K x BLOCK pattern per class.
    let mut proto_rng = rng(derive_seed(spec.seed, "prototypes"));
    let protos: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            let mut p = vec![0.0; k * BLOCK];
            fill_normal(&mut proto_rng, &mut p, 1.0);
            p
        })
        .collect();

    let mut cls_rng = class_stream(spec, split);
    let mut lat_rng = noise_stream(spec, split, "latent");
    let mut dis_rng = noise_stream(spec, split, "distract");

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        use rand::Rng;
        let c = cls_rng.gen_range(0..spec.n_classes);
        let mut latent = vec![0.0; k * BLOCK];
        fill_normal(&mut lat_rng, &mut latent, 0.25);
        for (l, p) in latent.iter_mut().zip(&protos[c]) {
            *l += p;
        }
        let mut data = vec![0.0; k * dim];
        let mut distract = vec![0.0; k * (blocks - info_blocks) * BLOCK];
        fill_normal(&mut dis_rng, &mut distract, 0.6);
        let mut di = 0;
        for t in 0..k {
            for b in 0..blocks {
                for j in 0..BLOCK {
                    let v = if b < info_blocks {
                        latent[t * BLOCK + j]
                    } else {
                        di += 1;
                        distract[di - 1]
                    };
                    data[t * dim + b * BLOCK + j] = v;
                }
            }
        }
        out.push(Sample {
            input: Tensor::new(vec![k, dim], data)?,
            label: Label::Class(c),
        });
    }
    Ok(out)
}

// ── image-blob classification ────────────────────────────────────────

fn gen_image_blob(
    spec: &TaskSpec,
    bb: &BackboneSpec,
    split: &str,
    count: usize,
) -> Result<Vec<Sample>> {
    let (c_in, h, w) = bb.input_shape;
    if c_in < 2 {
        return Err(Error::Config("image task needs at least 2 channels".into()));
    }
    // Class centers laid out on a ring.
    let centers: Vec<(f64, f64)> = (0..spec.n_classes)
        .map(|c| {
            let a = 2.0 * std::f64::consts::PI * c as f64 / spec.n_classes as f64;
            (
                h as f64 / 2.0 + a.cos() * h as f64 / 4.0,
                w as f64 / 2.0 + a.sin() * w as f64 / 4.0,
            )
        })
        .collect();
    let copies = if spec.redundancy_stress { 3 } else { 1 };
    let sigma = h as f64 / 8.0;

    let mut cls_rng = class_stream(spec, split);
    let mut jit_rng = noise_stream(spec, split, "jitter");
    let mut bg_rng = noise_stream(spec, split, "background");

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        use rand::Rng;
        let c = cls_rng.gen_range(0..spec.n_classes);
        let mut img = vec![0.0; c_in * h * w];
        fill_normal(&mut bg_rng, &mut img, 0.15);
        let (cy, cx) = centers[c];
        let jy: f64 = jit_rng.gen_range(-1.0..1.0);
        let jx: f64 = jit_rng.gen_range(-1.0..1.0);
        for copy in 0..copies {
            // Correlated copies at fixed per-copy offsets.
            let oy = cy + jy + (copy as f64) * 2.0 - (copies as f64 - 1.0);
            let ox = cx + jx + (copy as f64) * 2.0 - (copies as f64 - 1.0);
            for ch in 0..c_in {
                let amp = 1.0 / (1.0 + ch as f64 * 0.5);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - oy).powi(2) + (x as f64 - ox).powi(2);
                        img[ch * h * w + y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
        out.push(Sample {
            input: Tensor::new(vec![c_in, h, w], img)?,
            label: Label::Class(c),
        });
    }
    Ok(out)
}

// ── sequence copy with shift ─────────────────────────────────────────

fn gen_seq_copy(
    spec: &TaskSpec,
    bb: &BackboneSpec,
    split: &str,
    count: usize,
) -> Result<Vec<Sample>> {
    let k = bb.seq_len;
    let dim = bb.input_dim;
    let vocab = spec.n_classes;
    if dim < vocab {
        return Err(Error::Config(format!(
            "copy task needs input_dim >= vocab ({dim} < {vocab})"
        )));
    }
    if bb.dec_len > k {
        return Err(Error::Config(
            "copy task needs dec_len <= seq_len".into(),
        ));
    }
    let copies = if spec.redundancy_stress {
        (dim / vocab).min(3)
    } else {
        1
    };
    let mut cls_rng = class_stream(spec, split);
    let mut n_rng = noise_stream(spec, split, "embed-noise");

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        use rand::Rng;
        let symbols: Vec<usize> = (0..k).map(|_| cls_rng.gen_range(0..vocab)).collect();
        let mut data = vec![0.0; k * dim];
        fill_normal(&mut n_rng, &mut data, 0.1);
        for (t, &s) in symbols.iter().enumerate() {
            for copy in 0..copies {
                data[t * dim + copy * vocab + s] += 1.0;
            }
        }
        // Teacher-forced targets: position t must produce the symbol one
        // step ahead, cyclically.
        let targets: Vec<usize> = (0..bb.dec_len).map(|t| symbols[(t + 1) % k]).collect();
        out.push(Sample {
            input: Tensor::new(vec![k, dim], data)?,
            label: Label::Seq(targets),
        });
    }
    Ok(out)
}

// ── the domain shift ─────────────────────────────────────────────────

/// Rotate every coordinate pair (2i, 2i+1) of each row by `angle`.
fn rotate_rows(data: &mut [f64], width: usize, angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    let rows = data.len() / width;
    for r in 0..rows {
        let row = &mut data[r * width..(r + 1) * width];
        let mut i = 0;
        while i + 1 < width {
            let (a, b) = (row[i], row[i + 1]);
            row[i] = c * a - s * b;
            row[i + 1] = s * a + c * b;
            i += 2;
        }
    }
}

fn remap_label(label: &Label, n: usize, remap: bool) -> Label {
    if !remap {
        return label.clone();
    }
    // Fixed cyclic permutation.
    match label {
        Label::Class(c) => Label::Class((c + 1) % n),
        Label::Seq(v) => Label::Seq(v.iter().map(|c| (c + 1) % n).collect()),
    }
}

fn apply_shift(spec: &TaskSpec, samples: &[Sample], split: &str) -> Result<Vec<Sample>> {
    let mut noise_rng = noise_stream(spec, split, "shift-noise");
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let shape = s.input.shape().to_vec();
        let mut data = s.input.data().to_vec();
        let width = *shape.last().expect("non-empty shape");
        match spec.kind {
            TaskKind::TokenPattern | TaskKind::Seq2SeqCopy => {
                rotate_rows(&mut data, width, spec.shift.angle)
            }
            TaskKind::ImageBlob => {
                // Rotate channel space: treat the image as HW rows of C.
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut pixel_major = vec![0.0; data.len()];
                for ch in 0..c {
                    for p in 0..h * w {
                        pixel_major[p * c + ch] = data[ch * h * w + p];
                    }
                }
                rotate_rows(&mut pixel_major, c, spec.shift.angle);
                for ch in 0..c {
                    for p in 0..h * w {
                        data[ch * h * w + p] = pixel_major[p * c + ch];
                    }
                }
            }
        }
        if spec.shift.noise > 0.0 {
            let mut eta = vec![0.0; data.len()];
            fill_normal(&mut noise_rng, &mut eta, spec.shift.noise);
            for (d, e) in data.iter_mut().zip(&eta) {
                *d += e;
            }
        }
        out.push(Sample {
            input: Tensor::new(shape, data)?,
            label: remap_label(&s.label, spec.n_classes, spec.shift.label_remap),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tok_spec(seed: u64, shift: ShiftParams) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::TokenPattern,
            n_classes: 3,
            train_size: 8,
            val_size: 4,
            test_size: 4,
            shift,
            redundancy_stress: true,
            seed,
        }
    }

    fn bb() -> BackboneSpec {
        BackboneSpec::transformer(3, 16, 4, 5, 12, BTreeSet::new(), 1)
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let s = tok_spec(5, ShiftParams::identity());
        let a = generate_task(&s, &bb()).unwrap();
        let b = generate_task(&s, &bb()).unwrap();
        for (x, y) in a.source.train.iter().zip(&b.source.train) {
            assert!(x.input.bits_eq(&y.input));
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn identity_shift_reproduces_source_exactly() {
        let s = tok_spec(6, ShiftParams::identity());
        let t = generate_task(&s, &bb()).unwrap();
        for (a, b) in t.source.train.iter().zip(&t.target.train) {
            assert!(a.input.bits_eq(&b.input));
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn rotation_changes_features_but_preserves_labels() {
        let s = tok_spec(
            7,
            ShiftParams {
                angle: std::f64::consts::FRAC_PI_2,
                label_remap: false,
                noise: 0.0,
            },
        );
        let t = generate_task(&s, &bb()).unwrap();
        let a = &t.source.train[0];
        let b = &t.target.train[0];
        assert!(!a.input.bits_eq(&b.input));
        assert_eq!(a.label, b.label);
        // Rotation preserves norms.
        let na: f64 = a.input.data().iter().map(|v| v * v).sum();
        let nb: f64 = b.input.data().iter().map(|v| v * v).sum();
        assert!((na - nb).abs() < 1e-9);
    }

    #[test]
    fn degenerate_class_count_is_rejected() {
        let mut s = tok_spec(1, ShiftParams::identity());
        s.n_classes = 1;
        assert!(generate_task(&s, &bb()).is_err());
    }

    #[test]
    fn family_mismatch_is_rejected() {
        let s = tok_spec(1, ShiftParams::identity());
        let cnn = BackboneSpec::cnn(vec![4, 8, 16], (3, 8, 8), BTreeSet::new(), 1);
        assert!(generate_task(&s, &cnn).is_err());
    }

    #[test]
    fn seq_copy_targets_are_the_shifted_symbols() {
        let s = TaskSpec {
            kind: TaskKind::Seq2SeqCopy,
            n_classes: 5,
            train_size: 4,
            val_size: 2,
            test_size: 2,
            shift: ShiftParams::identity(),
            redundancy_stress: false,
            seed: 3,
        };
        let ed = BackboneSpec::encoder_decoder(3, 16, 4, 6, 6, 8, BTreeSet::new(), 2);
        let t = generate_task(&s, &ed).unwrap();
        for sample in &t.source.train {
            // Input one-hots are recoverable: block 0 holds symbol weights.
            let Label::Seq(targets) = &sample.label else {
                panic!()
            };
            let dim = 8;
            let symbols: Vec<usize> = (0..6)
                .map(|t| {
                    (0..5)
                        .max_by(|&a, &b| {
                            sample.input.data()[t * dim + a]
                                .partial_cmp(&sample.input.data()[t * dim + b])
                                .unwrap()
                        })
                        .unwrap()
                })
                .collect();
            for (t, &tgt) in targets.iter().enumerate() {
                assert_eq!(tgt, symbols[(t + 1) % 6]);
            }
        }
    }
}
