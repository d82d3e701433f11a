//! Tape operations: forward kernels, recording decisions, and the reverse
//! rules. An op records a node only when some input requires gradients,
//! and marks retained exactly the buffers its backward rule reads.

use crate::error::{Error, Result};

use super::tape::{Op, PoolKind, ReduceKind, Tape};
use super::tensor::{Tensor, ValueId};

// ── dense kernels ────────────────────────────────────────────────────

/// A (m×k) · B (k×n)
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// A (m×k) · Bᵀ where B is n×k
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Aᵀ · B where A is m×p and B is m×q
fn mm_tn(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for r in 0..m {
        let arow = &a[r * p..(r + 1) * p];
        let brow = &b[r * q..(r + 1) * q];
        for i in 0..p {
            let ari = arow[i];
            if ari == 0.0 {
                continue;
            }
            let orow = &mut out[i * q..(i + 1) * q];
            for j in 0..q {
                orow[j] += ari * brow[j];
            }
        }
    }
    out
}

fn softmax_rows_kernel(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in out[r * cols..(r + 1) * cols].iter_mut() {
            *o /= s;
        }
    }
    out
}

/// Adaptive bin edges: bin i covers [i*n/t, ceil((i+1)*n/t)).
fn bins(n: usize, t: usize) -> Vec<(usize, usize)> {
    (0..t).map(|i| (i * n / t, ((i + 1) * n + t - 1) / t)).collect()
}

// ── broadcast handling for binary elementwise ops ────────────────────

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Equal,
    ScalarLhs,
    ScalarRhs,
}

fn bcast(a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Bcast::Equal, a.shape().to_vec()))
    } else if a.is_scalar() {
        Ok((Bcast::ScalarLhs, b.shape().to_vec()))
    } else if b.is_scalar() {
        Ok((Bcast::ScalarRhs, a.shape().to_vec()))
    } else {
        Err(Error::Dim(format!(
            "incompatible shapes {:?} vs {:?} (only equal-shape or scalar broadcasting)",
            a.shape(),
            b.shape()
        )))
    }
}

fn bin_forward(a: &[f64], b: &[f64], bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match bc {
        Bcast::Equal => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
        Bcast::ScalarLhs => b.iter().map(|y| f(a[0], *y)).collect(),
        Bcast::ScalarRhs => a.iter().map(|x| f(*x, b[0])).collect(),
    }
}

/// Reduce a full-shape gradient onto an operand that may have been a
/// broadcast scalar.
fn reduce_to(shape_len: usize, g: impl Iterator<Item = f64>) -> Vec<f64> {
    if shape_len == 1 {
        vec![g.sum()]
    } else {
        g.collect()
    }
}

// ── op surface ───────────────────────────────────────────────────────

impl Tape {
    fn maybe_record(
        &mut self,
        op: Op,
        ins: &[&Tensor],
        out_shape: Vec<usize>,
        out_data: Vec<f64>,
        save: impl Fn(&[bool]) -> Vec<usize>,
    ) -> Result<Tensor> {
        if !ins.iter().any(|t| t.requires_grad()) {
            return Tensor::new(out_shape, out_data);
        }
        let ids: Vec<ValueId> = ins.iter().map(|t| self.intern(t)).collect();
        let rg: Vec<bool> = ins.iter().map(|t| t.requires_grad()).collect();
        let saved_ids: Vec<ValueId> = save(&rg).into_iter().map(|i| ids[i]).collect();
        Ok(self.record(op, ids, out_shape, out_data, saved_ids))
    }

    /// Standard matrix product.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dim2()?;
        let (k2, n) = b.dim2()?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul: inner dims disagree ({m}x{k} vs {k2}x{n})"
            )));
        }
        let out = mm(a.data(), b.data(), m, k, n);
        self.maybe_record(Op::Matmul, &[a, b], vec![m, n], out, |rg| {
            let mut s = Vec::new();
            if rg[1] {
                s.push(0); // a is read for d_b
            }
            if rg[0] {
                s.push(1); // b is read for d_a
            }
            s
        })
    }

    /// a · bᵀ — the "dot every row pair" product used for cosine and
    /// attention scores.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dim2()?;
        let (n, k2) = b.dim2()?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul_nt: inner dims disagree ({m}x{k} vs {n}x{k2})"
            )));
        }
        let out = mm_nt(a.data(), b.data(), m, k, n);
        self.maybe_record(Op::MatmulNT, &[a, b], vec![m, n], out, |rg| {
            let mut s = Vec::new();
            if rg[1] {
                s.push(0);
            }
            if rg[0] {
                s.push(1);
            }
            s
        })
    }

    /// Fully-connected layer: x·w + bias broadcast over rows.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = x.dim2()?;
        let (k2, n) = w.dim2()?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "linear: input width {k} does not match weight rows {k2}"
            )));
        }
        if b.len() != n {
            return Err(Error::Dim(format!(
                "linear: bias length {} does not match output width {n}",
                b.len()
            )));
        }
        let mut out = mm(x.data(), w.data(), m, k, n);
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.maybe_record(Op::Linear, &[x, w, b], vec![m, n], out, |rg| {
            let mut s = Vec::new();
            if rg[0] {
                s.push(1); // w read for d_x
            }
            if rg[1] {
                s.push(0); // x read for d_w
            }
            s
        })
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = x.data().iter().map(|v| v.max(0.0)).collect();
        self.maybe_record(Op::Relu, &[x], x.shape().to_vec(), out, |_| vec![0])
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        // Backward reads the output, which the tape holds anyway; nothing
        // extra is retained beyond it.
        self.maybe_record(Op::Sigmoid, &[x], x.shape().to_vec(), out, |_| vec![])
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = x.data().iter().map(|v| v.tanh()).collect();
        self.maybe_record(Op::Tanh, &[x], x.shape().to_vec(), out, |_| vec![])
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (bc, shape) = bcast(a, b)?;
        let out = bin_forward(a.data(), b.data(), bc, |x, y| x + y);
        self.maybe_record(Op::Add, &[a, b], shape, out, |_| vec![])
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (bc, shape) = bcast(a, b)?;
        let out = bin_forward(a.data(), b.data(), bc, |x, y| x - y);
        self.maybe_record(Op::Sub, &[a, b], shape, out, |_| vec![])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (bc, shape) = bcast(a, b)?;
        let out = bin_forward(a.data(), b.data(), bc, |x, y| x * y);
        self.maybe_record(Op::Mul, &[a, b], shape, out, |rg| {
            let mut s = Vec::new();
            if rg[0] {
                s.push(1);
            }
            if rg[1] {
                s.push(0);
            }
            s
        })
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (bc, shape) = bcast(a, b)?;
        let out = bin_forward(a.data(), b.data(), bc, |x, y| x / y);
        self.maybe_record(Op::Div, &[a, b], shape, out, |rg| {
            let mut s = Vec::new();
            if rg[0] || rg[1] {
                s.push(1); // b read for both partials
            }
            if rg[1] {
                s.push(0); // a read for d_b
            }
            s
        })
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let out = x.data().iter().map(|v| v * factor).collect();
        self.maybe_record(
            Op::Scale { factor },
            &[x],
            x.shape().to_vec(),
            out,
            |_| vec![],
        )
    }

    /// Elementwise max(x, min); guards divisions against exact zeros.
    pub fn clamp_min(&mut self, x: &Tensor, min: f64) -> Result<Tensor> {
        let out = x.data().iter().map(|v| v.max(min)).collect();
        self.maybe_record(
            Op::ClampMin { min },
            &[x],
            x.shape().to_vec(),
            out,
            |_| vec![0],
        )
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        self.maybe_record(Op::Sum, &[x], vec![1], vec![s], |_| vec![])
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        self.maybe_record(Op::Mean, &[x], vec![1], vec![s], |_| vec![])
    }

    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::Dim(format!(
                "reshape: {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        let out = x.data().to_vec();
        self.maybe_record(Op::Reshape, &[x], shape, out, |_| vec![])
    }

    /// Row `index` of a 2-D tensor, as a 1×c tensor.
    pub fn row(&mut self, x: &Tensor, index: usize) -> Result<Tensor> {
        let (r, c) = x.dim2()?;
        if index >= r {
            return Err(Error::Dim(format!("row {index} out of range for {r} rows")));
        }
        let out = x.data()[index * c..(index + 1) * c].to_vec();
        self.maybe_record(Op::Row { index }, &[x], vec![1, c], out, |_| vec![])
    }

    /// Stack 2-D blocks vertically.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows: no inputs".into()));
        }
        let c = parts[0].dim2()?.1;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.dim2()?;
            if pc != c {
                return Err(Error::Dim(format!(
                    "concat_rows: column mismatch {pc} vs {c}"
                )));
            }
            sizes.push(r);
            data.extend_from_slice(p.data());
        }
        let rows: usize = sizes.iter().sum();
        self.maybe_record(
            Op::ConcatRows { sizes },
            parts,
            vec![rows, c],
            data,
            |_| vec![],
        )
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn col_block(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = x.dim2()?;
        if start + len > c {
            return Err(Error::Dim(format!(
                "col_block: [{start}, {}) exceeds {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
        }
        self.maybe_record(Op::ColBlock { start, len }, &[x], vec![r, len], out, |_| vec![])
    }

    /// Stack 2-D blocks horizontally.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols: no inputs".into()));
        }
        let r = parts[0].dim2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dim2()?;
            if pr != r {
                return Err(Error::Dim(format!("concat_cols: row mismatch {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.maybe_record(
            Op::ConcatCols { widths },
            parts,
            vec![r, total],
            data,
            |_| vec![],
        )
    }

    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dim2()?;
        let out = softmax_rows_kernel(x.data(), r, c);
        self.maybe_record(Op::SoftmaxRows, &[x], vec![r, c], out, |_| vec![])
    }

    /// Mean softmax cross-entropy over rows of a logits matrix.
    pub fn cross_entropy_mean(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (r, c) = logits.dim2()?;
        if targets.len() != r {
            return Err(Error::Contract(format!(
                "cross_entropy: {r} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!(
                "cross_entropy: target {t} out of range for {c} classes"
            )));
        }
        let x = logits.data();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            loss += lse - row[t];
        }
        loss /= r as f64;
        self.maybe_record(
            Op::CrossEntropyMean {
                targets: targets.to_vec(),
            },
            &[logits],
            vec![1],
            vec![loss],
            |_| vec![0],
        )
    }

    /// Row-wise ℓ2 normalization; rows with norm below eps come back as
    /// all-zero rows rather than raising.
    pub fn normalize_l2_rows(&mut self, x: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = x.dim2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n >= eps {
                for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = v / n;
                }
            }
        }
        self.maybe_record(
            Op::NormalizeL2Rows { eps },
            &[x],
            vec![r, c],
            out,
            |_| vec![0],
        )
    }

    /// Whole-tensor ℓ1 normalization with the zero fallback.
    pub fn normalize_l1_vec(&mut self, x: &Tensor, eps: f64) -> Result<Tensor> {
        let s: f64 = x.data().iter().map(|v| v.abs()).sum();
        let out = if s >= eps {
            x.data().iter().map(|v| v / s).collect()
        } else {
            vec![0.0; x.len()]
        };
        self.maybe_record(
            Op::NormalizeL1Vec { eps },
            &[x],
            x.shape().to_vec(),
            out,
            |_| vec![0],
        )
    }

    /// Pool a C×H×W map down to C×th×tw. Targets larger than the input are
    /// rejected (pooling never upsamples).
    pub fn pool2d(&mut self, kind: PoolKind, x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
        let (c, h, w) = x.dim3()?;
        if th > h || tw > w {
            return Err(Error::Dim(format!(
                "pool2d: target {th}x{tw} exceeds input {h}x{w}"
            )));
        }
        let rbins = bins(h, th);
        let cbins = bins(w, tw);
        let mut out = vec![0.0; c * th * tw];
        for ch in 0..c {
            let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
            for (bi, &(r0, r1)) in rbins.iter().enumerate() {
                for (bj, &(c0, c1)) in cbins.iter().enumerate() {
                    let v = match kind {
                        PoolKind::Max => {
                            let mut m = f64::NEG_INFINITY;
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    m = m.max(plane[r * w + cc]);
                                }
                            }
                            m
                        }
                        PoolKind::Avg | PoolKind::AdaptiveAvg => {
                            let mut s = 0.0;
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    s += plane[r * w + cc];
                                }
                            }
                            s / ((r1 - r0) * (c1 - c0)) as f64
                        }
                    };
                    out[ch * th * tw + bi * tw + bj] = v;
                }
            }
        }
        self.maybe_record(
            Op::Pool2d { kind, th, tw },
            &[x],
            vec![c, th, tw],
            out,
            move |_| if kind == PoolKind::Max { vec![0] } else { vec![] },
        )
    }

    /// Collapse the rows of an r×c matrix into a single 1×c row.
    pub fn reduce_rows(&mut self, kind: ReduceKind, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dim2()?;
        let mut out = vec![0.0; c];
        for j in 0..c {
            out[j] = match kind {
                ReduceKind::Max => (0..r)
                    .map(|i| x.data()[i * c + j])
                    .fold(f64::NEG_INFINITY, f64::max),
                ReduceKind::Mean => {
                    (0..r).map(|i| x.data()[i * c + j]).sum::<f64>() / r as f64
                }
            };
        }
        self.maybe_record(Op::ReduceRows { kind }, &[x], vec![1, c], out, move |_| {
            if kind == ReduceKind::Max {
                vec![0]
            } else {
                vec![]
            }
        })
    }

    /// Per-row layer normalization with learnable gain and shift.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let (r, c) = x.dim2()?;
        if gamma.len() != c || beta.len() != c {
            return Err(Error::Dim(format!(
                "layer_norm: gain/shift length {}/{} vs width {c}",
                gamma.len(),
                beta.len()
            )));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let sig = (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = gamma.data()[j] * (row[j] - mu) / sig + beta.data()[j];
            }
        }
        self.maybe_record(Op::LayerNorm { eps }, &[x, gamma, beta], vec![r, c], out, |rg| {
            let mut s = Vec::new();
            if rg[0] || rg[1] {
                s.push(0); // x is read to rebuild x̂
            }
            if rg[0] {
                s.push(1); // gamma read for d_x
            }
            s
        })
    }

    /// Direct 2-D convolution over a C×H×W map with square kernels.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (cin, h, wd) = x.dim3()?;
        let ws = w.shape();
        if ws.len() != 4 {
            return Err(Error::Dim(format!("conv2d: weight must be 4-D, got {ws:?}")));
        }
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::Dim(format!(
                "conv2d: input channels {cin} vs weight channels {wcin}"
            )));
        }
        if b.len() != cout {
            return Err(Error::Dim("conv2d: bias length mismatch".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Dim("conv2d: kernel exceeds padded input".into()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for i in 0..cin {
                        for u in 0..kh {
                            let iy = (oy * stride + u) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let ix = (ox * stride + v) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[i * h * wd + iy as usize * wd + ix as usize]
                                    * w.data()[((o * cin + i) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[o * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        self.maybe_record(
            Op::Conv2d { stride, pad },
            &[x, w, b],
            vec![cout, ho, wo],
            out,
            |rg| {
                let mut s = Vec::new();
                if rg[0] {
                    s.push(1); // w read for d_x
                }
                if rg[1] {
                    s.push(0); // x read for d_w
                }
                s
            },
        )
    }

    /// Flatten a C×H×W map to an (H·W)×C token matrix.
    pub fn chw_to_tokens(&mut self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dim3()?;
        let k = h * w;
        let mut out = vec![0.0; k * c];
        for ch in 0..c {
            for t in 0..k {
                out[t * c + ch] = x.data()[ch * k + t];
            }
        }
        self.maybe_record(Op::ChwToTokens, &[x], vec![k, c], out, |_| vec![])
    }

    /// Inverse of [`Tape::chw_to_tokens`].
    pub fn tokens_to_chw(&mut self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (k, c) = x.dim2()?;
        if k != h * w {
            return Err(Error::Dim(format!(
                "tokens_to_chw: {k} tokens cannot tile {h}x{w}"
            )));
        }
        let mut out = vec![0.0; c * k];
        for ch in 0..c {
            for t in 0..k {
                out[ch * k + t] = x.data()[t * c + ch];
            }
        }
        self.maybe_record(Op::TokensToChw { h, w }, &[x], vec![c, h, w], out, |_| vec![])
    }
}

impl Tape {
    /// Distance from the nearest non-differentiable point across all
    /// recorded nodes (ReLU/clamp kinks, max ties, normalization and
    /// division denominators). Finite-difference probes are only valid
    /// when this margin comfortably exceeds the probe step.
    pub fn min_smoothness_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let m = match &node.op {
                Op::Relu => self
                    .slot_data(node.inputs[0])
                    .iter()
                    .map(|v| v.abs())
                    .fold(f64::INFINITY, f64::min),
                Op::ClampMin { min } => self
                    .slot_data(node.inputs[0])
                    .iter()
                    .map(|v| (v - min).abs())
                    .fold(f64::INFINITY, f64::min),
                Op::Div => self
                    .slot_data(node.inputs[1])
                    .iter()
                    .map(|v| v.abs())
                    .fold(f64::INFINITY, f64::min),
                Op::NormalizeL1Vec { eps } => {
                    let s: f64 = self.slot_data(node.inputs[0]).iter().map(|v| v.abs()).sum();
                    (s - eps).abs()
                }
                Op::NormalizeL2Rows { eps } => {
                    let shape = self.slot_shape(node.inputs[0]);
                    let (r, c) = (shape[0], shape[1]);
                    let x = self.slot_data(node.inputs[0]);
                    (0..r)
                        .map(|i| {
                            let n: f64 = x[i * c..(i + 1) * c].iter().map(|v| v * v).sum();
                            (n.sqrt() - eps).abs()
                        })
                        .fold(f64::INFINITY, f64::min)
                }
                Op::ReduceRows {
                    kind: ReduceKind::Max,
                } => {
                    let shape = self.slot_shape(node.inputs[0]);
                    let (r, c) = (shape[0], shape[1]);
                    let x = self.slot_data(node.inputs[0]);
                    let mut m = f64::INFINITY;
                    for j in 0..c {
                        let mut col: Vec<f64> = (0..r).map(|i| x[i * c + j]).collect();
                        col.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                        if col.len() > 1 {
                            m = m.min(col[0] - col[1]);
                        }
                    }
                    m
                }
                Op::Pool2d {
                    kind: PoolKind::Max,
                    ..
                } => {
                    // Conservative: smallest gap between the two largest
                    // values in any bin is bounded below by the smallest
                    // pairwise gap in the whole plane; use global top-2.
                    let x = self.slot_data(node.inputs[0]);
                    let mut vals: Vec<f64> = x.to_vec();
                    vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                    vals.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min)
                }
                _ => f64::INFINITY,
            };
            margin = margin.min(m);
        }
        margin
    }
}

// ── backward rules ───────────────────────────────────────────────────

impl Tape {
    pub(crate) fn backward_node(
        &mut self,
        node: &super::tape::Node,
        d_out: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let ins = &node.inputs;
        let shape_of = |tape: &Tape, id: ValueId| tape.slot_shape(id).to_vec();
        match &node.op {
            Op::Matmul => {
                let (m, k) = two(&shape_of(self, ins[0]));
                let n = shape_of(self, ins[1])[1];
                if self.slot_rg(ins[0]) {
                    let d_a = mm_nt(d_out, self.slot_data(ins[1]), m, n, k);
                    self.accumulate(grads, ins[0], &d_a);
                }
                if self.slot_rg(ins[1]) {
                    let d_b = mm_tn(self.slot_data(ins[0]), d_out, m, k, n);
                    self.accumulate(grads, ins[1], &d_b);
                }
            }
            Op::MatmulNT => {
                let (m, k) = two(&shape_of(self, ins[0]));
                let n = shape_of(self, ins[1])[0];
                if self.slot_rg(ins[0]) {
                    let d_a = mm(d_out, self.slot_data(ins[1]), m, n, k);
                    self.accumulate(grads, ins[0], &d_a);
                }
                if self.slot_rg(ins[1]) {
                    let d_b = mm_tn(d_out, self.slot_data(ins[0]), m, n, k);
                    self.accumulate(grads, ins[1], &d_b);
                }
            }
            Op::Linear => {
                let (m, k) = two(&shape_of(self, ins[0]));
                let n = shape_of(self, ins[1])[1];
                if self.slot_rg(ins[0]) {
                    let d_x = mm_nt(d_out, self.slot_data(ins[1]), m, n, k);
                    self.accumulate(grads, ins[0], &d_x);
                }
                if self.slot_rg(ins[1]) {
                    let d_w = mm_tn(self.slot_data(ins[0]), d_out, m, k, n);
                    self.accumulate(grads, ins[1], &d_w);
                }
                if self.slot_rg(ins[2]) {
                    let mut d_b = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            d_b[j] += d_out[r * n + j];
                        }
                    }
                    self.accumulate(grads, ins[2], &d_b);
                }
            }
            Op::Relu => {
                let x = self.slot_data(ins[0]);
                let g: Vec<f64> = x
                    .iter()
                    .zip(d_out)
                    .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, ins[0], &g);
            }
            Op::Sigmoid => {
                let y = self.slot_data(node.output);
                let g: Vec<f64> = y.iter().zip(d_out).map(|(y, d)| d * y * (1.0 - y)).collect();
                self.accumulate(grads, ins[0], &g);
            }
            Op::Tanh => {
                let y = self.slot_data(node.output);
                let g: Vec<f64> = y.iter().zip(d_out).map(|(y, d)| d * (1.0 - y * y)).collect();
                self.accumulate(grads, ins[0], &g);
            }
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                if self.slot_rg(ins[0]) {
                    let g = reduce_to(self.slot_data(ins[0]).len(), d_out.iter().copied());
                    self.accumulate(grads, ins[0], &g);
                }
                if self.slot_rg(ins[1]) {
                    let g = reduce_to(
                        self.slot_data(ins[1]).len(),
                        d_out.iter().map(|d| sign * d),
                    );
                    self.accumulate(grads, ins[1], &g);
                }
            }
            Op::Mul => {
                let a = self.slot_data(ins[0]);
                let b = self.slot_data(ins[1]);
                if self.slot_rg(ins[0]) {
                    let g = reduce_to(
                        a.len(),
                        d_out
                            .iter()
                            .enumerate()
                            .map(|(i, d)| d * b[if b.len() == 1 { 0 } else { i }]),
                    );
                    self.accumulate(grads, ins[0], &g);
                }
                if self.slot_rg(ins[1]) {
                    let g = reduce_to(
                        b.len(),
                        d_out
                            .iter()
                            .enumerate()
                            .map(|(i, d)| d * a[if a.len() == 1 { 0 } else { i }]),
                    );
                    self.accumulate(grads, ins[1], &g);
                }
            }
            Op::Div => {
                let a = self.slot_data(ins[0]);
                let b = self.slot_data(ins[1]);
                if self.slot_rg(ins[0]) {
                    let g = reduce_to(
                        a.len(),
                        d_out
                            .iter()
                            .enumerate()
                            .map(|(i, d)| d / b[if b.len() == 1 { 0 } else { i }]),
                    );
                    self.accumulate(grads, ins[0], &g);
                }
                if self.slot_rg(ins[1]) {
                    let g = reduce_to(
                        b.len(),
                        d_out.iter().enumerate().map(|(i, d)| {
                            let av = a[if a.len() == 1 { 0 } else { i }];
                            let bv = b[if b.len() == 1 { 0 } else { i }];
                            -d * av / (bv * bv)
                        }),
                    );
                    self.accumulate(grads, ins[1], &g);
                }
            }
            Op::Scale { factor } => {
                let g: Vec<f64> = d_out.iter().map(|d| d * factor).collect();
                self.accumulate(grads, ins[0], &g);
            }
            Op::ClampMin { min } => {
                let x = self.slot_data(ins[0]);
                let g: Vec<f64> = x
                    .iter()
                    .zip(d_out)
                    .map(|(v, d)| if *v > *min { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, ins[0], &g);
            }
            Op::Sum => {
                let n = self.slot_data(ins[0]).len();
                self.accumulate(grads, ins[0], &vec![d_out[0]; n]);
            }
            Op::Mean => {
                let n = self.slot_data(ins[0]).len();
                self.accumulate(grads, ins[0], &vec![d_out[0] / n as f64; n]);
            }
            Op::Reshape => {
                self.accumulate(grads, ins[0], d_out);
            }
            Op::Row { index } => {
                let (_, c) = two(&shape_of(self, ins[0]));
                let mut g = vec![0.0; self.slot_data(ins[0]).len()];
                g[index * c..(index + 1) * c].copy_from_slice(d_out);
                self.accumulate(grads, ins[0], &g);
            }
            Op::ConcatRows { sizes } => {
                let c = shape_of(self, node.output)[1];
                let mut off = 0;
                for (idx, &r) in sizes.iter().enumerate() {
                    if self.slot_rg(ins[idx]) {
                        self.accumulate(grads, ins[idx], &d_out[off..off + r * c]);
                    }
                    off += r * c;
                }
            }
            Op::ColBlock { start, len } => {
                let (r, c) = two(&shape_of(self, ins[0]));
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + len]
                        .copy_from_slice(&d_out[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, ins[0], &g);
            }
            Op::ConcatCols { widths } => {
                let r = shape_of(self, node.output)[0];
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (idx, &w) in widths.iter().enumerate() {
                    if self.slot_rg(ins[idx]) {
                        let mut g = vec![0.0; r * w];
                        for i in 0..r {
                            g[i * w..(i + 1) * w]
                                .copy_from_slice(&d_out[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(grads, ins[idx], &g);
                    }
                    off += w;
                }
            }
            Op::SoftmaxRows => {
                let (r, c) = two(&shape_of(self, node.output));
                let y = self.slot_data(node.output);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dr = &d_out[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[i * c + j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.accumulate(grads, ins[0], &g);
            }
            Op::CrossEntropyMean { targets } => {
                let (r, c) = two(&shape_of(self, ins[0]));
                let p = softmax_rows_kernel(self.slot_data(ins[0]), r, c);
                let scale = d_out[0] / r as f64;
                let mut g = p;
                for (i, &t) in targets.iter().enumerate() {
                    g[i * c + t] -= 1.0;
                }
                for v in g.iter_mut() {
                    *v *= scale;
                }
                self.accumulate(grads, ins[0], &g);
            }
            Op::NormalizeL2Rows { eps } => {
                let (r, c) = two(&shape_of(self, ins[0]));
                let x = self.slot_data(ins[0]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n < *eps {
                        continue;
                    }
                    let dr = &d_out[i * c..(i + 1) * c];
                    let dot: f64 = row.iter().zip(dr).map(|(v, d)| v / n * d).sum();
                    for j in 0..c {
                        g[i * c + j] = (dr[j] - row[j] / n * dot) / n;
                    }
                }
                self.accumulate(grads, ins[0], &g);
            }
            Op::NormalizeL1Vec { eps } => {
                let x = self.slot_data(ins[0]);
                let s: f64 = x.iter().map(|v| v.abs()).sum();
                if s < *eps {
                    return Ok(());
                }
                let dot: f64 = x.iter().zip(d_out).map(|(v, d)| v / s * d).sum();
                let g: Vec<f64> = x
                    .iter()
                    .zip(d_out)
                    .map(|(v, d)| (d - v.signum() * dot) / s)
                    .collect();
                self.accumulate(grads, ins[0], &g);
            }
            Op::Pool2d { kind, th, tw } => {
                let (c, h, w) = three(&shape_of(self, ins[0]));
                let rbins = bins(h, *th);
                let cbins = bins(w, *tw);
                let mut g = vec![0.0; c * h * w];
                match kind {
                    PoolKind::Max => {
                        let x = self.slot_data(ins[0]);
                        for ch in 0..c {
                            let plane = &x[ch * h * w..(ch + 1) * h * w];
                            for (bi, &(r0, r1)) in rbins.iter().enumerate() {
                                for (bj, &(c0, c1)) in cbins.iter().enumerate() {
                                    let mut best = (r0, c0);
                                    let mut m = f64::NEG_INFINITY;
                                    for r in r0..r1 {
                                        for cc in c0..c1 {
                                            if plane[r * w + cc] > m {
                                                m = plane[r * w + cc];
                                                best = (r, cc);
                                            }
                                        }
                                    }
                                    g[ch * h * w + best.0 * w + best.1] +=
                                        d_out[ch * th * tw + bi * tw + bj];
                                }
                            }
                        }
                    }
                    PoolKind::Avg | PoolKind::AdaptiveAvg => {
                        for ch in 0..c {
                            for (bi, &(r0, r1)) in rbins.iter().enumerate() {
                                for (bj, &(c0, c1)) in cbins.iter().enumerate() {
                                    let share = d_out[ch * th * tw + bi * tw + bj]
                                        / ((r1 - r0) * (c1 - c0)) as f64;
                                    for r in r0..r1 {
                                        for cc in c0..c1 {
                                            g[ch * h * w + r * w + cc] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, ins[0], &g);
            }
            Op::ReduceRows { kind } => {
                let (r, c) = two(&shape_of(self, ins[0]));
                let mut g = vec![0.0; r * c];
                match kind {
                    ReduceKind::Max => {
                        let x = self.slot_data(ins[0]);
                        for j in 0..c {
                            let mut best = 0;
                            let mut m = f64::NEG_INFINITY;
                            for i in 0..r {
                                if x[i * c + j] > m {
                                    m = x[i * c + j];
                                    best = i;
                                }
                            }
                            g[best * c + j] = d_out[j];
                        }
                    }
                    ReduceKind::Mean => {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] = d_out[j] / r as f64;
                            }
                        }
                    }
                }
                self.accumulate(grads, ins[0], &g);
            }
            Op::LayerNorm { eps } => {
                let (r, c) = two(&shape_of(self, ins[0]));
                let x = self.slot_data(ins[0]).to_vec();
                let gamma = self.slot_data(ins[1]).to_vec();
                let mut d_x = vec![0.0; r * c];
                let mut d_g = vec![0.0; c];
                let mut d_b = vec![0.0; c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let dr = &d_out[i * c..(i + 1) * c];
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let sig = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) / sig).collect();
                    let gv: Vec<f64> = dr.iter().zip(&gamma).map(|(d, g)| d * g).collect();
                    let m1 = gv.iter().sum::<f64>() / c as f64;
                    let m2 = gv.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d_x[i * c + j] = (gv[j] - m1 - xhat[j] * m2) / sig;
                        d_g[j] += dr[j] * xhat[j];
                        d_b[j] += dr[j];
                    }
                }
                if self.slot_rg(ins[0]) {
                    self.accumulate(grads, ins[0], &d_x);
                }
                if self.slot_rg(ins[1]) {
                    self.accumulate(grads, ins[1], &d_g);
                }
                if self.slot_rg(ins[2]) {
                    self.accumulate(grads, ins[2], &d_b);
                }
            }
            Op::Conv2d { stride, pad } => {
                let xs = shape_of(self, ins[0]);
                let ws = shape_of(self, ins[1]);
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (wd + 2 * pad - kw) / stride + 1;
                let x = self.slot_data(ins[0]).to_vec();
                let w = self.slot_data(ins[1]).to_vec();
                let mut d_x = vec![0.0; cin * h * wd];
                let mut d_w = vec![0.0; w.len()];
                let mut d_b = vec![0.0; cout];
                for o in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let d = d_out[o * ho * wo + oy * wo + ox];
                            if d == 0.0 {
                                continue;
                            }
                            d_b[o] += d;
                            for i in 0..cin {
                                for u in 0..kh {
                                    let iy = (oy * stride + u) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let ix = (ox * stride + v) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = i * h * wd + iy as usize * wd + ix as usize;
                                        let wi = ((o * cin + i) * kh + u) * kw + v;
                                        d_x[xi] += d * w[wi];
                                        d_w[wi] += d * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                if self.slot_rg(ins[0]) {
                    self.accumulate(grads, ins[0], &d_x);
                }
                if self.slot_rg(ins[1]) {
                    self.accumulate(grads, ins[1], &d_w);
                }
                if self.slot_rg(ins[2]) {
                    self.accumulate(grads, ins[2], &d_b);
                }
            }
            Op::ChwToTokens => {
                let s = shape_of(self, ins[0]);
                let (c, k) = (s[0], s[1] * s[2]);
                let mut g = vec![0.0; c * k];
                for ch in 0..c {
                    for t in 0..k {
                        g[ch * k + t] = d_out[t * c + ch];
                    }
                }
                self.accumulate(grads, ins[0], &g);
            }
            Op::TokensToChw { h, w } => {
                let c = shape_of(self, node.output)[0];
                let k = h * w;
                let mut g = vec![0.0; k * c];
                for ch in 0..c {
                    for t in 0..k {
                        g[t * c + ch] = d_out[ch * k + t];
                    }
                }
                self.accumulate(grads, ins[0], &g);
            }
        }
        Ok(())
    }
}

fn two(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn three(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}
