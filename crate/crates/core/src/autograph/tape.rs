//! Wengert tape: records operations whose inputs participate in gradients,
//! replays them in reverse for backpropagation, and keeps an explicit
//! registry of which buffers had to be retained for the backward pass.
//!
//! Two properties drive the design:
//!
//! * Operations over all-frozen inputs record nothing and retain nothing.
//!   A frozen forward therefore leaves the tape empty — that is the
//!   structural fact the memory ledger measures.
//! * Every retained buffer is attributed to the origin label active when
//!   its node was recorded (`backbone-layer-3`, `mtsa`, `head`, ...), so
//!   retained bytes can be charged to the component that caused them.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::{NodeRef, Tensor, ValueId};

static TAPE_GEN: AtomicU64 = AtomicU64::new(1);

/// Spatial pooling flavors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    AdaptiveAvg,
}

/// Column-wise reduction over the rows of a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
}

/// Recorded operation kinds. Aux data a backward rule needs beyond the
/// saved buffers (strides, targets, constants) rides along here.
#[derive(Clone, Debug)]
pub enum Op {
    /// out = a · b
    Matmul,
    /// out = a · bᵀ
    MatmulNT,
    /// out = x · w + broadcast bias; inputs `[x, w, b]`
    Linear,
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    Div,
    /// out = factor · x
    Scale { factor: f64 },
    /// out = max(x, min) elementwise
    ClampMin { min: f64 },
    /// Scalar sum of all elements.
    Sum,
    /// Scalar mean of all elements.
    Mean,
    Reshape,
    /// Select one row of a 2-D tensor as a 1×c tensor.
    Row { index: usize },
    /// Stack 2-D blocks along rows; `sizes` holds each input's row count.
    ConcatRows { sizes: Vec<usize> },
    /// Column slice `[start, start+len)` of a 2-D tensor.
    ColBlock { start: usize, len: usize },
    /// Stack 2-D blocks along columns; `widths` holds each input's width.
    ConcatCols { widths: Vec<usize> },
    SoftmaxRows,
    /// Mean softmax cross-entropy over rows; `targets[r]` is row r's class.
    CrossEntropyMean { targets: Vec<usize> },
    /// Row-wise ℓ2 normalization; rows with norm < eps become zero rows.
    NormalizeL2Rows { eps: f64 },
    /// Whole-tensor ℓ1 normalization with the same zero fallback.
    NormalizeL1Vec { eps: f64 },
    /// Spatial pooling of a C×H×W map to C×th×tw.
    Pool2d { kind: PoolKind, th: usize, tw: usize },
    /// Column-wise reduction of an r×c matrix to 1×c.
    ReduceRows { kind: ReduceKind },
    /// Per-row layer normalization; inputs `[x, gamma, beta]`.
    LayerNorm { eps: f64 },
    /// 3×3-style convolution; inputs `[x, w, b]`, square kernel assumed
    /// from the weight shape.
    Conv2d { stride: usize, pad: usize },
    /// [C,H,W] map to [H·W, C] token matrix.
    ChwToTokens,
    /// [K, C] token matrix back to [C,H,W]; inverse of `ChwToTokens`.
    TokensToChw { h: usize, w: usize },
}

/// Descriptor of one buffer kept alive for backward.
#[derive(Clone, Debug)]
pub struct SavedBuf {
    pub value: ValueId,
    pub bytes: usize,
}

/// One recorded operation.
#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
    pub saved: Vec<SavedBuf>,
    pub origin: String,
}

pub(crate) struct Slot {
    pub data: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub is_leaf: bool,
}

/// Gradients keyed by tape value id; query with the watched tensor.
pub struct GradientMap {
    tape_gen: u64,
    grads: BTreeMap<ValueId, Tensor>,
}

impl GradientMap {
    /// Gradient for a tensor watched on the originating tape, if the
    /// backward pass reached it.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        let node = t.node()?;
        if node.tape_gen != self.tape_gen {
            return None;
        }
        self.grads.get(&node.value)
    }

    pub fn get_id(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ValueId> + '_ {
        self.grads.keys().copied()
    }
}

pub struct Tape {
    gen: u64,
    pub(crate) slots: Vec<Slot>,
    pub(crate) nodes: Vec<Node>,
    origin: String,
    sealed: bool,
    // Dedupe map so one tensor interned twice lands in one slot. Keyed by
    // (storage pointer, requires_grad) — a detached view of watched data
    // must NOT alias the gradient-receiving slot.
    intern_map: HashMap<(usize, bool), ValueId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            gen: TAPE_GEN.fetch_add(1, Ordering::Relaxed),
            slots: Vec::new(),
            nodes: Vec::new(),
            origin: "unassigned".to_string(),
            sealed: false,
            intern_map: HashMap::new(),
        }
    }

    /// Label charged to buffers retained by subsequently recorded nodes.
    pub fn set_origin(&mut self, label: &str) {
        self.origin = label.to_string();
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Seal the tape; no further recording. `backward` seals implicitly.
    pub fn finalize(&mut self) {
        self.sealed = true;
    }

    /// Register a tensor as a leaf on this tape and return a handle-carrying
    /// view. Parameters must be watched before the forward pass so their
    /// gradients can be fetched afterwards.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        let id = self.intern(t);
        t.clone().with_node(NodeRef {
            tape_gen: self.gen,
            value: id,
        })
    }

    pub(crate) fn intern(&mut self, t: &Tensor) -> ValueId {
        if let Some(node) = t.node() {
            if node.tape_gen == self.gen {
                return node.value;
            }
        }
        let key = (Arc::as_ptr(t.data_arc()) as usize, t.requires_grad());
        if let Some(&id) = self.intern_map.get(&key) {
            return id;
        }
        let id = self.slots.len();
        self.slots.push(Slot {
            data: Arc::clone(t.data_arc()),
            shape: t.shape().to_vec(),
            requires_grad: t.requires_grad(),
            is_leaf: true,
        });
        self.intern_map.insert(key, id);
        id
    }

    pub(crate) fn slot_rg(&self, id: ValueId) -> bool {
        self.slots[id].requires_grad
    }

    pub(crate) fn slot_data(&self, id: ValueId) -> &[f64] {
        &self.slots[id].data
    }

    pub(crate) fn slot_shape(&self, id: ValueId) -> &[usize] {
        &self.slots[id].shape
    }

    pub(crate) fn slot_ptr(&self, id: ValueId) -> usize {
        Arc::as_ptr(&self.slots[id].data) as usize
    }

    /// Record one node. `inputs` are already interned; `saved` lists the
    /// value ids whose buffers the backward rule will read.
    pub(crate) fn record(
        &mut self,
        op: Op,
        inputs: Vec<ValueId>,
        out_shape: Vec<usize>,
        out_data: Vec<f64>,
        saved_ids: Vec<ValueId>,
    ) -> Tensor {
        assert!(!self.sealed, "record on sealed tape");
        let out_id = self.slots.len();
        let out = Tensor::new(out_shape.clone(), out_data)
            .expect("op produced inconsistent output buffer")
            .with_requires_grad(true)
            .with_node(NodeRef {
                tape_gen: self.gen,
                value: out_id,
            });
        self.slots.push(Slot {
            data: Arc::clone(out.data_arc()),
            shape: out_shape,
            requires_grad: true,
            is_leaf: false,
        });
        let saved = saved_ids
            .into_iter()
            .map(|value| SavedBuf {
                bytes: self.slots[value].data.len() * std::mem::size_of::<f64>(),
                value,
            })
            .collect();
        self.nodes.push(Node {
            op,
            inputs,
            output: out_id,
            saved,
            origin: self.origin.clone(),
        });
        out
    }

    /// Total bytes marked retained, grouped by origin label.
    pub fn retained_bytes_by_origin(&self) -> BTreeMap<String, usize> {
        let mut map = BTreeMap::new();
        for node in &self.nodes {
            let bytes: usize = node.saved.iter().map(|s| s.bytes).sum();
            if bytes > 0 {
                *map.entry(node.origin.clone()).or_insert(0) += bytes;
            }
        }
        map
    }

    /// Total bytes marked retained across all origins.
    pub fn retained_bytes_total(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.saved.iter().map(|s| s.bytes).sum::<usize>())
            .sum()
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// gradient-requiring leaf the loss reaches; unreached leaves get no
    /// entry. Frozen slots never receive a gradient buffer.
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradientMap> {
        let node = loss.node().ok_or_else(|| {
            Error::Contract("backward: loss is not a value recorded on this tape".into())
        })?;
        if node.tape_gen != self.gen {
            return Err(Error::Contract(
                "backward: loss belongs to a different tape".into(),
            ));
        }
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        self.finalize();

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        grads[node.value] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let d_out = match grads[self.nodes[i].output].take() {
                Some(g) => g,
                None => continue,
            };
            let node = self.nodes[i].clone();
            self.backward_node(&node, &d_out, &mut grads)?;
        }

        let mut map = BTreeMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            let slot = &self.slots[id];
            if let Some(g) = g {
                if slot.is_leaf && slot.requires_grad {
                    map.insert(
                        id,
                        Tensor::new(slot.shape.clone(), g)
                            .expect("gradient buffer matches slot shape"),
                    );
                }
            }
        }
        Ok(GradientMap {
            tape_gen: self.gen,
            grads: map,
        })
    }

    /// Accumulate `g` into the gradient buffer of `id`, respecting the
    /// invariant that frozen slots never get one.
    pub(crate) fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: ValueId,
        g: &[f64],
    ) {
        if !self.slots[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g.iter()) {
                    *b += v;
                }
            }
            None => grads[id] = Some(g.to_vec()),
        }
    }
}
