//! Memory ledger, gradient-flow auditor, and FLOP counter: the
//! instrumentation that turns "no backpropagation through the backbone"
//! from a slogan into assertable numbers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograph::{GradientMap, Tape, Tensor};
use crate::error::{Error, Result};
use crate::mtsa::MtsaConfig;

/// Bytes of one f64, the training precision everything is stored at.
const ELEM_BYTES: usize = 8;

/// Registry of every parameter a run touches plus the detached inputs it
/// consumes, with the expected trainability of each.
#[derive(Default)]
pub struct ParamRegistry {
    params: Vec<RegEntry>,
    inputs: Vec<(String, Tensor)>,
}

struct RegEntry {
    name: String,
    trainable: bool,
    tensor: Tensor,
}

impl ParamRegistry {
    pub fn new() -> ParamRegistry {
        ParamRegistry::default()
    }

    /// Register a parameter. For trainable parameters pass the watched
    /// view so its gradient can be found.
    pub fn add_param(&mut self, name: &str, trainable: bool, tensor: &Tensor) {
        self.params.push(RegEntry {
            name: name.to_string(),
            trainable,
            tensor: tensor.clone(),
        });
    }

    /// Register a detached input (hidden states, original layer inputs).
    pub fn add_input(&mut self, name: &str, tensor: &Tensor) {
        self.inputs.push((name.to_string(), tensor.clone()));
    }

    pub fn trainable_bytes(&self) -> usize {
        self.params
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len() * ELEM_BYTES)
            .sum()
    }

    pub fn frozen_bytes(&self) -> usize {
        self.params
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| e.tensor.len() * ELEM_BYTES)
            .sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }
}

/// Retained-activation bytes per origin, plus parameter byte totals.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct MemoryLedger {
    pub retained_by_origin: BTreeMap<String, usize>,
    /// Buffers retained by recorded backbone layers.
    pub backbone_retained: usize,
    /// Buffers retained by the adapter.
    pub adapter_retained: usize,
    /// Buffers retained by the output head.
    pub head_retained: usize,
    /// Anything recorded outside the three known origins.
    pub other_retained: usize,
    pub trainable_param_bytes: usize,
    pub frozen_param_bytes: usize,
}

impl MemoryLedger {
    pub fn total_retained(&self) -> usize {
        self.backbone_retained + self.adapter_retained + self.head_retained + self.other_retained
    }
}

/// Build the ledger from a finalized tape's retained-buffer registry.
pub fn audit_memory(tape: &Tape, registry: &ParamRegistry) -> Result<MemoryLedger> {
    if !tape.is_sealed() {
        return Err(Error::Contract(
            "audit_memory: tape must be finalized first".into(),
        ));
    }
    let by_origin = tape.retained_bytes_by_origin();
    let mut backbone = 0;
    let mut adapter = 0;
    let mut head = 0;
    let mut other = 0;
    for (origin, bytes) in &by_origin {
        if origin.starts_with("backbone") {
            backbone += bytes;
        } else if origin == "mtsa" {
            adapter += bytes;
        } else if origin == "head" {
            head += bytes;
        } else {
            other += bytes;
        }
    }
    Ok(MemoryLedger {
        retained_by_origin: by_origin,
        backbone_retained: backbone,
        adapter_retained: adapter,
        head_retained: head,
        other_retained: other,
        trainable_param_bytes: registry.trainable_bytes(),
        frozen_param_bytes: registry.frozen_bytes(),
    })
}

/// Classification of every registered parameter after a backward pass.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct GradientAudit {
    pub params_with_grad: Vec<String>,
    pub params_without_grad: Vec<String>,
    /// Detached inputs that received gradients; must be empty.
    pub inputs_with_grad: Vec<String>,
}

fn storage_ptr(t: &Tensor) -> usize {
    std::sync::Arc::as_ptr(t.data_arc()) as usize
}

/// Check the gradient map against the registry. Fails, naming the
/// offender, if a frozen parameter or a detached input received a
/// gradient, or if a gradient landed on an unregistered leaf.
pub fn audit_gradients(
    tape: &Tape,
    grads: &GradientMap,
    registry: &ParamRegistry,
) -> Result<GradientAudit> {
    let mut with_grad = Vec::new();
    let mut without_grad = Vec::new();
    let mut inputs_with_grad = Vec::new();

    for entry in &registry.params {
        if grads.get(&entry.tensor).is_some() {
            if !entry.trainable {
                return Err(Error::Audit(format!(
                    "frozen parameter {} received a gradient",
                    entry.name
                )));
            }
            with_grad.push(entry.name.clone());
        } else {
            without_grad.push(entry.name.clone());
        }
    }

    // Sweep the other direction: every gradient entry must belong to a
    // registered trainable parameter.
    for id in grads.ids() {
        let ptr = tape.slot_ptr(id);
        if let Some(entry) = registry.params.iter().find(|e| storage_ptr(&e.tensor) == ptr) {
            if !entry.trainable {
                return Err(Error::Audit(format!(
                    "frozen parameter {} received a gradient",
                    entry.name
                )));
            }
        } else if let Some((name, _)) = registry
            .inputs
            .iter()
            .find(|(_, t)| storage_ptr(t) == ptr)
        {
            inputs_with_grad.push(name.clone());
        } else {
            return Err(Error::Audit(format!(
                "gradient on unregistered leaf (tape value {id})"
            )));
        }
    }
    if let Some(name) = inputs_with_grad.first() {
        return Err(Error::Audit(format!(
            "detached input {name} received a gradient"
        )));
    }

    Ok(GradientAudit {
        params_with_grad: with_grad,
        params_without_grad: without_grad,
        inputs_with_grad,
    })
}

/// Closed-form multiply count of the aggregation path (row normalization,
/// cosine Gram matrix, rate row-sum, guidance scores, redundancy division,
/// l1 normalization, weighted sum), assuming no zero-row fallbacks.
///
/// The count has the form a·K·(N-1)^2 + b·K·(N-1) with a = d + 1 and
/// b = 4d + 2 for adapter width d.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct FlopCount {
    pub aggregation_flops: u64,
    pub breakdown: BTreeMap<String, u64>,
}

pub fn count_flops(cfg: &MtsaConfig) -> FlopCount {
    let k = cfg.tokens as u64;
    let n1 = (cfg.n_sources - 1) as u64;
    let d = cfg.hidden_dim as u64;
    let mut breakdown = BTreeMap::new();
    breakdown.insert("row_normalize".to_string(), k * n1 * 2 * d);
    breakdown.insert("cosine_gram".to_string(), k * n1 * n1 * d);
    breakdown.insert("rate_row_sum".to_string(), k * n1 * n1);
    breakdown.insert("scores".to_string(), k * n1 * d);
    breakdown.insert("redundancy_divide".to_string(), k * n1);
    breakdown.insert("l1_normalize".to_string(), k * n1);
    breakdown.insert("weighted_sum".to_string(), k * n1 * d);
    let total = breakdown.values().sum();
    FlopCount {
        aggregation_flops: total,
        breakdown,
    }
}

/// The same count expressed through the coefficients of the closed form;
/// used to pin the shape a·K·(N-1)^2 + b·K·(N-1).
pub fn flop_form_coefficients(cfg: &MtsaConfig) -> (u64, u64) {
    let d = cfg.hidden_dim as u64;
    (d + 1, 4 * d + 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograph::Tape;
    use crate::mtsa::{Aggregator, Insertion};

    fn mcfg(k: usize, n: usize, d: usize) -> MtsaConfig {
        MtsaConfig::new(
            n,
            k,
            vec![d * 2; n],
            d * 2,
            2,
            Aggregator::Mtsa,
            Insertion::Standard,
        )
        .unwrap()
    }

    #[test]
    fn pure_frozen_forward_has_zero_backbone_retention() {
        let mut tape = Tape::new();
        let x = Tensor::ones(vec![3, 3]);
        let w = Tensor::ones(vec![3, 3]);
        tape.set_origin("backbone-layer-0");
        let _ = tape.matmul(&x, &w).unwrap();
        tape.finalize();
        let ledger = audit_memory(&tape, &ParamRegistry::new()).unwrap();
        assert_eq!(ledger.backbone_retained, 0);
        assert_eq!(ledger.total_retained(), 0);
    }

    #[test]
    fn ledger_buckets_are_additive() {
        let mut tape = Tape::new();
        let w = tape.watch(&Tensor::ones(vec![4, 4]).with_grad());
        let x = Tensor::ones(vec![2, 4]);
        tape.set_origin("backbone-layer-1");
        let y = tape.matmul(&x, &w).unwrap();
        tape.set_origin("mtsa");
        let z = tape.relu(&y).unwrap();
        tape.set_origin("head");
        let s = tape.mean(&z).unwrap();
        let _ = tape.backward(&s).unwrap();
        let ledger = audit_memory(&tape, &ParamRegistry::new()).unwrap();
        let sum: usize = ledger.retained_by_origin.values().sum();
        assert_eq!(sum, ledger.total_retained());
        assert!(ledger.backbone_retained > 0);
        assert!(ledger.adapter_retained > 0);
    }

    #[test]
    fn audit_memory_requires_finalized_tape() {
        let tape = Tape::new();
        assert!(audit_memory(&tape, &ParamRegistry::new()).is_err());
    }

    #[test]
    fn audit_classifies_params_and_fails_on_frozen_grad() {
        // Healthy case: trainable head gets a gradient, frozen weight
        // participates value-only.
        let mut tape = Tape::new();
        let frozen = Tensor::ones(vec![2, 2]);
        let head = tape.watch(&Tensor::ones(vec![2, 1]).with_grad());
        let y = tape.matmul(&frozen, &head).unwrap();
        let loss = tape.mean(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut reg = ParamRegistry::new();
        reg.add_param("head.w", true, &head);
        reg.add_param("backbone.w", false, &frozen);
        let audit = audit_gradients(&tape, &grads, &reg).unwrap();
        assert_eq!(audit.params_with_grad, vec!["head.w"]);
        assert_eq!(audit.params_without_grad, vec!["backbone.w"]);
        assert!(audit.inputs_with_grad.is_empty());

        // Fault injection: the same weight marked trainable on the tape but
        // registered frozen must fail the audit by name.
        let mut tape = Tape::new();
        let base = Tensor::ones(vec![2, 2]);
        let faulty = tape.watch(&base.clone().with_grad());
        let head2 = tape.watch(&Tensor::ones(vec![2, 1]).with_grad());
        let y = tape.matmul(&faulty, &head2).unwrap();
        let loss = tape.mean(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut reg = ParamRegistry::new();
        reg.add_param("head.w", true, &head2);
        reg.add_param("backbone.w", false, &base);
        let err = audit_gradients(&tape, &grads, &reg).unwrap_err();
        assert!(err.to_string().contains("backbone.w"), "{err}");
    }

    #[test]
    fn audit_catches_gradient_on_detached_input() {
        let mut tape = Tape::new();
        let source = Tensor::ones(vec![2, 2]);
        // Simulate an un-detached hidden state.
        let leaky = tape.watch(&source.clone().with_grad());
        let w = tape.watch(&Tensor::ones(vec![2, 1]).with_grad());
        let y = tape.matmul(&leaky, &w).unwrap();
        let loss = tape.mean(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut reg = ParamRegistry::new();
        reg.add_param("head.w", true, &w);
        reg.add_input("source-0", &source);
        let err = audit_gradients(&tape, &grads, &reg).unwrap_err();
        assert!(err.to_string().contains("source-0"), "{err}");
    }

    #[test]
    fn flops_double_exactly_with_token_count() {
        let a = count_flops(&mcfg(4, 3, 5));
        let b = count_flops(&mcfg(8, 3, 5));
        assert_eq!(b.aggregation_flops, 2 * a.aggregation_flops);
    }

    #[test]
    fn flops_match_closed_form_coefficients() {
        for (k, n, d) in [(2, 2, 1), (4, 3, 5), (7, 4, 3)] {
            let cfg = mcfg(k, n, d);
            let (a, b) = flop_form_coefficients(&cfg);
            let n1 = (n - 1) as u64;
            let expect = a * k as u64 * n1 * n1 + b * k as u64 * n1;
            assert_eq!(count_flops(&cfg).aggregation_flops, expect);
        }
    }

    /// The closed form must agree with an instrumented multiply counter
    /// on a random configuration (oracle lives in the verify module).
    #[test]
    fn closed_form_matches_instrumented_multiply_counter() {
        for (k, n, d) in [(5, 4, 3), (3, 2, 6), (8, 3, 1)] {
            let cfg = mcfg(k, n, d);
            let counted = crate::verify::instrumented_aggregation_flops(&cfg, 77);
            assert_eq!(counted, count_flops(&cfg).aggregation_flops);
        }
    }
}
