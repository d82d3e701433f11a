use std::collections::BTreeSet;

use super::*;
use crate::mtsa::{mtsa_forward, Aggregator, Insertion, MtsaConfig, MtsaParams};
use crate::rng::{fill_uniform, rng};

fn drop(entries: &[usize]) -> BTreeSet<usize> {
    entries.iter().copied().collect()
}

fn rand_input(seed: u64, shape: Vec<usize>) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let mut buf = vec![0.0; n];
    fill_uniform(&mut r, &mut buf, 1.0);
    Tensor::new(shape, buf).unwrap()
}

fn tf_spec(n_layers: usize, drop_mask: BTreeSet<usize>) -> BackboneSpec {
    BackboneSpec::transformer(n_layers, 16, 4, 6, 10, drop_mask, 7)
}

fn mtsa_for_trace(trace: &BackboneTrace, model_dim: usize, agg: Aggregator) -> (MtsaConfig, MtsaParams) {
    let dims: Vec<usize> = trace.sources.iter().map(|s| s.cols().unwrap()).collect();
    let cfg = MtsaConfig::new(
        trace.sources.len(),
        trace.sources[0].rows().unwrap(),
        dims,
        model_dim,
        2,
        agg,
        Insertion::Standard,
    )
    .unwrap();
    let params = MtsaParams::init(&cfg, 99);
    (cfg, params)
}

#[test]
fn build_is_deterministic_per_seed() {
    let spec = tf_spec(4, drop(&[]));
    let a = Backbone::build(&spec).unwrap();
    let b = Backbone::build(&spec).unwrap();
    let pa = a.param_tensors();
    let pb = b.param_tensors();
    assert_eq!(pa.len(), pb.len());
    for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
        assert_eq!(na, nb);
        assert!(ta.bits_eq(tb), "{na} differs across builds");
    }
}

#[test]
fn twelve_layer_drop_mask_yields_ten_sources() {
    let spec = tf_spec(12, drop(&[0, 4, 8]));
    assert_eq!(spec.effective_sources(), 10);
    let bb = Backbone::build(&spec).unwrap();
    let trace = bb.trace(&rand_input(1, vec![6, 10])).unwrap();
    assert_eq!(trace.sources.len(), 10);
    // Dropped positions 4 and 8 are layer outputs 3 and 7; position 0
    // names the embedding, which is always kept.
    assert!(trace.source_names.contains(&"embedding".to_string()));
    assert!(!trace.source_names.contains(&"layer-3".to_string()));
    assert!(!trace.source_names.contains(&"layer-7".to_string()));
}

#[test]
fn drop_mask_rejects_regulation_and_guidance_positions() {
    assert!(Backbone::build(&tf_spec(4, drop(&[3]))).is_err()); // guidance
    assert!(Backbone::build(&tf_spec(4, drop(&[4]))).is_err()); // last layer
    // Dropping every droppable layer still leaves embedding + guidance.
    let bb = Backbone::build(&tf_spec(4, drop(&[1, 2]))).unwrap();
    assert_eq!(bb.spec.effective_sources(), 2);
}

#[test]
fn cnn_source_dims_double_per_stage() {
    let spec = BackboneSpec::cnn(vec![8, 16, 32, 64], (3, 16, 16), drop(&[]), 5);
    let bb = Backbone::build(&spec).unwrap();
    let trace = bb.trace(&rand_input(2, vec![3, 16, 16])).unwrap();
    let dims: Vec<usize> = trace.sources.iter().map(|s| s.cols().unwrap()).collect();
    assert_eq!(dims, vec![8, 16, 32]);
    // All sources share the final stage's input resolution (4x4 tokens).
    assert!(trace.sources.iter().all(|s| s.rows().unwrap() == 16));
    assert_eq!(trace.last_layer_input.dim2().unwrap(), (16, 32));
}

#[test]
fn trace_sources_are_detached_and_nothing_is_recorded() {
    for spec in [
        tf_spec(4, drop(&[])),
        BackboneSpec::cnn(vec![4, 8, 16], (3, 8, 8), drop(&[]), 3),
        BackboneSpec::encoder_decoder(3, 16, 4, 5, 4, 10, drop(&[]), 3),
    ] {
        let bb = Backbone::build(&spec).unwrap();
        let input = match spec.family {
            Family::Cnn => rand_input(4, vec![3, 8, 8]),
            Family::Transformer => rand_input(4, vec![6, 10]),
            Family::EncoderDecoder => rand_input(4, vec![5, 10]),
        };
        let mut tape = Tape::new();
        let trace = bb.trace_on(&mut tape, &input).unwrap();
        assert_eq!(tape.num_nodes(), 0);
        assert_eq!(tape.retained_bytes_total(), 0);
        assert!(trace.sources.iter().all(|s| !s.requires_grad()));
        if let Some(enc) = &trace.encoder {
            assert!(enc.sources.iter().all(|s| !s.requires_grad()));
        }
    }
}

#[test]
fn replay_of_original_input_reproduces_forward() {
    for spec in [
        tf_spec(5, drop(&[1])),
        BackboneSpec::cnn(vec![4, 8, 16], (3, 8, 8), drop(&[]), 11),
        BackboneSpec::encoder_decoder(3, 16, 4, 5, 4, 10, drop(&[]), 11),
    ] {
        let bb = Backbone::build(&spec).unwrap();
        let input = match spec.family {
            Family::Cnn => rand_input(6, vec![3, 8, 8]),
            Family::Transformer => rand_input(6, vec![6, 10]),
            Family::EncoderDecoder => rand_input(6, vec![5, 10]),
        };
        let trace = bb.trace(&input).unwrap();
        let mut tape = Tape::new();
        let ctx = trace.encoder.as_ref().map(|e| e.memory.clone());
        let out = bb
            .replay_last(&mut tape, &trace.last_layer_input, ctx.as_ref())
            .unwrap();
        assert!(
            out.bits_eq(&trace.final_output),
            "replay mismatch for {:?}",
            spec.family
        );
    }
}

#[test]
fn replay_gradients_reach_adapter_but_not_backbone() {
    let spec = tf_spec(4, drop(&[]));
    let bb = Backbone::build(&spec).unwrap();
    let input = rand_input(8, vec![6, 10]);
    let trace = bb.trace(&input).unwrap();

    let (cfg, mut params) = mtsa_for_trace(&trace, 16, Aggregator::Mtsa);
    params.alpha = Tensor::scalar(0.2).with_grad();

    let mut tape = Tape::new();
    let watched = params.watch(&mut tape);
    let mixed = mtsa_forward(&mut tape, &trace.sources, &trace.last_layer_input, &cfg, &watched)
        .unwrap();
    let out = bb.replay_last(&mut tape, &mixed, None).unwrap();
    let loss = tape.mean(&out).unwrap();
    let grads = tape.backward(&loss).unwrap();

    assert!(grads.get(&watched.alpha).is_some());
    assert!(grads.get(&watched.up_w).is_some());
    let mut backbone_hit = 0;
    bb.for_each_param(&mut |_, t| {
        if grads.get(t).is_some() {
            backbone_hit += 1;
        }
    });
    assert_eq!(backbone_hit, 0);

    // Retained backbone buffers come only from the replayed last layer.
    let by_origin = tape.retained_bytes_by_origin();
    for origin in by_origin.keys() {
        assert!(
            origin == "mtsa" || origin == "backbone-layer-3",
            "unexpected origin {origin}"
        );
    }
    assert!(by_origin.contains_key("backbone-layer-3"));
}

#[test]
fn encdec_route_is_identity_at_init_and_runs_encoder_once() {
    let spec = BackboneSpec::encoder_decoder(3, 16, 4, 5, 4, 10, drop(&[]), 13);
    let bb = Backbone::build(&spec).unwrap();
    let input = rand_input(9, vec![5, 10]);
    let plain = bb.forward(&input).unwrap();

    let trace = bb.trace(&input).unwrap();
    let enc_side = trace.encoder.as_ref().unwrap();
    let enc_dims: Vec<usize> = enc_side.sources.iter().map(|s| s.cols().unwrap()).collect();
    let enc_cfg = MtsaConfig::new(
        enc_side.sources.len(),
        spec.seq_len,
        enc_dims,
        16,
        2,
        Aggregator::Mtsa,
        Insertion::Standard,
    )
    .unwrap();
    let (dec_cfg, dec_params) = mtsa_for_trace(&trace, 16, Aggregator::Mtsa);
    let enc_params = MtsaParams::init(&enc_cfg, 55);

    let mut tape = Tape::new();
    let route = encdec_route(
        &bb, &mut tape, &input, &enc_cfg, &enc_params, &dec_cfg, &dec_params,
    )
    .unwrap();
    assert!(route.output.bits_eq(&plain));

    for i in 0..spec.n_layers {
        let label = format!("enc-layer-{i}");
        let count = route.exec_log.iter().filter(|l| **l == label).count();
        assert_eq!(count, 1, "encoder layer {i} ran {count} times");
    }
}

#[test]
fn encdec_gradients_reach_both_adapters() {
    let spec = BackboneSpec::encoder_decoder(3, 16, 4, 5, 4, 10, drop(&[]), 17);
    let bb = Backbone::build(&spec).unwrap();
    let input = rand_input(10, vec![5, 10]);
    let trace = bb.trace(&input).unwrap();
    let enc_side = trace.encoder.as_ref().unwrap();
    let enc_dims: Vec<usize> = enc_side.sources.iter().map(|s| s.cols().unwrap()).collect();
    let enc_cfg = MtsaConfig::new(
        enc_side.sources.len(),
        spec.seq_len,
        enc_dims,
        16,
        2,
        Aggregator::Mtsa,
        Insertion::Standard,
    )
    .unwrap();
    let (dec_cfg, mut dec_params) = mtsa_for_trace(&trace, 16, Aggregator::Mtsa);
    let mut enc_params = MtsaParams::init(&enc_cfg, 56);
    enc_params.alpha = Tensor::scalar(0.3).with_grad();
    dec_params.alpha = Tensor::scalar(0.3).with_grad();

    let mut tape = Tape::new();
    let enc_watched = enc_params.watch(&mut tape);
    let dec_watched = dec_params.watch(&mut tape);
    let route = encdec_route(
        &bb, &mut tape, &input, &enc_cfg, &enc_watched, &dec_cfg, &dec_watched,
    )
    .unwrap();
    let loss = tape.mean(&route.output).unwrap();
    let grads = tape.backward(&loss).unwrap();

    assert!(grads.get(&enc_watched.alpha).is_some(), "encoder adapter unreached");
    assert!(grads.get(&dec_watched.alpha).is_some(), "decoder adapter unreached");
    let mut backbone_hit = 0;
    bb.for_each_param(&mut |_, t| {
        if grads.get(t).is_some() {
            backbone_hit += 1;
        }
    });
    assert_eq!(backbone_hit, 0);
}

#[test]
fn weights_roundtrip_through_load_params() {
    let spec = tf_spec(3, drop(&[]));
    let a = Backbone::build(&spec).unwrap();
    let mut b = Backbone::build(&tf_spec(3, drop(&[]))).unwrap();
    // Perturb b, then restore from a's tensors.
    b.for_each_param_mut(&mut |_, t| *t = Tensor::zeros(t.shape().to_vec()));
    b.load_params(&a.param_tensors()).unwrap();
    for ((_, ta), (_, tb)) in a.param_tensors().iter().zip(b.param_tensors().iter()) {
        assert!(ta.bits_eq(tb));
    }
}
