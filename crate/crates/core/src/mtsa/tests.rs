use super::*;
use crate::autograph::grad_check;
use crate::rng::{fill_uniform, rng};

fn cfg(
    n_sources: usize,
    tokens: usize,
    dims: Vec<usize>,
    d_model: usize,
    r: usize,
    agg: Aggregator,
) -> MtsaConfig {
    MtsaConfig::new(n_sources, tokens, dims, d_model, r, agg, Insertion::Standard).unwrap()
}

fn rand_tensor(r: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut buf = vec![0.0; n];
    fill_uniform(r, &mut buf, scale);
    Tensor::new(shape, buf).unwrap()
}

// ── config validation ────────────────────────────────────────────────

#[test]
fn config_rejects_bad_reduction_and_sources() {
    assert!(MtsaConfig::new(2, 4, vec![8, 8], 9, 2, Aggregator::Mtsa, Insertion::Standard).is_err());
    assert!(MtsaConfig::new(1, 4, vec![8], 8, 2, Aggregator::Mtsa, Insertion::Standard).is_err());
    assert!(MtsaConfig::new(
        2,
        4,
        vec![8, 8],
        8,
        2,
        Aggregator::Mhsa { heads: 3 },
        Insertion::Standard
    )
    .is_err());
}

#[test]
fn params_alpha_zero_and_learnable_r_presence() {
    let c = cfg(3, 4, vec![8, 8, 8], 8, 2, Aggregator::Mtsa);
    let p = MtsaParams::init(&c, 1);
    assert_eq!(p.alpha.data(), &[0.0]);
    assert!(p.learnable_r.is_none());

    let c = cfg(3, 4, vec![8, 8, 8], 8, 2, Aggregator::LinearAR);
    let p = MtsaParams::init(&c, 1);
    assert_eq!(p.learnable_r.as_ref().unwrap().data(), &[1.0, 1.0]);
}

// ── down_project ─────────────────────────────────────────────────────

#[test]
fn down_project_zero_weights_gives_zero() {
    let c = cfg(2, 3, vec![4, 4], 8, 2, Aggregator::Mtsa);
    let mut p = MtsaParams::init(&c, 1);
    for w in p.down_w.iter_mut() {
        *w = Tensor::zeros(w.shape().to_vec()).with_grad();
    }
    let mut tape = Tape::new();
    let h = vec![Tensor::ones(vec![3, 4]), Tensor::ones(vec![3, 4])];
    let f = down_project(&mut tape, &h, &c, &p).unwrap();
    assert!(f.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn down_project_width_follows_reduction() {
    // D = 8 with r = 2 projects every source to K x 4.
    let c = cfg(2, 5, vec![6, 8], 8, 2, Aggregator::Mtsa);
    let p = MtsaParams::init(&c, 3);
    let mut tape = Tape::new();
    let h = vec![Tensor::ones(vec![5, 6]), Tensor::ones(vec![5, 8])];
    let f = down_project(&mut tape, &h, &c, &p).unwrap();
    assert!(f.iter().all(|t| t.shape() == [5, 4]));
}

#[test]
fn down_project_matches_dense_matmul_oracle() {
    let c = cfg(2, 4, vec![5, 7], 12, 3, Aggregator::Mtsa);
    let p = MtsaParams::init(&c, 9);
    let mut r = rng(17);
    let h = vec![
        rand_tensor(&mut r, vec![4, 5], 1.0),
        rand_tensor(&mut r, vec![4, 7], 1.0),
    ];
    let mut tape = Tape::new();
    let f = down_project(&mut tape, &h, &c, &p).unwrap();

    // Independent oracle: explicit triple loop plus ReLU.
    for (n, h_n) in h.iter().enumerate() {
        let (k, dn) = h_n.dim2().unwrap();
        let d = c.hidden_dim;
        for i in 0..k {
            for j in 0..d {
                let mut acc = p.down_b[n].data()[j];
                for t in 0..dn {
                    acc += h_n.data()[i * dn + t] * p.down_w[n].data()[t * d + j];
                }
                let expect = acc.max(0.0);
                let got = f[n].data()[i * d + j];
                assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
            }
        }
    }
}

// ── enhance_and_gate ─────────────────────────────────────────────────

#[test]
fn zero_weights_gate_to_half() {
    let c = cfg(2, 3, vec![4, 4], 8, 2, Aggregator::Mtsa);
    let mut p = MtsaParams::init(&c, 1);
    for w in p.enhance_w.iter_mut().chain(p.enhance_wp.iter_mut()) {
        *w = Tensor::zeros(w.shape().to_vec()).with_grad();
    }
    let mut tape = Tape::new();
    let f = vec![
        Tensor::from_rows(&vec![vec![1.0, 2.0, 0.0, 4.0]; 3]).unwrap(),
        Tensor::from_rows(&vec![vec![0.5, 0.0, 3.0, 1.0]; 3]).unwrap(),
    ];
    let out = enhance_and_gate(&mut tape, &f, &p).unwrap();
    for (fp, f0) in out.enhanced.iter().zip(&f) {
        for (a, b) in fp.data().iter().zip(f0.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }
    assert!(out
        .gates
        .iter()
        .all(|g| g.data().iter().all(|v| (*v - 0.5).abs() < 1e-15)));
}

#[test]
fn zero_features_stay_zero() {
    let c = cfg(2, 3, vec![4, 4], 8, 2, Aggregator::Mtsa);
    let p = MtsaParams::init(&c, 2);
    let mut tape = Tape::new();
    let f = vec![Tensor::zeros(vec![3, 4]), Tensor::zeros(vec![3, 4])];
    let out = enhance_and_gate(&mut tape, &f, &p).unwrap();
    assert!(out
        .enhanced
        .iter()
        .all(|t| t.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn enhancement_matches_direct_evaluation() {
    let c = cfg(2, 3, vec![4, 4], 8, 2, Aggregator::Mtsa);
    let p = MtsaParams::init(&c, 5);
    let mut r = rng(23);
    // Inputs nonnegative as the output of the projection ReLU would be.
    let f: Vec<Tensor> = (0..2)
        .map(|_| {
            let mut buf = vec![0.0; 12];
            fill_uniform(&mut r, &mut buf, 1.0);
            for v in buf.iter_mut() {
                *v = v.abs();
            }
            Tensor::new(vec![3, 4], buf).unwrap()
        })
        .collect();
    let mut tape = Tape::new();
    let out = enhance_and_gate(&mut tape, &f, &p).unwrap();

    let d = 4;
    for n in 0..2 {
        for i in 0..3 {
            for j in 0..d {
                let mut gw = 0.0;
                let mut fw = 0.0;
                for t in 0..d {
                    gw += f[n].data()[i * d + t] * p.enhance_w[n].data()[t * d + j];
                    fw += f[n].data()[i * d + t] * p.enhance_wp[n].data()[t * d + j];
                }
                let gate = 1.0 / (1.0 + (-gw).exp());
                let expect = gate * (fw + f[n].data()[i * d + j]);
                let got = out.enhanced[n].data()[i * d + j];
                assert!((got - expect).abs() <= 1e-12);
            }
        }
    }
}

// ── regroup ──────────────────────────────────────────────────────────

#[test]
fn regroup_two_sources_gives_single_early_row() {
    let mut tape = Tape::new();
    let e = vec![Tensor::ones(vec![4, 3]), Tensor::ones(vec![4, 3])];
    let g = regroup(&mut tape, &e).unwrap();
    assert_eq!(g.guidance.len(), 4);
    assert!(g.early.iter().all(|t| t.shape() == [1, 3]));
}

#[test]
fn regroup_roundtrip_restores_sources() {
    let mut tape = Tape::new();
    let mut r = rng(4);
    let e = vec![
        rand_tensor(&mut r, vec![3, 2], 1.0),
        rand_tensor(&mut r, vec![3, 2], 1.0),
        rand_tensor(&mut r, vec![3, 2], 1.0),
    ];
    let g = regroup(&mut tape, &e).unwrap();
    // Rebuild each source from its scattered rows.
    for (src_idx, src) in e.iter().enumerate() {
        for k in 0..3 {
            let row: Vec<f64> = if src_idx == 2 {
                g.guidance[k].data().to_vec()
            } else {
                g.early[k].data()[src_idx * 2..(src_idx + 1) * 2].to_vec()
            };
            assert_eq!(&src.data()[k * 2..(k + 1) * 2], row.as_slice());
        }
    }
}

#[test]
fn regroup_sentinels_land_at_predicted_slots() {
    // N = 3 sources, K = 2 tokens, d = 2; value encodes (source, token).
    let mut tape = Tape::new();
    let enc = |s: usize, k: usize| (10 * s + k) as f64;
    let e: Vec<Tensor> = (0..3)
        .map(|s| {
            Tensor::from_rows(&[vec![enc(s, 0); 2], vec![enc(s, 1); 2]]).unwrap()
        })
        .collect();
    let g = regroup(&mut tape, &e).unwrap();
    for k in 0..2 {
        assert_eq!(g.guidance[k].data()[0], enc(2, k));
        for s in 0..2 {
            assert_eq!(g.early[k].data()[s * 2], enc(s, k));
        }
    }
}

// ── redundancy_rate ──────────────────────────────────────────────────

fn rate_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let e = Tensor::from_rows(rows).unwrap();
    let (_, rate) = redundancy_rate(&mut tape, &e).unwrap();
    rate.data().to_vec()
}

#[test]
fn orthogonal_rows_have_unit_rate() {
    let r = rate_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!(r.iter().all(|v| (*v - 1.0).abs() < 1e-12), "{r:?}");
}

#[test]
fn identical_rows_have_rate_equal_to_count() {
    let r = rate_of(&[vec![2.0, 1.0], vec![2.0, 1.0], vec![2.0, 1.0]]);
    assert!(r.iter().all(|v| (*v - 3.0).abs() < 1e-12), "{r:?}");
}

#[test]
fn negative_cosine_is_rectified_away() {
    let r = rate_of(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
    assert!(r.iter().all(|v| (*v - 1.0).abs() < 1e-12), "{r:?}");
}

#[test]
fn partially_aligned_rows_match_scalar_cosine() {
    // cos([1,0],[0.6,0.8]) = 0.6, so both rates are 1.6.
    let r = rate_of(&[vec![1.0, 0.0], vec![0.6, 0.8]]);
    assert!(r.iter().all(|v| (*v - 1.6).abs() < 1e-12), "{r:?}");
}

#[test]
fn rate_is_scale_invariant() {
    let base = rate_of(&[vec![0.3, 0.4], vec![0.5, -0.1], vec![0.2, 0.9]]);
    for c in [0.01, 3.0, 1e4] {
        let scaled = rate_of(&[
            vec![0.3 * c, 0.4 * c],
            vec![0.5 * c, -0.1 * c],
            vec![0.2 * c, 0.9 * c],
        ]);
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_rows_are_tolerated() {
    let r = rate_of(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
    assert_eq!(r[0], 0.0); // zero row: even its own diagonal vanishes
    assert!((r[1] - 1.0).abs() < 1e-12);
}

// ── aggregate ────────────────────────────────────────────────────────

#[test]
fn orthogonal_guidance_falls_back_to_residual() {
    let mut tape = Tape::new();
    let e = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let early = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let rate = Tensor::ones(vec![1]);
    let (m, blended) = aggregate(&mut tape, &e, &early, &rate).unwrap();
    assert_eq!(m.data(), &[0.0]);
    assert!(blended.bits_eq(&e.detached()));
}

#[test]
fn hand_evaluated_case() {
    let mut tape = Tape::new();
    let e = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let early = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let rate = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
    let (m, blended) = aggregate(&mut tape, &e, &early, &rate).unwrap();
    assert_eq!(m.data(), &[1.0, 0.0]);
    assert_eq!(blended.data(), &[2.0, 0.0]);
}

/// Cohort-equilibrium oracle: with cohorts of identical unit rows, the
/// total weight of cohort A must equal
/// (sum_m a_m/r_m) / (sum_m a_m/r_m + sum_n a'_n/r'_n)
/// evaluated by brute force over the members.
#[test]
fn cohort_weight_matches_equilibrium_formula() {
    let d = 4;
    let x = vec![1.0, 0.0, 0.0, 0.0];
    let y = vec![0.0, 1.0, 0.0, 0.0];
    let guidance = vec![0.6, 0.8, 0.0, 0.0];

    for (ca, cb) in [(1usize, 1usize), (2, 1), (3, 2), (4, 1)] {
        let mut rows = Vec::new();
        for _ in 0..ca {
            rows.push(x.clone());
        }
        for _ in 0..cb {
            rows.push(y.clone());
        }
        let mut tape = Tape::new();
        let e = Tensor::from_rows(&[guidance.clone()]).unwrap();
        let early = Tensor::from_rows(&rows).unwrap();
        let (_, rate) = redundancy_rate(&mut tape, &early).unwrap();
        let (m, _) = aggregate(&mut tape, &e, &early, &rate).unwrap();

        let weight_a: f64 = m.data()[..ca].iter().sum();

        // Brute-force evaluation of the cohort formula: a_m = score of each
        // member, r_m = its redundancy (cohort size for identical rows).
        let score = |row: &[f64]| -> f64 {
            row.iter()
                .zip(&guidance)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .max(0.0)
        };
        let sum_a: f64 = (0..ca).map(|_| score(&x) / ca as f64).sum();
        let sum_b: f64 = (0..cb).map(|_| score(&y) / cb as f64).sum();
        let expect = sum_a / (sum_a + sum_b);
        assert!(
            (weight_a - expect).abs() < 1e-12,
            "cohort ({ca},{cb}): {weight_a} vs {expect}"
        );
        let _ = d;
    }
}

#[test]
fn duplication_leaves_blend_unchanged_under_mtsa() {
    // E = {x, y} vs {x, x, y}: the blended output must agree to 1e-9.
    let run = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut tape = Tape::new();
        let e = Tensor::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap();
        let early = Tensor::from_rows(rows).unwrap();
        let (_, rate) = redundancy_rate(&mut tape, &early).unwrap();
        let (_, blended) = aggregate(&mut tape, &e, &early, &rate).unwrap();
        blended.data().to_vec()
    };
    let x = vec![1.0, 0.0, 0.0];
    let y = vec![0.0, 1.0, 0.0];
    let base = run(&[x.clone(), y.clone()]);
    let dup = run(&[x.clone(), x.clone(), y.clone()]);
    for (a, b) in base.iter().zip(&dup) {
        assert!((a - b).abs() < 1e-9);
    }
}

// ── aggregate_variant ────────────────────────────────────────────────

#[test]
fn ave_pool_of_identical_rows_adds_guidance() {
    let c = cfg(3, 1, vec![4, 4, 4], 8, 2, Aggregator::AvePool);
    let p = MtsaParams::init(&c, 1);
    let mut tape = Tape::new();
    let g = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
    let x = vec![0.5, -1.0, 2.0, 0.0];
    let early = Tensor::from_rows(&[x.clone(), x.clone()]).unwrap();
    let out = aggregate_variant(&mut tape, Aggregator::AvePool, &g, &early, &c, &p).unwrap();
    for i in 0..4 {
        assert!((out.data()[i] - (x[i] + g.data()[i])).abs() < 1e-15);
    }
}

#[test]
fn linear_a_equals_mtsa_for_orthogonal_rows() {
    // Mutually orthogonal early rows give unit rates, so the full rule and
    // plain linear attention coincide.
    let c = cfg(3, 1, vec![4, 4, 4], 8, 2, Aggregator::Mtsa);
    let p = MtsaParams::init(&c, 1);
    let mut tape = Tape::new();
    let g = Tensor::from_rows(&[vec![0.3, 0.9, 0.0, 0.0]]).unwrap();
    let early = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
    let a = aggregate_variant(&mut tape, Aggregator::Mtsa, &g, &early, &c, &p).unwrap();
    let b = aggregate_variant(&mut tape, Aggregator::LinearA, &g, &early, &c, &p).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-15);
}

#[test]
fn mhsa_matches_reference_attention() {
    let c = cfg(2, 1, vec![8, 8], 8, 1, Aggregator::Mhsa { heads: 4 });
    let p = MtsaParams::init(&c, 11);
    let m = p.mhsa.as_ref().unwrap();
    let d = c.hidden_dim;
    let heads = 4;
    let dh = d / heads;

    let mut r = rng(31);
    let g = rand_tensor(&mut r, vec![1, d], 1.0);
    let early = rand_tensor(&mut r, vec![3, d], 1.0);

    let mut tape = Tape::new();
    let out =
        aggregate_variant(&mut tape, Aggregator::Mhsa { heads }, &g, &early, &c, &p).unwrap();

    // Reference oracle: plain loops over heads.
    let matvec = |x: &[f64], w: &Tensor, rows: usize| -> Vec<f64> {
        let mut y = vec![0.0; rows * d];
        for i in 0..rows {
            for j in 0..d {
                for t in 0..d {
                    y[i * d + j] += x[i * d + t] * w.data()[t * d + j];
                }
            }
        }
        y
    };
    let q = matvec(g.data(), &m.wq, 1);
    let k = matvec(early.data(), &m.wk, 3);
    let v = matvec(early.data(), &m.wv, 3);
    let mut concat = vec![0.0; d];
    for h in 0..heads {
        let mut scores = [0.0; 3];
        for (i, s) in scores.iter_mut().enumerate() {
            for t in 0..dh {
                *s += q[h * dh + t] * k[i * d + h * dh + t];
            }
            *s /= (dh as f64).sqrt();
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for t in 0..dh {
            for i in 0..3 {
                concat[h * dh + t] += exps[i] / z * v[i * d + h * dh + t];
            }
        }
    }
    let mut expect = vec![0.0; d];
    for j in 0..d {
        for t in 0..d {
            expect[j] += concat[t] * m.wo.data()[t * d + j];
        }
        expect[j] += g.data()[j];
    }
    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mhsa_single_row_passes_through_with_weight_one() {
    let c = cfg(2, 1, vec![8, 8], 8, 1, Aggregator::Mhsa { heads: 4 });
    let p = MtsaParams::init(&c, 7);
    let m = p.mhsa.as_ref().unwrap();
    let d = c.hidden_dim;
    let mut r = rng(13);
    let g = rand_tensor(&mut r, vec![1, d], 1.0);
    let early = rand_tensor(&mut r, vec![1, d], 1.0);

    let mut tape = Tape::new();
    let out = aggregate_variant(
        &mut tape,
        Aggregator::Mhsa { heads: 4 },
        &g,
        &early,
        &c,
        &p,
    )
    .unwrap();

    // One key: softmax weight is exactly 1, so out = (early Wv) Wo + g.
    let mut v = vec![0.0; d];
    for j in 0..d {
        for t in 0..d {
            v[j] += early.data()[t] * m.wv.data()[t * d + j];
        }
    }
    for j in 0..d {
        let mut o = 0.0;
        for t in 0..d {
            o += v[t] * m.wo.data()[t * d + j];
        }
        assert!((out.data()[j] - (o + g.data()[j])).abs() < 1e-12);
    }
}

// ── up_project_and_mix ───────────────────────────────────────────────

#[test]
fn zero_alpha_is_exact_identity() {
    let c = cfg(2, 3, vec![4, 4], 8, 2, Aggregator::Mtsa);
    let p = MtsaParams::init(&c, 21);
    let mut r = rng(5);
    let blended = rand_tensor(&mut r, vec![3, 4], 1.0);
    let orig = rand_tensor(&mut r, vec![3, 8], 2.0);
    let mut tape = Tape::new();
    let mixed = up_project_and_mix(&mut tape, &blended, &orig, &c, &p).unwrap();
    assert!(mixed.bits_eq(&orig.detached()));
}

#[test]
fn gate_value_matches_scalar_tanh() {
    let c = cfg(2, 1, vec![4, 4], 8, 2, Aggregator::Mtsa);
    let mut p = MtsaParams::init(&c, 2);
    p.alpha = Tensor::scalar(0.1).with_grad();
    let mut tape = Tape::new();
    let u = tape.scale(&p.alpha, 1.0 / c.gate_temperature).unwrap();
    let u = tape.tanh(&u).unwrap();
    assert!((u.data()[0] - 0.761594).abs() < 1e-6);
}

#[test]
fn saturated_gate_gives_pure_up_projection() {
    let c = cfg(2, 2, vec![4, 4], 8, 2, Aggregator::Mtsa);
    let mut p = MtsaParams::init(&c, 8);
    p.alpha = Tensor::scalar(1e6).with_grad();
    let mut r = rng(6);
    let blended = rand_tensor(&mut r, vec![2, 4], 1.0);
    let orig = rand_tensor(&mut r, vec![2, 8], 1.0);
    let mut tape = Tape::new();
    let mixed = up_project_and_mix(&mut tape, &blended, &orig, &c, &p).unwrap();
    let up = {
        let mut t2 = Tape::new();
        t2.linear(&blended, &p.up_w, &p.up_b).unwrap()
    };
    assert!(mixed.max_abs_diff(&up) < 1e-12);
}

// ── mtsa_forward ─────────────────────────────────────────────────────

fn random_inputs(
    c: &MtsaConfig,
    seed: u64,
) -> (Vec<Tensor>, Tensor) {
    let mut r = rng(seed);
    let hidden: Vec<Tensor> = c
        .source_dims
        .iter()
        .map(|&dn| rand_tensor(&mut r, vec![c.tokens, dn], 1.0))
        .collect();
    let orig = rand_tensor(&mut r, vec![c.tokens, c.model_dim], 1.0);
    (hidden, orig)
}

#[test]
fn fresh_adapter_is_identity_on_any_input() {
    for agg in [
        Aggregator::Mtsa,
        Aggregator::LinearA,
        Aggregator::LinearAR,
        Aggregator::Mhsa { heads: 2 },
        Aggregator::MaxPool,
        Aggregator::AvePool,
    ] {
        let c = cfg(3, 4, vec![6, 8, 8], 8, 2, agg);
        let p = MtsaParams::init(&c, 77);
        let (hidden, orig) = random_inputs(&c, 101);
        let mut tape = Tape::new();
        let out = mtsa_forward(&mut tape, &hidden, &orig, &c, &p).unwrap();
        assert!(out.bits_eq(&orig), "not identity under {agg:?}");
    }
}

#[test]
fn forward_rejects_gradient_carrying_sources() {
    let c = cfg(2, 2, vec![4, 4], 8, 2, Aggregator::Mtsa);
    let p = MtsaParams::init(&c, 1);
    let (mut hidden, orig) = random_inputs(&c, 3);
    hidden[0] = hidden[0].clone().with_grad();
    let mut tape = Tape::new();
    assert!(mtsa_forward(&mut tape, &hidden, &orig, &c, &p).is_err());
}

#[test]
fn forward_records_only_mtsa_origin() {
    let c = cfg(2, 3, vec![4, 4], 8, 2, Aggregator::Mtsa);
    let mut p = MtsaParams::init(&c, 31);
    p.alpha = Tensor::scalar(0.2).with_grad();
    let (hidden, orig) = random_inputs(&c, 4);
    let mut tape = Tape::new();
    tape.set_origin("backbone-layer-5");
    let watched = p.watch(&mut tape);
    let _ = mtsa_forward(&mut tape, &hidden, &orig, &c, &watched).unwrap();
    let by_origin = tape.retained_bytes_by_origin();
    assert!(by_origin.keys().all(|k| k == "mtsa"), "{by_origin:?}");
    // Caller origin restored.
    assert_eq!(tape.origin(), "backbone-layer-5");
}

#[test]
fn gradients_never_reach_hidden_states() {
    let c = cfg(3, 3, vec![4, 6, 8], 8, 2, Aggregator::Mtsa);
    let mut p = MtsaParams::init(&c, 41);
    p.alpha = Tensor::scalar(0.15).with_grad();
    let (hidden, orig) = random_inputs(&c, 5);
    let mut tape = Tape::new();
    let watched = p.watch(&mut tape);
    let out = mtsa_forward(&mut tape, &hidden, &orig, &c, &watched).unwrap();
    let loss = tape.mean(&out).unwrap();
    let grads = tape.backward(&loss).unwrap();
    for h in &hidden {
        assert!(grads.get(h).is_none());
    }
    // Every adapter parameter with a path to the loss is present.
    assert!(grads.get(&watched.alpha).is_some());
}

#[test]
fn full_forward_gradcheck_mtsa_aggregator() {
    let c = cfg(3, 3, vec![4, 5, 8], 8, 2, Aggregator::Mtsa);
    let mut proto = MtsaParams::init(&c, 55);
    proto.alpha = Tensor::scalar(0.12).with_grad();
    let (hidden, orig) = random_inputs(&c, 6);
    let flat = proto.flat_tensors();
    let names: Vec<String> = flat.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = flat.into_iter().map(|(_, t)| t).collect();

    let c2 = c.clone();
    let f = move |tape: &mut Tape, ps: &[Tensor]| {
        let mut params = proto.clone();
        let mut i = 0;
        params.for_each_mut(&mut |name, t| {
            assert_eq!(name, names[i]);
            *t = ps[i].clone();
            i += 1;
        });
        let out = mtsa_forward(tape, &hidden, &orig, &c2, &params)?;
        tape.mean(&out)
    };
    let err = grad_check(f, &tensors, 1e-5).unwrap();
    assert!(err <= 1e-5, "max rel error {err}");
}
