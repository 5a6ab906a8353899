use gta_core::forecaster::{
    complexity_report, local_conv_branch, scaled_dot_attention, AttentionKind, BranchConfig, BranchMix, Dropout,
    Forecaster, ForecasterConfig, GlobalAttention, MultiHead,
};
use gta_core::numerics::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use gta_core::numerics::{generator, Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
    *store.get_mut(id) = t.with_grad();
}

fn sum_of_squares(tape: &mut Tape, y: gta_core::Var) -> gta_core::Result<gta_core::Var> {
    let sq = tape.mul(y, y)?;
    Ok(tape.sum(sq))
}

/// Plain-loop `Softmax(QKᵀ/√d)V` for one sequence.
fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let (m, dv) = (k.shape()[0], v.shape()[1]);
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let s: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        for j in 0..m {
            for c in 0..dv {
                out[i * dv + c] += s[j].exp() / z * v.at(&[j, c]);
            }
        }
    }
    out
}

// scaled dot-product ----------------------------------------------------------

#[test]
fn single_query_returns_the_value_row() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(&[1, 2], vec![0.3, -4.0]).unwrap());
    let k = tape.constant(Tensor::new(&[1, 2], vec![2.0, 1.0]).unwrap());
    let v = tape.constant(Tensor::new(&[1, 3], vec![5.0, -1.0, 0.25]).unwrap());
    let y = scaled_dot_attention(&mut tape, q, k, v, false).unwrap();
    assert_eq!(tape.data(y), &[5.0, -1.0, 0.25]);
}

#[test]
fn zero_keys_average_the_values() {
    let mut rng = generator(1);
    let v = random(&[4, 3], &mut rng);
    let mut tape = Tape::new();
    let q = tape.constant(random(&[2, 5], &mut rng));
    let k = tape.constant(Tensor::zeros(&[4, 5]));
    let vv = tape.constant(v.clone());
    let y = scaled_dot_attention(&mut tape, q, k, vv, false).unwrap();
    for i in 0..2 {
        for c in 0..3 {
            let mean = (0..4).map(|j| v.at(&[j, c])).sum::<f64>() / 4.0;
            assert!((tape.value(y).at(&[i, c]) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn two_by_two_matches_direct_evaluation() {
    let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -1.0]]).unwrap();
    let k = Tensor::from_rows(&[vec![0.2, 0.4], vec![-1.0, 2.0]]).unwrap();
    let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap();
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let y = scaled_dot_attention(&mut tape, qv, kv, vv, false).unwrap();
    let want = attention_oracle(&q, &k, &v);
    for (a, b) in tape.data(y).iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
    // first row by hand: scores (0.2, -1)/√2
    let (s0, s1) = (0.2 / 2f64.sqrt(), -1.0 / 2f64.sqrt());
    let w0 = s0.exp() / (s0.exp() + s1.exp());
    assert!((tape.data(y)[0] - (w0 * 1.0 + (1.0 - w0) * 3.0)).abs() < 1e-14);
}

#[test]
fn attention_rejects_mismatched_shapes() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[2, 3]));
    let k = tape.constant(Tensor::zeros(&[4, 2]));
    let v = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(scaled_dot_attention(&mut tape, q, k, v, false).is_err());
    let k = tape.constant(Tensor::zeros(&[4, 3]));
    let v = tape.constant(Tensor::zeros(&[5, 2]));
    assert!(scaled_dot_attention(&mut tape, q, k, v, false).is_err());
}

// multi-head -------------------------------------------------------------------

#[test]
fn single_identity_head_is_plain_attention() {
    let mut rng = generator(2);
    let mut store = ParamStore::new();
    let mh = MultiHead::new(&mut store, "mh", 4, 1, &mut rng).unwrap();
    for id in mh.params() {
        set(&mut store, id, Tensor::eye(4));
    }
    let x = random(&[5, 4], &mut rng);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let y = mh.forward(&mut tape, xv, xv, false, &mut Dropout::off()).unwrap();
    let want = attention_oracle(&x, &x, &x);
    assert_eq!(tape.shape(y), &[5, 4]);
    for (a, b) in tape.data(y).iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn multi_head_preserves_shape_and_checks_heads() {
    let mut rng = generator(3);
    for (n, d, h) in [(1, 4, 2), (7, 6, 3), (5, 8, 8), (3, 12, 4)] {
        let mut store = ParamStore::new();
        let mh = MultiHead::new(&mut store, "mh", d, h, &mut rng).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(random(&[2, n, d], &mut rng));
        let y = mh.forward(&mut tape, x, x, false, &mut Dropout::off()).unwrap();
        assert_eq!(tape.shape(y), &[2, n, d]);
    }
    let mut store = ParamStore::new();
    assert!(MultiHead::new(&mut store, "bad", 6, 4, &mut rng).is_err());
}

#[test]
fn two_head_gradient_check() {
    let mut rng = generator(4);
    let mut store = ParamStore::new();
    let mh = MultiHead::new(&mut store, "mh", 4, 2, &mut rng).unwrap();
    let x = store.add("x", random(&[2, 3, 4], &mut rng));
    let mem = store.add("mem", random(&[2, 5, 4], &mut rng));
    let report = check_params(&store, DEFAULT_STEP, 64, |tape| {
        let (xv, mv) = (tape.param(x), tape.param(mem));
        let y = mh.forward(tape, xv, mv, false, &mut Dropout::off())?;
        sum_of_squares(tape, y)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
    let causal = check_params(&store, DEFAULT_STEP, 64, |tape| {
        let xv = tape.param(x);
        let y = mh.forward(tape, xv, xv, true, &mut Dropout::off())?;
        sum_of_squares(tape, y)
    })
    .unwrap();
    assert!(causal.max_rel_err <= 1e-4, "{causal:?}");
}

// global-learned ----------------------------------------------------------------

fn identity_global(store: &mut ParamStore, d: usize, heads: usize, m: usize) -> GlobalAttention {
    let ga = GlobalAttention::new(store, "ga", d, heads, m, &mut generator(5)).unwrap();
    let [_, wv, wo] = ga.params();
    set(store, wv, Tensor::eye(d));
    set(store, wo, Tensor::eye(d));
    ga
}

#[test]
fn zero_alignment_averages_values() {
    let mut store = ParamStore::new();
    let ga = identity_global(&mut store, 4, 2, 8);
    set(&mut store, ga.params()[0], Tensor::zeros(&[2, 8, 8]));
    let x = random(&[3, 4], &mut generator(6));
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let y = ga.forward(&mut tape, xv, false, &mut Dropout::off()).unwrap();
    for i in 0..3 {
        for c in 0..4 {
            let mean = (0..3).map(|j| x.at(&[j, c])).sum::<f64>() / 3.0;
            assert!((tape.value(y).at(&[i, c]) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn dominant_alignment_selects_a_row() {
    let mut store = ParamStore::new();
    let ga = identity_global(&mut store, 2, 1, 6);
    let mut s = Tensor::zeros(&[1, 6, 6]);
    for i in 0..4 {
        s.set(&[0, i, (i + 2) % 4], 1000.0);
    }
    set(&mut store, ga.params()[0], s);
    let x = random(&[4, 2], &mut generator(7));
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let y = ga.forward(&mut tape, xv, false, &mut Dropout::off()).unwrap();
    for i in 0..4 {
        for c in 0..2 {
            assert!((tape.value(y).at(&[i, c]) - x.at(&[(i + 2) % 4, c])).abs() < 1e-12);
        }
    }
}

#[test]
fn global_weights_ignore_the_input() {
    let mut rng = generator(8);
    let mut store = ParamStore::new();
    let ga = identity_global(&mut store, 4, 1, 10);
    set(&mut store, ga.params()[0], random(&[1, 10, 10], &mut rng));
    let mut tape = Tape::with_params(&store);
    // with V = I and W^O = I an identity sequence reads back the weights
    let eye = tape.constant(Tensor::eye(4));
    let w = ga.forward(&mut tape, eye, false, &mut Dropout::off()).unwrap();
    let w = tape.value(w).clone();
    let x = random(&[4, 4], &mut rng);
    let xv = tape.constant(x.clone());
    let y = ga.forward(&mut tape, xv, false, &mut Dropout::off()).unwrap();
    for i in 0..4 {
        for c in 0..4 {
            let want: f64 = (0..4).map(|j| w.at(&[i, j]) * x.at(&[j, c])).sum();
            assert!((tape.value(y).at(&[i, c]) - want).abs() < 1e-14);
        }
    }
    assert!(ga.weights(&mut tape, 11, false).is_err());
    let long = tape.constant(Tensor::zeros(&[11, 4]));
    assert!(ga.forward(&mut tape, long, false, &mut Dropout::off()).is_err());
}

// local convolution -------------------------------------------------------------

#[test]
fn local_kernel_identity_and_average() {
    let mut rng = generator(9);
    let x = random(&[5, 2], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let raw = tape.constant(Tensor::new(&[1, 3], vec![-60.0, 60.0, -60.0]).unwrap());
    let y = local_conv_branch(&mut tape, xv, raw, false).unwrap();
    assert!(tape.value(y).max_abs_diff(&x) < 1e-40);

    let c = tape.constant(Tensor::full(&[6, 3], 2.5));
    let uniform = tape.constant(Tensor::zeros(&[3, 3]));
    let y = local_conv_branch(&mut tape, c, uniform, false).unwrap();
    assert!(tape.data(y).iter().all(|v| (v - 2.5).abs() < 1e-15));
}

#[test]
fn local_kernel_matches_sliding_sum() {
    let mut rng = generator(10);
    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let raw = [0.3, -0.2, 1.1];
    let z: f64 = raw.iter().map(|v: &f64| v.exp()).sum();
    let k: Vec<f64> = raw.iter().map(|v| v.exp() / z).collect();
    let at = |t: isize| x[t.clamp(0, 3) as usize];
    let centred: Vec<f64> = (0..4).map(|t| k[0] * at(t - 1) + k[1] * at(t) + k[2] * at(t + 1)).collect();
    let causal: Vec<f64> = (0..4).map(|t| k[0] * at(t - 2) + k[1] * at(t - 1) + k[2] * at(t)).collect();

    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(&[4, 1], x.clone()).unwrap());
    let kv = tape.constant(Tensor::new(&[1, 3], raw.to_vec()).unwrap());
    let y = local_conv_branch(&mut tape, xv, kv, false).unwrap();
    let yc = local_conv_branch(&mut tape, xv, kv, true).unwrap();
    for t in 0..4 {
        assert!((tape.data(y)[t] - centred[t]).abs() < 1e-15);
        assert!((tape.data(yc)[t] - causal[t]).abs() < 1e-15);
    }
}

// branch mix ---------------------------------------------------------------------

#[test]
fn degenerate_split_is_pure_multi_head() {
    let mut rng = generator(11);
    let mut store = ParamStore::new();
    let cfg = BranchConfig { d1: 6, d2: 0, dc: 0 };
    let mix = BranchMix::new(&mut store, "mix", cfg, 2, 16, &mut rng).unwrap();
    let x = random(&[2, 5, 6], &mut rng);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x);
    let a = mix.forward(&mut tape, xv, false, &mut Dropout::off()).unwrap();
    let b = mix.dot().unwrap().forward(&mut tape, xv, xv, false, &mut Dropout::off()).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn branches_have_block_diagonal_jacobian() {
    let mut rng = generator(12);
    let mut store = ParamStore::new();
    let cfg = BranchConfig { d1: 4, d2: 2, dc: 3 };
    let mix = BranchMix::new(&mut store, "mix", cfg, 2, 16, &mut rng).unwrap();
    let x = random(&[1, 5, 9], &mut rng);
    let run = |x: &Tensor| {
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let y = mix.forward(&mut tape, xv, false, &mut Dropout::off()).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 9]);
        tape.value(y).clone()
    };
    let base = run(&x);
    let blocks = [0..4, 4..6, 6..9];
    let block_of = |c: usize| blocks.iter().position(|b| b.contains(&c)).unwrap();
    for c_in in 0..9 {
        for t_in in 0..5 {
            let mut xp = x.clone();
            xp.set(&[0, t_in, c_in], x.at(&[0, t_in, c_in]) + 1e-5);
            let y = run(&xp);
            let mut moved = [false; 3];
            for t in 0..5 {
                for c in 0..9 {
                    let fd = (y.at(&[0, t, c]) - base.at(&[0, t, c])) / 1e-5;
                    if block_of(c) != block_of(c_in) {
                        assert_eq!(fd, 0.0, "input col {c_in} leaked into col {c}");
                    } else if fd != 0.0 {
                        moved[block_of(c)] = true;
                    }
                }
            }
            assert!(moved[block_of(c_in)]);
        }
    }
}

#[test]
fn branch_mix_rejects_width_mismatch() {
    let mut rng = generator(13);
    let mut store = ParamStore::new();
    let mix = BranchMix::new(&mut store, "mix", BranchConfig { d1: 2, d2: 2, dc: 2 }, 2, 8, &mut rng).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::zeros(&[3, 5]));
    assert!(mix.forward(&mut tape, x, false, &mut Dropout::off()).is_err());
}

// full stack -----------------------------------------------------------------------

fn tiny_config(m: usize, label_len: usize) -> ForecasterConfig {
    ForecasterConfig {
        ff_width: 8,
        max_len: 16,
        label_len,
        enc_layers: 1,
        dec_layers: 1,
        ..ForecasterConfig::new(m, 6, 2)
    }
}

#[test]
fn forecast_shape_contract() {
    let mut rng = generator(14);
    let mut store = ParamStore::new();
    let cfg = ForecasterConfig {
        max_len: 64,
        ..ForecasterConfig::new(10, 12, 2)
    };
    let fc = Forecaster::new(&mut store, &cfg, &mut rng).unwrap();
    let mut tape = Tape::with_params(&store);
    // 60-step window through three dilation levels leaves 53 tokens
    let tokens = tape.constant(random(&[2, 53, 12], &mut rng));
    let labels = tape.constant(random(&[2, 31, 10], &mut rng));
    let y = fc.forecast(&mut tape, tokens, labels, &mut Dropout::off()).unwrap();
    assert_eq!(tape.shape(y), &[2, 10]);
    let short = tape.constant(random(&[2, 30, 10], &mut rng));
    assert!(fc.forecast(&mut tape, tokens, short, &mut Dropout::off()).is_err());
}

#[test]
fn decoder_is_causal() {
    let mut rng = generator(15);
    let mut store = ParamStore::new();
    let fc = Forecaster::new(&mut store, &tiny_config(3, 4), &mut rng).unwrap();
    let tokens = random(&[1, 6, 6], &mut rng);
    let mut labels = random(&[1, 5, 3], &mut rng);
    for c in 0..3 {
        labels.set(&[0, 4, c], 0.0);
    }
    let states = |labels: &Tensor| {
        let mut tape = Tape::with_params(&store);
        let t = tape.constant(tokens.clone());
        let l = tape.constant(labels.clone());
        let mem = fc.encode(&mut tape, t, &mut Dropout::off()).unwrap();
        let s = fc.decode(&mut tape, l, mem, &mut Dropout::off()).unwrap();
        tape.value(s).clone()
    };
    let base = states(&labels);
    let mut poked = labels.clone();
    poked.set(&[0, 4, 1], 3.0);
    let after = states(&poked);
    assert_eq!(base.data()[..4 * 6], after.data()[..4 * 6]);
    assert_ne!(base.data()[4 * 6..], after.data()[4 * 6..]);
}

#[test]
fn decoder_gradient_vanishes_for_later_inputs() {
    let mut rng = generator(16);
    let mut store = ParamStore::new();
    let fc = Forecaster::new(&mut store, &tiny_config(2, 3), &mut rng).unwrap();
    let mut tape = Tape::with_params(&store);
    let tokens = tape.constant(random(&[1, 5, 6], &mut rng));
    let labels = tape.leaf(random(&[1, 4, 2], &mut rng).with_grad());
    let mem = fc.encode(&mut tape, tokens, &mut Dropout::off()).unwrap();
    let s = fc.decode(&mut tape, labels, mem, &mut Dropout::off()).unwrap();
    let first = tape.narrow(s, 1, 1, 1).unwrap();
    let loss = tape.sum(first);
    let g = tape.backward(loss).unwrap();
    let g = g.wrt(labels).unwrap();
    assert!(g[..4].iter().any(|v| *v != 0.0));
    assert!(g[4..].iter().all(|v| *v == 0.0));
}

#[test]
fn encoder_and_decoder_layer_gradient_check() {
    let mut rng = generator(17);
    let mut store = ParamStore::new();
    let fc = Forecaster::new(&mut store, &tiny_config(2, 3), &mut rng).unwrap();
    let tokens = store.add("tokens", random(&[2, 5, 6], &mut rng));
    let labels = random(&[2, 4, 2], &mut rng);
    let report = check_params(&store, DEFAULT_STEP, 8, |tape| {
        let t = tape.param(tokens);
        let l = tape.constant(labels.clone());
        let y = fc.forecast(tape, t, l, &mut Dropout::off())?;
        sum_of_squares(tape, y)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
    assert!(report.checked > 100);
}

#[test]
fn constant_series_is_learned() {
    let m = 3;
    let mut rng = generator(18);
    let mut store = ParamStore::new();
    let fc = Forecaster::new(&mut store, &tiny_config(m, 4), &mut rng).unwrap();
    let c = [0.2, -0.5, 0.9];
    let tokens = Tensor::full(&[1, 6, 6], 0.1);
    let mut labels = Tensor::zeros(&[1, 5, m]);
    for t in 0..4 {
        for (i, v) in c.iter().enumerate() {
            labels.set(&[0, t, i], *v);
        }
    }
    let target = Tensor::new(&[1, m], c.to_vec()).unwrap();
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    });
    let predict = |store: &ParamStore| -> (Tensor, f64) {
        let mut tape = Tape::with_params(store);
        let t = tape.constant(tokens.clone());
        let l = tape.constant(labels.clone());
        let y = fc.forecast(&mut tape, t, l, &mut Dropout::off()).unwrap();
        let y = tape.value(y).clone();
        let err = y.max_abs_diff(&target);
        (y, err)
    };
    for _ in 0..200 {
        store.zero_grad();
        let mut tape = Tape::with_params(&store);
        let t = tape.constant(tokens.clone());
        let l = tape.constant(labels.clone());
        let y = fc.forecast(&mut tape, t, l, &mut Dropout::off()).unwrap();
        let tgt = tape.constant(target.clone());
        let diff = tape.sub(y, tgt).unwrap();
        let loss = sum_of_squares(&mut tape, diff).unwrap();
        tape.backward(loss).unwrap().accumulate_into(&mut store).unwrap();
        adam.step(&mut store).unwrap();
    }
    let (y, err) = predict(&store);
    assert!(err < 1e-2, "prediction {:?}", y.data());
}

#[test]
fn dropout_only_acts_in_training() {
    let mut rng = generator(19);
    let mut store = ParamStore::new();
    let fc = Forecaster::new(&mut store, &tiny_config(2, 3), &mut rng).unwrap();
    let tokens = random(&[1, 5, 6], &mut rng);
    let labels = random(&[1, 4, 2], &mut rng);
    let run = |drop: &mut Dropout| {
        let mut tape = Tape::with_params(&store);
        let t = tape.constant(tokens.clone());
        let l = tape.constant(labels.clone());
        let y = fc.forecast(&mut tape, t, l, drop).unwrap();
        tape.value(y).clone()
    };
    let a = run(&mut Dropout::off());
    let b = run(&mut Dropout::off());
    assert_eq!(a, b);
    let mut g = generator(20);
    let c = run(&mut Dropout::new(0.5, &mut g));
    assert_ne!(a, c);
}

// complexity -------------------------------------------------------------------------

#[test]
fn complexity_reference_values() {
    let dot = complexity_report(AttentionKind::DotProduct, 60, 128, 8, 64, 48, 40);
    assert_eq!(dot.params, 65536);
    assert_eq!(dot.mult_adds, 4 * 60 * 128 * 128 + 2 * 60 * 60 * 128);
    let global = complexity_report(AttentionKind::GlobalLearned, 60, 128, 8, 64, 48, 40);
    assert_eq!(global.params, 65536);
    let mix = complexity_report(AttentionKind::BranchMix, 60, 128, 8, 64, 48, 40);
    assert_eq!(mix.params, 4 * 48 * 48 + 64 * 64 * 8 + 2 * 40 * 40);
    // doubling n quadruples the quadratic term of the dot-product count
    let long = complexity_report(AttentionKind::DotProduct, 120, 128, 8, 64, 0, 0);
    assert_eq!(long.mult_adds - 2 * (4 * 60 * 128 * 128), 4 * (2 * 60 * 60 * 128));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_is_a_convex_combination(n in 1usize..6, m in 1usize..6, d in 1usize..4, seed in 0u64..1000) {
        let mut rng = generator(seed);
        let q = random(&[n, d], &mut rng);
        let k = random(&[m, d], &mut rng);
        let v = random(&[m, 3], &mut rng);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
        let y = scaled_dot_attention(&mut tape, qv, kv, vv, false).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..m).map(|j| v.at(&[j, c])).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let o = tape.value(y).at(&[i, c]);
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
        // V = I exposes the weights, which must be row-stochastic
        let mut tape = Tape::new();
        let qv = tape.constant(random(&[n, d], &mut rng));
        let kv = tape.constant(random(&[m, d], &mut rng));
        let ev = tape.constant(Tensor::eye(m));
        let w = scaled_dot_attention(&mut tape, qv, kv, ev, false).unwrap();
        for i in 0..n {
            let row = &tape.data(w)[i * m..(i + 1) * m];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn global_weights_are_row_stochastic(n in 1usize..10, causal in any::<bool>(), seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let ga = GlobalAttention::new(&mut store, "ga", 4, 2, 10, &mut generator(seed)).unwrap();
        let mut tape = Tape::with_params(&store);
        let w = ga.weights(&mut tape, n, causal).unwrap();
        for row in tape.data(w).chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn complexity_formulas_and_crossover(
        n in 1u64..512, d in 1u64..512, h in 1u64..16, m in 0u64..256, d1 in 1u64..256, d2 in 1u64..256,
    ) {
        let dot = complexity_report(AttentionKind::DotProduct, n, d, h, m, d1, d2);
        let global = complexity_report(AttentionKind::GlobalLearned, n, d, h, m, d1, d2);
        let mix = complexity_report(AttentionKind::BranchMix, n, d, h, m, d1, d2);
        let (n, d, h, m, d1, d2) = (n as u128, d as u128, h as u128, m as u128, d1 as u128, d2 as u128);
        prop_assert_eq!(dot.params, 4 * d * d);
        prop_assert_eq!(global.params, m * m * h + 2 * d * d);
        prop_assert_eq!(mix.params, 4 * d1 * d1 + m * m * h + 2 * d2 * d2);
        prop_assert_eq!(mix.mult_adds, 4 * n * d1 * d1 + n * n * d1 + 2 * n * d2 * d2 + n * n * d);
        // |θ|_global ≤ |θ|_dot  ⇔  m²h ≤ 2d²  ⇔  m ≤ √(2/h)·d
        prop_assert_eq!(global.params <= dot.params, m * m * h <= 2 * d * d);
    }
}

#[test]
fn attention_gradient_checks() {
    let mut rng = generator(21);
    let inputs = [random(&[2, 3, 2], &mut rng), random(&[2, 4, 2], &mut rng), random(&[2, 4, 3], &mut rng)];
    let r = check_inputs(&inputs, DEFAULT_STEP, |tape, v| {
        let y = scaled_dot_attention(tape, v[0], v[1], v[2], false)?;
        sum_of_squares(tape, y)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");

    let mut store = ParamStore::new();
    let mix = BranchMix::new(&mut store, "mix", BranchConfig { d1: 2, d2: 2, dc: 2 }, 1, 8, &mut rng).unwrap();
    let x = store.add("x", random(&[2, 5, 6], &mut rng));
    for causal in [false, true] {
        let r = check_params(&store, DEFAULT_STEP, 64, |tape| {
            let xv = tape.param(x);
            let y = mix.forward(tape, xv, causal, &mut Dropout::off())?;
            sum_of_squares(tape, y)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "causal={causal}: {r:?}");
    }
}
