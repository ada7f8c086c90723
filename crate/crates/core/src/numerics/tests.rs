use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::check_grads;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> AttentionMask {
    loop {
        let bits = (0..rows * cols).map(|_| rng.random_bool(0.6)).collect();
        if let Ok(m) = AttentionMask::new(rows, cols, bits) {
            return m;
        }
    }
}

/// Scalar-loop attention: softmax over permitted logits only.
fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, m: &AttentionMask) -> Vec<Vec<f64>> {
    let dk = q.cols() as f64;
    (0..q.rows())
        .map(|i| {
            let logits: Vec<Option<f64>> = (0..k.rows())
                .map(|j| {
                    m.get(i, j).then(|| {
                        (0..q.cols()).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / dk.sqrt()
                    })
                })
                .collect();
            let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = logits.iter().flatten().map(|l| (l - max).exp()).sum();
            (0..v.cols())
                .map(|c| {
                    logits
                        .iter()
                        .enumerate()
                        .filter_map(|(j, l)| l.map(|l| (l - max).exp() / z * v.row(j)[c]))
                        .sum()
                })
                .collect()
        })
        .collect()
}

#[test]
fn attention_single_key_is_identity() {
    let q = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
    let k = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let v = Tensor::matrix(1, 3, vec![4.0, 5.0, 6.0]).unwrap();
    let out = masked_attention(&q, &k, &v, &AttentionMask::full(1, 1), MaskMode::PreSoftmax).unwrap();
    assert_eq!(out.data(), v.data());
}

#[test]
fn one_hot_row_selects_value_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, k, v) = (rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 5, 4), rand_tensor(&mut rng, 5, 2));
    let mut bits = vec![false; 15];
    bits[2] = true;
    bits[5] = true;
    bits[14] = true;
    let m = AttentionMask::new(3, 5, bits).unwrap();
    let out = masked_attention(&q, &k, &v, &m, MaskMode::PreSoftmax).unwrap();
    assert_eq!(out.row(0), v.row(2));
    assert_eq!(out.row(1), v.row(0));
    assert_eq!(out.row(2), v.row(4));
}

#[test]
fn attention_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (q, k, v) = (rand_tensor(&mut rng, 3, 3), rand_tensor(&mut rng, 3, 3), rand_tensor(&mut rng, 3, 3));
        let m = rand_mask(&mut rng, 3, 3);
        let out = masked_attention(&q, &k, &v, &m, MaskMode::PreSoftmax).unwrap();
        for (i, row) in attention_oracle(&q, &k, &v, &m).iter().enumerate() {
            for (a, b) in out.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_weight_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (q, k) = (rand_tensor(&mut rng, 4, 3), rand_tensor(&mut rng, 6, 3));
        let m = rand_mask(&mut rng, 4, 6);
        let w = attention_weights(&q, &k, &m, MaskMode::PreSoftmax).unwrap();
        for i in 0..4 {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..6 {
                if !m.get(i, j) {
                    assert_eq!(w.row(i)[j], 0.0);
                }
            }
        }
        // all-ones mask is bit-identical to no mask
        let full = attention_weights(&q, &k, &AttentionMask::full(4, 6), MaskMode::PreSoftmax).unwrap();
        let s = q.matmul(&k.transpose()).unwrap();
        let mut scaled = s.clone();
        scaled.data_mut().iter_mut().for_each(|x| *x *= 1.0 / 3f64.sqrt());
        assert_eq!(full, softmax(&scaled));
    }
}

#[test]
fn mask_modes_agree_on_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (q, k) = (rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 7, 4));
        let m = rand_mask(&mut rng, 3, 7);
        let a = attention_weights(&q, &k, &m, MaskMode::PreSoftmax).unwrap();
        let b = attention_weights(&q, &k, &m, MaskMode::Literal).unwrap();
        let argmax = |r: &[f64]| r.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        for i in 0..3 {
            assert_eq!(argmax(a.row(i)), argmax(b.row(i)));
            assert!(b.row(i).iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn attention_shape_errors() {
    let t = Tensor::zeros(&[2, 3]);
    let k = Tensor::zeros(&[2, 4]);
    assert!(masked_attention(&t, &k, &t, &AttentionMask::full(2, 2), MaskMode::PreSoftmax).is_err());
    assert!(masked_attention(&t, &t, &t, &AttentionMask::full(3, 2), MaskMode::PreSoftmax).is_err());
}

fn mha_store(width: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mha = MultiHeadAttention::new(&mut store, "att", width, heads, &mut rng).unwrap();
    // non-zero biases so their gradients are exercised
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") {
            store.get_mut(id).data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    (store, mha)
}

#[test]
fn heads_must_divide_width() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn single_head_is_projected_attention() {
    let (store, mha) = mha_store(4, 1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xq = rand_tensor(&mut rng, 3, 4);
    let xkv = rand_tensor(&mut rng, 5, 4);
    let m = rand_mask(&mut rng, 3, 5);
    let mut tape = Tape::inference(&store);
    let (a, b) = (tape.constant(xq.clone()), tape.constant(xkv.clone()));
    let out = mha.forward(&mut tape, a, b, &Arc::new(m.clone())).unwrap();

    let lin = |x: &Tensor, l: &Linear| {
        let mut y = x.matmul(store.get(l.w)).unwrap();
        let c = y.cols();
        y.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += store.get(l.b).data()[i % c]);
        y
    };
    let att = masked_attention(&lin(&xq, &mha.q), &lin(&xkv, &mha.k), &lin(&xkv, &mha.v), &m, MaskMode::PreSoftmax)
        .unwrap();
    let expected = lin(&att, &mha.o);
    for (x, y) in tape.value(out).data().iter().zip(expected.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn two_tied_heads_match_single_head_reference() {
    let (ref_store, ref_mha) = mha_store(4, 1, 7);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mha = MultiHeadAttention::new(&mut store, "att", 8, 2, &mut rng).unwrap();
    for (big, small) in [(&mha.q, &ref_mha.q), (&mha.k, &ref_mha.k), (&mha.v, &ref_mha.v), (&mha.o, &ref_mha.o)] {
        let w = ref_store.get(small.w);
        let b = ref_store.get(small.b);
        let mut wd = vec![0.0; 64];
        for i in 0..4 {
            for j in 0..4 {
                let v = w.data()[i * 4 + j];
                wd[i * 8 + j] = v;
                wd[(i + 4) * 8 + j + 4] = v;
            }
        }
        store.get_mut(big.w).data_mut().copy_from_slice(&wd);
        let bd: Vec<f64> = b.data().iter().chain(b.data()).copied().collect();
        store.get_mut(big.b).data_mut().copy_from_slice(&bd);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = rand_tensor(&mut rng, 3, 4);
    let mem = rand_tensor(&mut rng, 5, 4);
    let dup = |t: &Tensor| {
        let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| [t.row(r), t.row(r)].concat()).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let m = Arc::new(rand_mask(&mut rng, 3, 5));

    let mut t1 = Tape::inference(&ref_store);
    let (a, b) = (t1.constant(u.clone()), t1.constant(mem.clone()));
    let reference = mha_out(&mut t1, &ref_mha, a, b, &m);

    let mut t2 = Tape::inference(&store);
    let (a, b) = (t2.constant(dup(&u)), t2.constant(dup(&mem)));
    let wide = mha_out(&mut t2, &mha, a, b, &m);
    for r in 0..3 {
        for c in 0..4 {
            assert!((wide.row(r)[c] - reference.row(r)[c]).abs() < 1e-12);
            assert!((wide.row(r)[c + 4] - reference.row(r)[c]).abs() < 1e-12);
        }
    }
}

fn mha_out(tape: &mut Tape, mha: &MultiHeadAttention, a: Var, b: Var, m: &Arc<AttentionMask>) -> Tensor {
    let o = mha.forward(tape, a, b, m).unwrap();
    tape.value(o).clone()
}

#[test]
fn mha_gradients_match_finite_differences() {
    let (mut store, mha) = mha_store(8, 2, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xq = store.add("xq", rand_tensor(&mut rng, 3, 8));
    let xkv = store.add("xkv", rand_tensor(&mut rng, 4, 8));
    let m = Arc::new(rand_mask(&mut rng, 3, 4));
    check_grads(
        &store,
        |t| {
            let (a, b) = (t.param(xq), t.param(xkv));
            let o = mha.forward(t, a, b, &m).unwrap();
            t.sum(o)
        },
        None,
    );
}

#[test]
fn mha_gradients_literal_mode() {
    let (mut store, mha) = mha_store(4, 2, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let xq = store.add("xq", rand_tensor(&mut rng, 3, 4));
    let m = Arc::new(rand_mask(&mut rng, 3, 3));
    check_grads(
        &store,
        |t| {
            *t = std::mem::replace(t, Tape::new(t.params())).with_mask_mode(MaskMode::Literal);
            let a = t.param(xq);
            let o = mha.forward(t, a, a, &m).unwrap();
            let o = t.relu(o);
            t.sum(o)
        },
        None,
    );
}

#[test]
fn elementary_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, 3, 4));
    let b = store.add("b", rand_tensor(&mut rng, 4, 5));
    let c = store.add("c", rand_tensor(&mut rng, 2, 4));
    let bias = store.add("bias", rand_tensor(&mut rng, 1, 5).reshape(vec![5]).unwrap());
    let g = store.add("g", rand_tensor(&mut rng, 1, 5).reshape(vec![5]).unwrap());
    let tab = store.add("tab", rand_tensor(&mut rng, 6, 5));
    check_grads(
        &store,
        |t| {
            let (a, b, c, bias, g, tab) = (t.param(a), t.param(b), t.param(c), t.param(bias), t.param(g), t.param(tab));
            let ab = t.matmul(a, b).unwrap();
            let ab = t.add_row(ab, bias).unwrap();
            let ln = t.layer_norm(ab, g, bias).unwrap();
            let r = t.relu(ln);
            let ca = t.matmul_bt(c, a).unwrap();
            let s = t.slice_cols(r, 1, 3).unwrap();
            let s2 = t.slice_cols(ca, 0, 1).unwrap();
            let rows = t.gather_rows(tab, &[5, 0, 5]).unwrap();
            let sum = t.add(r, rows).unwrap();
            let cat = t.concat_cols(&[s, sum]).unwrap();
            let cat = t.scale(cat, 0.7);
            let sm = t.masked_softmax(cat, None).unwrap();
            let rs = t.reshape(sm, vec![24]).unwrap();
            let sq = t.matmul_bt(s2, s2).unwrap();
            let l1 = t.sum(rs);
            let l2 = t.sum(sq);
            let l3 = t.sum(sm);
            let ce = t.cross_entropy_ls(cat, &[0, 7, 3], 0.1).unwrap();
            let x = t.add(l1, l2).unwrap();
            let x = t.add(x, ce).unwrap();
            let w = t.matmul(sm, sm);
            assert!(w.is_err());
            t.add(x, l3).unwrap()
        },
        None,
    );
}

#[test]
fn ctc_and_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let geom = ConvGeom {
        c_in: 1,
        c_out: 2,
        h_in: 7,
        w_in: 5,
    };
    let x = store.add("x", rand_tensor(&mut rng, 7, 5));
    let w = store.add("w", rand_tensor(&mut rng, 2, 9));
    let b = store.add("b", rand_tensor(&mut rng, 1, 2).reshape(vec![2]).unwrap());
    let geom2 = ConvGeom {
        c_in: 2,
        c_out: 3,
        h_in: 4,
        w_in: 3,
    };
    let w2 = store.add("w2", rand_tensor(&mut rng, 3, 18));
    let b2 = store.add("b2", rand_tensor(&mut rng, 1, 3).reshape(vec![3]).unwrap());
    let proj = store.add("proj", rand_tensor(&mut rng, 6, 4));
    check_grads(
        &store,
        |t| {
            let (x, w, b, w2, b2, p) = (t.param(x), t.param(w), t.param(b), t.param(w2), t.param(b2), t.param(proj));
            let h = t.conv2d(x, w, b, geom).unwrap();
            let h = t.relu(h);
            let h = t.conv2d(h, w2, b2, geom2).unwrap();
            assert_eq!(t.value(h).shape(), &[2, 6]);
            let logits = t.matmul(h, p).unwrap();
            t.ctc_loss(logits, &[1, 3]).unwrap()
        },
        None,
    );
}

#[test]
fn dropout_gradient_with_fixed_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, 4, 4));
    check_grads(
        &store,
        |t| {
            *t = std::mem::replace(t, Tape::new(t.params())).with_dropout(0.3, 99);
            let v = t.param(x);
            let d = t.dropout(v);
            let sm = t.masked_softmax(d, None).unwrap();
            let sq = t.matmul(sm, d).unwrap();
            t.sum(sq)
        },
        None,
    );
}

#[test]
fn dropout_is_identity_at_eval_and_seeded_in_training() {
    let store = ParamStore::new();
    let mut t = Tape::inference(&store);
    let x = t.constant(Tensor::matrix(1, 4, vec![1.0; 4]).unwrap());
    assert_eq!(t.dropout(x), x);
    let run = || {
        let mut t = Tape::new(&store).with_dropout(0.5, 3);
        let x = t.constant(Tensor::matrix(1, 64, vec![1.0; 64]).unwrap());
        let d = t.dropout(x);
        t.value(d).data().to_vec()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn sum_gradient_is_ones_and_backward_runs_once() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let mut t = Tape::new(&store);
    let v = t.param(x);
    let s = t.sum(v);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    assert!(matches!(t.backward(s), Err(crate::Error::BackwardTwice)));
    store.accumulate(&g);
    assert_eq!(store.get(x).grad.as_deref(), Some(&[1.0; 6][..]));
}

#[test]
fn sublayer_basics() {
    let ln = layer_norm(&Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
    assert!(ln.data().iter().all(|&v| v == 0.0));
    let sm = softmax(&Tensor::matrix(1, 5, vec![0.4; 5]).unwrap());
    assert!(sm.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let pe = sinusoidal_positional_encoding(3, 6).unwrap();
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
    assert!((pe.row(2)[2] - (2.0 / 10000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-15);
    assert!(sinusoidal_positional_encoding(0, 4).is_err());
}

fn ce_oracle(logits: &Tensor, targets: &[usize], eps: f64) -> f64 {
    let v = logits.cols();
    let mut total = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for (c, x) in row.iter().enumerate() {
            let q = eps / v as f64 + if c == y { 1.0 - eps } else { 0.0 };
            total -= q * (x.exp() / z).ln();
        }
    }
    total / targets.len() as f64
}

#[test]
fn label_smoothed_cross_entropy() {
    let store = ParamStore::new();
    let ce = |logits: Tensor, targets: &[usize], eps: f64| {
        let mut t = Tape::inference(&store);
        let l = t.constant(logits);
        let c = t.cross_entropy_ls(l, targets, eps)?;
        Ok::<f64, crate::Error>(t.value(c).item())
    };
    let perfect = Tensor::matrix(1, 4, vec![0.0, 60.0, 0.0, 0.0]).unwrap();
    assert!(ce(perfect, &[1], 0.0).unwrap() < 1e-20);
    let uniform = Tensor::matrix(2, 4, vec![0.3; 8]).unwrap();
    assert!((ce(uniform, &[0, 3], 0.1).unwrap() - 4f64.ln()).abs() < 1e-14);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let r = rand_tensor(&mut rng, 2, 4);
    let got = ce(r.clone(), &[2, 1], 0.1).unwrap();
    assert!((got - ce_oracle(&r, &[2, 1], 0.1)).abs() < 1e-12);
    assert!(matches!(ce(r, &[4, 0], 0.1), Err(crate::Error::TokenRange { id: 4, .. })));
}

#[test]
fn tape_ops_are_deterministic() {
    let (store, mha) = mha_store(8, 4, 18);
    let run = || {
        let mut t = Tape::new(&store).with_dropout(0.1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = t.constant(rand_tensor(&mut rng, 5, 8));
        let o = mha.forward(&mut t, x, x, &Arc::new(AttentionMask::full(5, 5))).unwrap();
        let o = t.dropout(o);
        let s = t.sum(o);
        let g = t.backward(s).unwrap();
        let bits: Vec<u64> = g.iter().flat_map(|(_, g)| g.iter().map(|v| v.to_bits())).collect();
        (t.value(o).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), bits)
    };
    assert_eq!(run(), run());
}

#[test]
fn row_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, 4, 3));
    let b = store.add("b", rand_tensor(&mut rng, 2, 3));
    let w = store.add("w", rand_tensor(&mut rng, 3, 3));
    check_grads(
        &store,
        |t| {
            let (a, b, w) = (t.param(a), t.param(b), t.param(w));
            let s = t.slice_rows(a, 1, 2).unwrap();
            let cat = t.concat_rows(&[b, s, a]).unwrap();
            let y = t.matmul(cat, w).unwrap();
            let y = t.masked_softmax(y, None).unwrap();
            let y = t.matmul_bt(y, cat).unwrap();
            assert!(t.slice_rows(a, 3, 2).is_err());
            t.sum(y)
        },
        None,
    );
}

#[test]
fn rewind_drops_nodes_and_param_cache() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let mut t = Tape::inference(&store);
    let c = t.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
    let mark = t.mark();
    let pv = t.param(p);
    let s = t.add(c, pv).unwrap();
    assert_eq!(t.value(s).data(), &[4.0, 6.0]);
    t.rewind(mark);
    assert_eq!(t.len(), mark);
    let pv = t.param(p);
    assert_eq!(t.value(pv).data(), &[1.0, 2.0]);
}
