mod common;

use cassnat::alignment_map::trigger_masks;
use cassnat::ctc_lattice::viterbi_align;
use cassnat::model::{features_tensor, joint_loss, AtModel, AtSession, CassNat, Frontend, ModelConfig, SOS};
use cassnat::numerics::{Grads, ParamStore, Tape, Tensor};
use common::{fd_check, rng, sample_coords, toy_utterances};
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_enc: 1,
        n_self: 1,
        n_mix: 1,
        n_at_dec: 1,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab: 4,
        d_feat: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn random_hidden(frames: usize, width: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::matrix(frames, width, (0..frames * width).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_labels(frames: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    loop {
        let l: Vec<usize> = (0..frames).map(|_| r.random_range(0..classes)).collect();
        if l.iter().any(|&x| x != 0) {
            return l;
        }
    }
}

fn extract(model: &CassNat, hidden: &Tensor, labels: &[usize]) -> Tensor {
    let masks = trigger_masks(labels, model.config.extend_last).unwrap();
    let mut tape = Tape::inference(&model.params).with_mask_mode(model.config.mask_mode);
    let h = tape.constant(hidden.clone());
    let mem = model.extractor.project(&mut tape, h).unwrap();
    let out = model.extractor.forward(&mut tape, &mem, &masks.masks).unwrap();
    tape.value(out).clone()
}

#[test]
fn extractor_rows_ignore_frames_outside_their_span() {
    for (heads, ffn, extend_last) in [(1, true, false), (2, true, false), (2, false, false), (4, true, true)] {
        let cfg = ModelConfig {
            heads,
            extractor_ffn: ffn,
            extend_last,
            ..tiny()
        };
        let model = CassNat::new(cfg, 7).unwrap();
        for trial in 0..20u64 {
            let frames = 3 + (trial as usize % 9);
            let labels = random_labels(frames, 5, trial);
            let masks = trigger_masks(&labels, extend_last).unwrap();
            let hidden = random_hidden(frames, 8, 100 + trial);
            let base = extract(&model, &hidden, &labels);
            for u in 0..masks.token_count() {
                let span = masks.span(u);
                let mut occluded = hidden.clone();
                for t in (0..frames).filter(|t| !span.contains(t)) {
                    for c in 0..8 {
                        occluded.data_mut()[t * 8 + c] = if trial % 2 == 0 { 0.0 } else { 1e3 };
                    }
                }
                let out = extract(&model, &occluded, &labels);
                assert_eq!(out.row(u), base.row(u), "heads {heads} ffn {ffn} trial {trial} row {u}");
                // and the row does see its own span
                if !span.is_empty() {
                    let mut poked = hidden.clone();
                    poked.data_mut()[span.start * 8] += 1.0;
                    assert_ne!(extract(&model, &poked, &labels).row(u), base.row(u));
                }
            }
        }
    }
}

#[test]
fn at_decoder_is_prefix_causal() {
    let model = AtModel::new(tiny(), 3).unwrap();
    let utt = &toy_utterances(1, 4, 4, 1)[0];
    let feats = features_tensor(utt).unwrap();
    let mut s = AtSession::new(&model, &feats).unwrap();
    let mut r = rng(4);
    let full: Vec<usize> = std::iter::once(SOS).chain((0..6).map(|_| r.random_range(1..=4))).collect();
    let all = s.log_probs(&full).unwrap();
    for n in 1..full.len() {
        let part = s.log_probs(&full[..n]).unwrap();
        for i in 0..n {
            for (a, b) in part.row(i).iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-12, "prefix {n} row {i}");
            }
        }
    }
    // changing a later token leaves earlier rows alone
    let mut other = full.clone();
    other[4] = if other[4] == 1 { 2 } else { 1 };
    let alt = s.log_probs(&other).unwrap();
    for i in 0..4 {
        for (a, b) in alt.row(i).iter().zip(all.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_ne!(alt.row(4), all.row(4));
}

#[test]
fn teacher_forced_score_is_sum_of_steps() {
    let model = AtModel::new(tiny(), 5).unwrap();
    let utt = &toy_utterances(1, 4, 4, 2)[0];
    let feats = features_tensor(utt).unwrap();
    let mut s = AtSession::new(&model, &feats).unwrap();
    let tokens = [3, 1, 4, 4];
    let mut prefix = vec![SOS];
    let mut total = 0.0;
    for &t in tokens.iter().chain(std::iter::once(&SOS)) {
        total += s.next_log_probs(&prefix).unwrap()[t];
        prefix.push(t);
    }
    assert!((s.score(&tokens).unwrap() - total).abs() < 1e-10);
}

fn nat_logits(model: &CassNat, feats: &Tensor, valid_raw: usize, emb: &Tensor) -> Tensor {
    let mut tape = Tape::inference(&model.params);
    let enc = model.encode(&mut tape, feats, valid_raw).unwrap();
    let e = tape.constant(emb.clone());
    let out = model.decode_nat(&mut tape, e, &enc).unwrap();
    tape.value(out).clone()
}

#[test]
fn nat_decoder_positions_see_each_other() {
    let model = CassNat::new(tiny(), 9).unwrap();
    let utt = &toy_utterances(1, 4, 4, 3)[0];
    let feats = features_tensor(utt).unwrap();
    let emb = random_hidden(5, 8, 1);
    let base = nat_logits(&model, &feats, feats.rows(), &emb);
    assert_eq!(base.shape(), &[5, 5]);
    for src in 0..5 {
        let mut e = emb.clone();
        for c in 0..8 {
            // a constant shift would vanish under layer norm
            e.data_mut()[src * 8 + c] += 0.2 * c as f64;
        }
        let out = nat_logits(&model, &feats, feats.rows(), &e);
        for u in (0..5).filter(|&u| u != src) {
            assert_ne!(out.row(u), base.row(u), "position {u} ignores {src}");
        }
    }
}

/// The decoder is one pass over all positions: its tape grows by the same
/// number of nodes whatever U' is, while greedy AT decoding grows per token.
#[test]
fn nat_decoding_is_a_single_pass() {
    let model = CassNat::new(tiny(), 9).unwrap();
    let feats = random_hidden(48, 4, 6);
    let mut tape = Tape::inference(&model.params);
    let enc = model.encode(&mut tape, &feats, feats.rows()).unwrap();
    let frames = enc.valid_frames();
    let mut sizes = Vec::new();
    for tokens in [1usize, 2, 5, frames / 2] {
        let mark = tape.mark();
        let labels: Vec<usize> = (0..frames).map(|t| if t % 2 == 0 && t / 2 < tokens { 1 + t % 3 } else { 0 }).collect();
        let masks = trigger_masks(&labels, false).unwrap();
        assert_eq!(masks.token_count(), tokens);
        let emb = model.extract_token_embeddings(&mut tape, &enc, &masks).unwrap();
        let out = model.decode_nat(&mut tape, emb, &enc).unwrap();
        assert_eq!(tape.value(out).rows(), tokens);
        sizes.push(tape.len() - mark);
        tape.rewind(mark);
    }
    assert!(sizes.windows(2).all(|w| w[0] == w[1]), "{sizes:?}");
}

#[test]
fn padding_frames_do_not_change_outputs() {
    let model = CassNat::new(tiny(), 11).unwrap();
    let utt = &toy_utterances(1, 4, 4, 5)[0];
    let valid_raw = (utt.n_frames() / 4) * 4;
    let valid = features_tensor(utt).unwrap().data()[..valid_raw * 4].to_vec();
    let emb = random_hidden(3, 8, 2);
    let padded = |seed: u64| {
        let mut r = rng(seed);
        let mut data = valid.clone();
        data.extend((0..12 * 4).map(|_| r.random_range(-5.0..5.0)));
        Tensor::matrix(valid_raw + 12, 4, data).unwrap()
    };
    let a = nat_logits(&model, &padded(1), valid_raw, &emb);
    let b = nat_logits(&model, &padded(2), valid_raw, &emb);
    assert_eq!(a, b);
    // same as no padding at all
    let bare = Tensor::matrix(valid_raw, 4, valid.clone()).unwrap();
    let c = nat_logits(&model, &bare, valid_raw, &emb);
    for (x, y) in a.data().iter().zip(c.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    // the grid only covers real frames
    let mut tape = Tape::inference(&model.params);
    let enc = model.encode(&mut tape, &padded(3), valid_raw).unwrap();
    assert_eq!(enc.frames(), (valid_raw + 12).div_ceil(4));
    assert_eq!(enc.grid(&tape).unwrap().frames(), valid_raw / 4);
}

#[test]
fn frontends_agree_on_shapes() {
    for t in [4, 7, 8, 9, 16, 33] {
        let mut rows = None;
        for frontend in [Frontend::Stack, Frontend::Conv] {
            let model = CassNat::new(ModelConfig { frontend, ..tiny() }, 1).unwrap();
            let feats = random_hidden(t, 4, t as u64);
            let mut tape = Tape::inference(&model.params);
            let enc = model.encode(&mut tape, &feats, t).unwrap();
            let shape = tape.value(enc.hidden).shape().to_vec();
            assert_eq!(shape, vec![t.div_ceil(4), 8]);
            assert_eq!(tape.value(enc.ctc_logits).shape(), &[t.div_ceil(4), 5]);
            rows.get_or_insert(shape.clone());
            assert_eq!(rows.as_ref(), Some(&shape));
        }
    }
}

fn batch_alignments(model: &CassNat, batch: &[cassnat::synth_data::Utterance]) -> Vec<Option<Vec<usize>>> {
    batch
        .iter()
        .map(|u| {
            let feats = features_tensor(u).unwrap();
            let mut tape = Tape::inference(&model.params);
            let enc = model.encode(&mut tape, &feats, feats.rows()).unwrap();
            Some(viterbi_align(&enc.grid(&tape).unwrap(), &u.tokens).unwrap().labels)
        })
        .collect()
}

fn joint(model: &CassNat, batch: &[cassnat::synth_data::Utterance], fixed: &[Option<Vec<usize>>]) -> (f64, Grads) {
    let refs: Vec<_> = batch.iter().collect();
    let mut tape = Tape::new(&model.params);
    let loss = joint_loss(model, &mut tape, &refs, Some(fixed)).unwrap();
    let v = tape.value(loss.total).item();
    (v, tape.backward(loss.total).unwrap())
}

fn with_params(model: &CassNat, params: &ParamStore) -> CassNat {
    CassNat {
        params: params.clone(),
        ..model.clone()
    }
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    for frontend in [Frontend::Stack, Frontend::Conv] {
        let model = CassNat::new(ModelConfig { frontend, ..tiny() }, 21).unwrap();
        let batch = toy_utterances(2, 4, 4, 8);
        let fixed = batch_alignments(&model, &batch);
        let (_, grads) = joint(&model, &batch, &fixed);
        let coords = sample_coords(&model.params, 20, 3);
        let worst = fd_check(&model.params, &grads, &coords, |p| joint(&with_params(&model, p), &batch, &fixed).0);
        assert!(worst < 1e-4, "{frontend}: rel err {worst}");
    }
}

fn flat(store: &ParamStore, g: &Grads) -> Vec<f64> {
    store
        .ids()
        .flat_map(|id| g.get(id).map_or_else(|| vec![0.0; store.get(id).len()], <[f64]>::to_vec))
        .collect()
}

fn with_ratio(model: &CassNat, ratio: f64) -> CassNat {
    let mut m = model.clone();
    m.config.task_ratio = ratio;
    m
}

#[test]
fn task_ratio_extremes() {
    let model = CassNat::new(tiny(), 4).unwrap();
    let batch = toy_utterances(2, 4, 4, 9);
    let fixed = batch_alignments(&model, &batch);
    let refs: Vec<_> = batch.iter().collect();

    // λ = 0: the total is the decoder term and the CTC head gets nothing
    let m0 = with_ratio(&model, 0.0);
    let mut tape = Tape::new(&m0.params);
    let l = joint_loss(&m0, &mut tape, &refs, Some(&fixed)).unwrap();
    assert!((tape.value(l.total).item() - l.primary).abs() < 1e-9);
    let g0 = tape.backward(l.total).unwrap();
    for id in m0.params.ids().filter(|&id| m0.params.name(id).starts_with("enc.ctc")) {
        assert!(g0.get(id).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }

    // large λ: the gradient lines up with the CTC gradient
    let v0 = flat(&model.params, &g0);
    let v1 = flat(&model.params, &joint(&with_ratio(&model, 1.0), &batch, &fixed).1);
    let ctc: Vec<f64> = v1.iter().zip(&v0).map(|(a, b)| a - b).collect();
    let big = flat(&model.params, &joint(&with_ratio(&model, 1e6), &batch, &fixed).1);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = big.iter().zip(&ctc).map(|(a, b)| a * b).sum::<f64>() / (norm(&big) * norm(&ctc));
    assert!(cos > 0.999_999, "cosine {cos}");
    assert!(norm(&big) / norm(&v0) > 1e4);
}

#[test]
fn oracle_alignment_gives_reference_length() {
    let model = CassNat::new(tiny(), 2).unwrap();
    for u in toy_utterances(10, 4, 4, 12) {
        let feats = features_tensor(&u).unwrap();
        let mut tape = Tape::inference(&model.params);
        let enc = model.encode(&mut tape, &feats, feats.rows()).unwrap();
        let ali = viterbi_align(&enc.grid(&tape).unwrap(), &u.tokens).unwrap();
        let masks = trigger_masks(&ali.labels, false).unwrap();
        assert_eq!(masks.tokens, u.tokens);
        let emb = model.extract_token_embeddings(&mut tape, &enc, &masks).unwrap();
        let out = model.decode_nat(&mut tape, emb, &enc).unwrap();
        assert_eq!(tape.value(out).rows(), u.tokens.len());
    }
}

#[test]
fn mask_spans_cover_token_frames() {
    let labels = [0, 1, 1, 0, 2, 0, 0, 3, 0];
    let m = trigger_masks(&labels, false).unwrap();
    let spans: Vec<_> = (0..3).map(|u| m.span(u)).collect();
    assert_eq!(spans, vec![0..2, 2..5, 5..8]);
    let ext = trigger_masks(&labels, true).unwrap();
    assert_eq!(ext.span(2), 5..9);
}
