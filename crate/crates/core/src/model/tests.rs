use proptest::prelude::*;

use super::*;
use crate::data::{render_scene_sized, ImageSample, SceneSpec, Size};
use crate::tensor::{Tape, Tensor};

fn tiny(seed: u64) -> ModelParams {
    ModelParams::init(&ModelConfig::tiny(), 7, seed).unwrap()
}

fn images(count: usize, size: usize, seed: u64) -> Vec<ImageSample> {
    (0..count)
        .map(|i| {
            let spec = SceneSpec::from_label((i * 5 + seed as usize) % 16, Size::ALL[i % 2], (i % 4) as u8);
            render_scene_sized(&spec, seed * 1000 + i as u64, size)
        })
        .collect()
}

fn refs(v: &[ImageSample]) -> Vec<&ImageSample> {
    v.iter().collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn encoder_emits_64_tokens_for_32px() {
    let p = ModelParams::init(&ModelConfig::default(), 7, 1).unwrap();
    let imgs = images(2, 32, 1);
    let emb = encode_image(&p, &refs(&imgs)).unwrap();
    assert_eq!(emb.shape(), &[2, 64, 64]);
    assert!(emb.is_finite());
}

#[test]
fn encoder_rejects_wrong_image_size() {
    let p = tiny(1);
    let imgs = images(1, 32, 1);
    assert!(matches!(encode_image(&p, &refs(&imgs)), Err(crate::Error::Tensor(_))));
    let mut cfg = ModelConfig::tiny();
    cfg.image_size = 18;
    assert!(ModelParams::init(&cfg, 7, 1).is_err());
}

#[test]
fn encoder_is_batch_equivariant_and_matches_loop() {
    let p = tiny(2);
    let imgs = images(4, 16, 2);
    let batch = encode_image(&p, &refs(&imgs)).unwrap();
    let per = batch.len() / 4;
    for (i, img) in imgs.iter().enumerate() {
        let one = encode_image(&p, &[img]).unwrap();
        assert_close(&batch.data()[i * per..(i + 1) * per], one.data(), 1e-12);
    }
    let perm = [2, 0, 3, 1];
    let permuted: Vec<&ImageSample> = perm.iter().map(|&i| &imgs[i]).collect();
    let out = encode_image(&p, &permuted).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_close(&out.data()[j * per..(j + 1) * per], &batch.data()[i * per..(i + 1) * per], 1e-12);
    }
}

#[test]
fn decode_soft_shape_and_image_dependence() {
    for seed in 0..5 {
        let p = tiny(seed);
        let imgs = images(2, 16, seed);
        let emb = encode_image(&p, &refs(&imgs)).unwrap();
        let logits = decode_soft(&p, &emb).unwrap();
        assert_eq!(logits.shape(), &[2, 4, 16]);
        assert!(logits.is_finite());
        let half = logits.len() / 2;
        assert_ne!(&logits.data()[..half], &logits.data()[half..]);
    }
}

#[test]
fn decode_soft_is_causal_in_the_prompt() {
    let p = tiny(3);
    let imgs = images(1, 16, 3);
    let emb = encode_image(&p, &refs(&imgs)).unwrap();
    let base = decode_soft(&p, &emb).unwrap();
    for j in 0..4 {
        let mut q = p.clone();
        let prompt = q.by_name_mut("prompt").unwrap();
        prompt.data_mut()[j * 8..(j + 1) * 8].iter_mut().for_each(|v| *v += 0.7);
        let out = decode_soft(&q, &emb).unwrap();
        for i in 0..4 {
            let (a, b) = (&base.data()[i * 16..(i + 1) * 16], &out.data()[i * 16..(i + 1) * 16]);
            if i < j {
                assert_eq!(a, b, "position {i} moved when prompt {j} changed");
            } else if i == j {
                assert_ne!(a, b);
            }
        }
    }
}

#[test]
fn bos_prefix_keeps_n_outputs() {
    let mut cfg = ModelConfig::tiny();
    cfg.bos_prefix = true;
    let p = ModelParams::init(&cfg, 7, 4).unwrap();
    let imgs = images(3, 16, 4);
    let emb = encode_image(&p, &refs(&imgs)).unwrap();
    assert_eq!(decode_soft(&p, &emb).unwrap().shape(), &[3, 4, 16]);
    let ids = sample_no_repetition(&p, &emb, 4).unwrap();
    assert!(ids.iter().all(|s| s.len() == 4));
}

#[test]
fn soft_bottleneck_delta_and_uniform_rows() {
    let e = Tensor::from_fn(&[5, 3], |i| i as f64 * 0.5 - 2.0);
    let mut logits = Tensor::zeros(&[2, 5]);
    logits.data_mut()[3] = 1e4;
    let (soft, pooled) = soft_bottleneck(&logits, &e).unwrap();
    assert_eq!(soft.row(0), e.row(3));
    let col_mean: Vec<f64> = (0..3).map(|c| (0..5).map(|r| e.get2(r, c)).sum::<f64>() / 5.0).collect();
    assert_close(soft.row(1), &col_mean, 1e-12);
    let want: Vec<f64> = (0..3).map(|c| (e.get2(3, c) + col_mean[c]) / 2.0).collect();
    assert_close(pooled.data(), &want, 1e-12);
    assert_eq!(pooled.shape(), &[3]);
}

#[test]
fn soft_bottleneck_matches_dense_reference() {
    let mut r = crate::rng::rng(11);
    let logits = Tensor::randn(&[4, 7], 2.0, &mut r);
    let e = Tensor::randn(&[7, 5], 1.0, &mut r);
    let (soft, pooled) = soft_bottleneck(&logits, &e).unwrap();
    let mut want_pooled = [0.0; 5];
    for i in 0..4 {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for c in 0..5 {
            let s: f64 = (0..7).map(|t| (row[t] - m).exp() / z * e.get2(t, c)).sum();
            assert!((s - soft.get2(i, c)).abs() < 1e-12);
            want_pooled[c] += s / 4.0;
        }
    }
    assert_close(pooled.data(), &want_pooled, 1e-12);
}

#[test]
fn hard_decode_examples() {
    let l = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 1.0, 5.0, 2.0], vec![0.0, 0.0, 0.0, 9.0, 1.0, 2.0]]).unwrap();
    assert_eq!(hard_decode(&l, &[0, 1, 2]), vec![4, 3]);

    let mut tie = vec![0.0; 12];
    tie[5] = 3.0;
    tie[9] = 3.0;
    let l = Tensor::from_rows(&[tie]).unwrap();
    assert_eq!(hard_decode(&l, &[0, 1, 2]), vec![5]);

    // PAD holds the maximum; the best non-special id is the highest-scoring word
    let l = Tensor::from_rows(&[vec![10.0, 0.0, 0.0, 1.0, 3.0, 2.0]]).unwrap();
    let oracle = (3..6).max_by(|&a, &b| l.get2(0, a).total_cmp(&l.get2(0, b))).unwrap();
    assert_eq!(hard_decode(&l, &[0, 1, 2]), vec![oracle]);
    assert_eq!(oracle, 4);
}

proptest! {
    #[test]
    fn hard_decode_is_argmax_of_softmax(data in prop::collection::vec(-5.0f64..5.0, 24)) {
        let logits = Tensor::new(vec![3, 8], data).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone());
        let s = tape.softmax(x).unwrap();
        let probs = tape.value(s).clone();
        prop_assert_eq!(hard_decode(&logits, &[0, 1, 2]), hard_decode(&probs, &[0, 1, 2]));
    }
}

#[test]
fn classify_examples() {
    let mut p = tiny(5);
    p.by_name_mut("head.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let bias = Tensor::from_fn(&[16], |i| i as f64 - 3.0);
    *p.by_name_mut("head.b").unwrap() = bias.clone();
    let x = Tensor::from_fn(&[8], |i| i as f64);
    assert_eq!(classify(&p, &x).unwrap().data(), bias.data());

    let p = tiny(6);
    let zero = classify(&p, &Tensor::zeros(&[8])).unwrap();
    let c1 = classify(&p, &x).unwrap();
    let x2 = Tensor::from_fn(&[8], |i| 2.0 * i as f64);
    let c2 = classify(&p, &x2).unwrap();
    for k in 0..16 {
        let lhs = c2.data()[k] - zero.data()[k];
        let rhs = 2.0 * (c1.data()[k] - zero.data()[k]);
        assert!((lhs - rhs).abs() < 1e-12);
    }
    let (w, b) = (p.head_weight(), p.head_bias());
    for k in 0..16 {
        let dense: f64 = (0..8).map(|j| w.get2(k, j) * x.data()[j]).sum::<f64>() + b.data()[k];
        assert!((dense - c1.data()[k]).abs() < 1e-12);
    }
}

#[test]
fn hard_path_hand_trace() {
    // two positions, V=4 with id 0 special, d=2
    let logits = Tensor::from_rows(&[vec![9.0, 1.0, 3.0, 2.0], vec![0.0, 4.0, 4.0, -1.0]]).unwrap();
    let ids = hard_decode(&logits, &[0]);
    assert_eq!(ids, vec![2, 1]);
    let e = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![3.0, -1.0], vec![5.0, 5.0]]).unwrap();
    let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -1.0], vec![0.0, 2.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
    let mut t = Tape::new();
    let (ev, wv, bv) = (t.constant(e), t.constant(w), t.constant(b.reshape(&[3]).unwrap()));
    let words = t.embedding_lookup(ev, &ids).unwrap();
    let pooled = t.mean_axis(words, 0).unwrap();
    let y = t.matmul_nt(pooled, wv).unwrap();
    let y = t.add_row(y, bv).unwrap();
    // pooled = (2, 0.5): [2 + .1, 1 - .5 + .2, 1 + .3]
    assert_close(t.value(y).data(), &[2.1, 0.7, 1.3], 1e-15);
}

#[test]
fn hard_pooling_ignores_token_order() {
    let p = tiny(7);
    let a = classify_tokens(&p, &[vec![3, 9, 4, 12]]).unwrap();
    let b = classify_tokens(&p, &[vec![12, 4, 9, 3]]).unwrap();
    assert_close(a.data(), b.data(), 1e-12);
}

#[test]
fn hard_and_soft_agree_when_saturated() {
    let mut p = tiny(8);
    let e = p.by_name_mut("dec.embed").unwrap();
    for (i, v) in e.data_mut().iter_mut().enumerate() {
        *v = if i < 3 * 8 { 0.0 } else { *v * 2000.0 };
    }
    let w = p.by_name_mut("head.w").unwrap();
    w.data_mut().iter_mut().for_each(|v| *v *= 1e-3);
    let imgs = images(3, 16, 8);
    let (out, soft) = forward_soft(&p, &refs(&imgs)).unwrap();
    let probs_one_hot = out.logits.data().chunks(16).all(|row| {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        (1.0 / z - 1.0).abs() < 1e-9
    });
    assert!(probs_one_hot);
    let (hard, tokens) = forward_hard(&p, &refs(&imgs)).unwrap();
    assert_eq!(tokens, out.hard_tokens);
    assert_close(hard.data(), soft.data(), 1e-6);
}

#[test]
fn no_repetition_with_flat_logits_is_ascending() {
    let cfg = ModelConfig { vocab_size: 6, n_prompt: 3, max_positions: 6, ..ModelConfig::tiny() };
    let mut p = ModelParams::init(&cfg, 7, 9).unwrap();
    p.by_name_mut("dec.embed").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let imgs = images(2, 16, 9);
    let emb = encode_image(&p, &refs(&imgs)).unwrap();
    assert_eq!(sample_no_repetition(&p, &emb, 3).unwrap(), vec![vec![3, 4, 5]; 2]);
    assert!(matches!(sample_no_repetition(&p, &emb, 4), Err(crate::Error::Argument(_))));
}

#[test]
fn no_repetition_matches_one_pass_trace() {
    // causality lets one pass over [prompt, e(t0), e(t1)] replay all three steps
    let p = tiny(10);
    let imgs = images(1, 16, 10);
    let emb = encode_image(&p, &refs(&imgs)).unwrap();
    let ids = sample_no_repetition(&p, &emb, 3).unwrap().remove(0);

    let mut g = Graph::inference(&p);
    let (mem, _) = image_memory(&mut g, &emb).unwrap();
    let prompt = g.tape.constant(p.soft_prompt().clone());
    let e = g.tape.constant(p.word_embeddings().clone());
    let fed = g.tape.embedding_lookup(e, &ids[..2]).unwrap();
    let x = g.tape.concat(&[prompt, fed]).unwrap();
    let pos = positions(&mut g, 6, 1).unwrap();
    let x = g.tape.add(x, pos).unwrap();
    let logits = decoder(&mut g, x, 1, Some(mem)).unwrap();
    let lv = g.tape.value(logits);
    let mut seen: Vec<usize> = Vec::new();
    for (step, &id) in ids.iter().enumerate() {
        let row = lv.row(3 + step);
        let mut best = None;
        for t in 3..16 {
            if seen.contains(&t) {
                continue;
            }
            if best.is_none_or(|b: usize| row[t] > row[b]) {
                best = Some(t);
            }
        }
        assert_eq!(best, Some(id), "step {step}");
        seen.push(id);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn no_repetition_never_repeats(seed in 0u64..1000) {
        let p = tiny(seed);
        let imgs = images(3, 16, seed);
        let emb = encode_image(&p, &refs(&imgs)).unwrap();
        for seq in sample_no_repetition(&p, &emb, 4).unwrap() {
            let mut s = seq.clone();
            s.sort_unstable();
            s.dedup();
            prop_assert_eq!(s.len(), 4);
            prop_assert!(seq.iter().all(|&t| t >= 3));
        }
    }
}

#[test]
fn end_to_end_gradient_of_classification_loss() {
    let p = tiny(12);
    let imgs = images(1, 16, 12);
    let emb = encode_image(&p, &refs(&imgs)).unwrap();
    let label = imgs[0].label;
    let loss = |params: &ModelParams| -> crate::Result<f64> {
        let mut g = Graph::inference(params);
        let pass = soft_pass(&mut g, &emb)?;
        let l = g.tape.cross_entropy(pass.class_logits, &[label])?;
        Ok(g.tape.value(l).item())
    };
    let mut g = Graph::new(&p, &[ParamGroup::Prompt, ParamGroup::Head]);
    let pass = soft_pass(&mut g, &emb).unwrap();
    let l = g.tape.cross_entropy(pass.class_logits, &[label]).unwrap();
    g.tape.backward(l).unwrap();
    assert!(g.grads(ParamGroup::Backbone).is_empty());
    let mut worst: f64 = 0.0;
    let h = 1e-4;
    for group in [ParamGroup::Prompt, ParamGroup::Head] {
        let grads = g.grads(group);
        assert!(!grads.is_empty());
        for (idx, grad) in grads {
            for k in 0..grad.len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.params_mut()[idx].value.data_mut()[k] += h;
                minus.params_mut()[idx].value.data_mut()[k] -= h;
                let num = (loss(&plus).unwrap() - loss(&minus).unwrap()) / (2.0 * h);
                let a = grad.data()[k];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-12));
            }
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}
