//! Captioning warm-up for the backbone: teacher-forced next-word prediction
//! on short attribute captions of the synthetic scenes.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::TrainConfig;
use super::optim::Adam;
use crate::data::{checksum_of, Color, Dataset, SceneSpec, Shape, Size, Vocabulary, BOS, PAD};
use crate::error::{Error, Result};
use crate::model::{decoder, encoder, positions, Graph, ModelParams, ParamGroup};
use crate::rng::{derive, rng};
use crate::tensor::{Tensor, Var};

/// Decoder input length: `<bos>` plus at most five words.
pub const CAPTION_INPUT_LEN: usize = 6;

// Two caption styles. A naming caption is the shape word alone; a
// descriptive caption lists attributes in a fixed order, each with its own
// inclusion probability, and may end in a distractor word. Greedy decoding
// follows the more likely naming style and so never mentions the colour.
const P_NAMING: f64 = 0.6;
const CAPTION_ORDER: [(Attribute, f64); 4] = [
    (Attribute::Position, 0.9),
    (Attribute::Size, 0.6),
    (Attribute::Color, 0.5),
    (Attribute::Shape, 0.35),
];
const P_DISTRACTOR: f64 = 0.1;

/// Captions drawn per image and step; one of them is read without the image.
const CAPTIONS_PER_IMAGE: usize = 4;

#[derive(Clone, Copy)]
enum Attribute {
    Position,
    Size,
    Color,
    Shape,
}

impl Attribute {
    fn word(self, spec: &SceneSpec) -> &'static str {
        match self {
            Attribute::Position => spec.position_word(),
            Attribute::Size => spec.size.word(),
            Attribute::Color => spec.color.word(),
            Attribute::Shape => spec.shape.word(),
        }
    }
}

fn attribute_words() -> Vec<&'static str> {
    Shape::ALL
        .iter()
        .map(|s| s.word())
        .chain(Color::ALL.iter().map(|c| c.word()))
        .chain(Size::ALL.iter().map(|s| s.word()))
        .chain(crate::data::POSITION_WORDS)
        .collect()
}

/// Ids that are neither special nor attribute words.
pub fn distractor_ids(vocab: &Vocabulary) -> Vec<usize> {
    let attrs = attribute_words();
    (crate::data::NUM_SPECIAL..vocab.len()).filter(|&id| !attrs.contains(&vocab.token(id))).collect()
}

fn attribute_id(vocab: &Vocabulary, a: Attribute, spec: &SceneSpec) -> usize {
    vocab.id(a.word(spec)).expect("attribute words are in the vocabulary")
}

/// A random caption for `spec`: either the shape word alone, or a subset of
/// its attribute words in the fixed order position, size, colour, shape,
/// sometimes followed by one distractor word. No `<bos>`/`<pad>`.
pub fn attribute_caption(spec: &SceneSpec, vocab: &Vocabulary, distractors: &[usize], r: &mut impl Rng) -> Vec<usize> {
    if r.random::<f64>() < P_NAMING {
        return vec![attribute_id(vocab, Attribute::Shape, spec)];
    }
    let mut words = Vec::with_capacity(5);
    for (a, p) in CAPTION_ORDER {
        if r.random::<f64>() < p {
            words.push(attribute_id(vocab, a, spec));
        }
    }
    if !distractors.is_empty() && r.random::<f64>() < P_DISTRACTOR {
        words.push(distractors[r.random_range(0..distractors.len())]);
    }
    words
}

fn descriptive_next(ids: &[usize], prefix: &[usize], vocab_len: usize, distractors: &[usize]) -> Vec<f64> {
    let mut q = vec![0.0; vocab_len];
    let next_slot = match prefix.last() {
        None => 0,
        Some(w) => match ids.iter().position(|id| id == w) {
            Some(k) => k + 1,
            None => {
                q[PAD] = 1.0;
                return q;
            }
        },
    };
    let mut rest = 1.0;
    for (k, &(_, p)) in CAPTION_ORDER.iter().enumerate().skip(next_slot) {
        q[ids[k]] += rest * p;
        rest *= 1.0 - p;
    }
    if distractors.is_empty() {
        q[PAD] += rest;
    } else {
        let each = rest * P_DISTRACTOR / distractors.len() as f64;
        for &d in distractors {
            q[d] += each;
        }
        q[PAD] += rest * (1.0 - P_DISTRACTOR);
    }
    q
}

/// Distribution of the word following `prefix` (a prefix of a caption of
/// `spec` from [`attribute_caption`]) under the caption process, mixing the
/// two styles by their posterior given the prefix.
pub fn next_word_distribution(spec: &SceneSpec, prefix: &[usize], vocab: &Vocabulary, distractors: &[usize]) -> Vec<f64> {
    let ids: Vec<usize> = CAPTION_ORDER.iter().map(|&(a, _)| attribute_id(vocab, a, spec)).collect();
    let shape = attribute_id(vocab, Attribute::Shape, spec);
    let mut descriptive = 1.0 - P_NAMING;
    for i in 0..prefix.len() {
        descriptive *= descriptive_next(&ids, &prefix[..i], vocab.len(), distractors)[prefix[i]];
    }
    let naming = match prefix {
        [] => P_NAMING,
        [w] if *w == shape => P_NAMING,
        _ => 0.0,
    };
    let mut q = descriptive_next(&ids, prefix, vocab.len(), distractors);
    q.iter_mut().for_each(|v| *v *= descriptive);
    q[if prefix.is_empty() { shape } else { PAD }] += naming;
    let z = descriptive + naming;
    q.iter_mut().for_each(|v| *v /= z);
    q
}

/// Teacher-forced decoder inputs for one caption (`<bos>`, words, `<pad>`
/// filler) and the number of rows that carry a target: every word and the
/// terminating `<pad>`.
pub(super) fn teacher_forcing(words: &[usize]) -> (Vec<usize>, usize) {
    let mut seq = vec![BOS];
    seq.extend_from_slice(words);
    let inputs = (0..CAPTION_INPUT_LEN).map(|i| seq.get(i).copied().unwrap_or(PAD)).collect();
    (inputs, words.len() + 1)
}

/// Caption loss against the expected next-word distributions rather than
/// the sampled next words; same optimum, far less label noise.
fn caption_loss_part(
    g: &mut Graph,
    captions: &[(&SceneSpec, Vec<usize>)],
    memory: Option<Var>,
    vocab: &Vocabulary,
    distractors: &[usize],
) -> Result<(Var, usize)> {
    let b = captions.len();
    let mut ids = Vec::with_capacity(b * CAPTION_INPUT_LEN);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, (spec, words)) in captions.iter().enumerate() {
        let (inputs, n) = teacher_forcing(words);
        ids.extend(inputs);
        for i in 0..n {
            rows.push(s * CAPTION_INPUT_LEN + i);
            targets.extend(next_word_distribution(spec, &words[..i], vocab, distractors));
        }
    }
    let e = g.p(g.params().layout.embed);
    let x = g.tape.embedding_lookup(e, &ids)?;
    let pos = positions(g, CAPTION_INPUT_LEN, b)?;
    let x = g.tape.add(x, pos)?;
    let logits = decoder(g, x, b, memory)?;
    let picked = g.tape.embedding_lookup(logits, &rows)?;
    let targets = Tensor::new(vec![rows.len(), vocab.len()], targets)?;
    Ok((g.tape.soft_cross_entropy(picked, &targets)?, rows.len()))
}

/// A shuffled epoch order in which consecutive samples cycle through the
/// classes, so every batch covers as many classes as it can.
pub(super) fn interleaved_order(dataset: &Dataset, r: &mut impl Rng) -> Vec<usize> {
    let classes = dataset.samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    for members in &mut by_class {
        members.shuffle(r);
    }
    let rounds = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(dataset.len());
    let mut cycle: Vec<usize> = (0..classes).collect();
    for round in 0..rounds {
        cycle.shuffle(r);
        order.extend(cycle.iter().filter_map(|&c| by_class[c].get(round).copied()));
    }
    order
}

/// Trains encoder, decoder and word embeddings for `cfg.warmup_epochs`
/// epochs, then freezes them. Returns the mean caption loss of each epoch.
pub fn warmup_pretrain(params: &mut ModelParams, dataset: &Dataset, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Argument("warm-up dataset is empty".into()));
    }
    if vocab.len() != params.config().vocab_size || checksum_of(params.vocab_hash()) != dataset.vocab_checksum {
        return Err(Error::Mismatch("warm-up vocabulary does not match the model or dataset".into()));
    }
    let distractors = distractor_ids(vocab);
    let mut opt = Adam::new(cfg.warmup_lr, params);
    let mut epoch_losses = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 0..cfg.warmup_epochs {
        let epoch_seed = derive(cfg.seed, 0x5741_0000 + epoch as u64);
        let order = interleaved_order(dataset, &mut rng(epoch_seed));
        let (mut sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.warmup_batch_size) {
            // several captions per image; the last one of each image is read without it
            let mut grounded = Vec::new();
            let mut text_only = Vec::new();
            for (k, &i) in batch.iter().enumerate() {
                for j in 0..CAPTIONS_PER_IMAGE {
                    let mut r = rng(derive(epoch_seed, (i * CAPTIONS_PER_IMAGE + j) as u64));
                    let spec = &dataset.samples[i].spec;
                    let cap = attribute_caption(spec, vocab, &distractors, &mut r);
                    if j + 1 == CAPTIONS_PER_IMAGE {
                        text_only.push((spec, cap));
                    } else {
                        grounded.push((k, (spec, cap)));
                    }
                }
            }

            let mut g = Graph::new(params, &[ParamGroup::Backbone]);
            let images: Vec<_> = batch.iter().map(|&i| &dataset.samples[i]).collect();
            let mem = encoder(&mut g, &images)?;
            let t = params.config().num_patches();
            let rows: Vec<usize> = grounded.iter().flat_map(|&(k, _)| k * t..(k + 1) * t).collect();
            let mem = g.tape.embedding_lookup(mem, &rows)?;
            let caps: Vec<_> = grounded.into_iter().map(|(_, c)| c).collect();
            let parts = [
                caption_loss_part(&mut g, &caps, Some(mem), vocab, &distractors)?,
                caption_loss_part(&mut g, &text_only, None, vocab, &distractors)?,
            ];
            let total_rows: usize = parts.iter().map(|p| p.1).sum();
            let mut loss = g.tape.scale(parts[0].0, parts[0].1 as f64 / total_rows as f64)?;
            for &(part, rows) in &parts[1..] {
                let s = g.tape.scale(part, rows as f64 / total_rows as f64)?;
                loss = g.tape.add(loss, s)?;
            }
            let value = g.tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("warm-up loss {value} in epoch {}", epoch + 1)));
            }
            g.tape.backward(loss)?;
            let grads = g.grads(ParamGroup::Backbone);
            drop(g);
            opt.step(params, &grads);
            sum += value;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    params.freeze_backbone();
    Ok(epoch_losses)
}
