use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_corruption, Corruption, Dataset, ImageSample, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::model::{
    classify_tokens, encode_image, forward_soft_from_embeddings, greedy_caption, sample_no_repetition, Graph,
    ModelParams,
};
use crate::objectives::llm_loss;
use crate::rng::derive;
use crate::tensor::{pairwise_cosine_mean, Tensor};

/// Images per encoder/decoder call. Fixed so results never depend on the
/// number of worker threads.
pub const EVAL_CHUNK: usize = 64;

/// Longest caption the caption baseline may emit.
pub const CAPTION_MAX_WORDS: usize = 5;

const CORRUPTION_STREAM: u64 = 0xc0de;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodePath {
    /// Class from the pooled soft words.
    Soft,
    /// Class from the pooled embeddings of the argmax words.
    Hard,
    /// Class from the words of no-repetition greedy decoding.
    NoRep,
    /// Class from a free greedy caption (the caption baseline).
    Caption,
}

impl DecodePath {
    pub fn name(self) -> &'static str {
        match self {
            DecodePath::Soft => "soft",
            DecodePath::Hard => "hard",
            DecodePath::NoRep => "no_rep",
            DecodePath::Caption => "caption",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [DecodePath::Soft, DecodePath::Hard, DecodePath::NoRep, DecodePath::Caption]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown decoding path {s:?}")))
    }
}

/// Image embeddings of a whole dataset, one `[T·d]` block per sample.
#[derive(Clone, Debug)]
pub struct EmbeddedSet {
    pub tokens_per_image: usize,
    pub d_model: usize,
    pub embeddings: Vec<f64>,
    pub labels: Vec<usize>,
}

impl EmbeddedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[B·T, d]` embeddings of the given samples.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let block = self.tokens_per_image * self.d_model;
        let mut data = Vec::with_capacity(indices.len() * block);
        for &i in indices {
            data.extend_from_slice(&self.embeddings[i * block..(i + 1) * block]);
        }
        Tensor::new(vec![indices.len() * self.tokens_per_image, self.d_model], data).expect("non-empty gather")
    }
}

/// The corrupted copy of sample `index` used by every evaluation.
pub fn corrupted_sample(img: &ImageSample, index: usize, corruption: Option<Corruption>) -> Result<ImageSample> {
    match corruption {
        None => Ok(img.clone()),
        Some(c) => apply_corruption(img, c, derive(CORRUPTION_STREAM, index as u64)),
    }
}

/// Encodes every sample (optionally corrupted first) with the frozen encoder.
pub fn embed_dataset(params: &ModelParams, dataset: &Dataset, corruption: Option<Corruption>) -> Result<EmbeddedSet> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let chunks: Vec<Result<Vec<f64>>> = dataset
        .samples
        .par_chunks(EVAL_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let imgs = chunk
                .iter()
                .enumerate()
                .map(|(k, img)| corrupted_sample(img, c * EVAL_CHUNK + k, corruption))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageSample> = imgs.iter().collect();
            Ok(encode_image(params, &refs)?.into_data())
        })
        .collect();
    let mut embeddings = Vec::new();
    for c in chunks {
        embeddings.extend(c?);
    }
    Ok(EmbeddedSet {
        tokens_per_image: params.config().num_patches(),
        d_model: params.config().d_model,
        embeddings,
        labels: dataset.labels(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub path: DecodePath,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean pairwise cosine of each sequence's word vectors: soft words on
    /// the soft/hard paths, embeddings of the emitted words otherwise.
    pub mean_cosine: Option<f64>,
    /// Mean negative log-likelihood of the emitted words when the decoder
    /// re-reads the sequence without the image.
    pub llm_nll: Option<f64>,
    pub mean_distinct_tokens: f64,
    /// Sequences containing a repeated word.
    pub duplicate_violations: usize,
    /// Sequences containing a special token.
    pub special_violations: usize,
}

#[derive(Default)]
struct Partial {
    correct: usize,
    cos_sum: f64,
    cos_count: usize,
    nll_sum: f64,
    nll_count: usize,
    distinct: usize,
    duplicates: usize,
    specials: usize,
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect()
}

fn token_stats(p: &mut Partial, tokens: &[Vec<usize>]) {
    for seq in tokens {
        let mut s = seq.clone();
        s.sort_unstable();
        s.dedup();
        p.distinct += s.len();
        p.duplicates += usize::from(s.len() != seq.len());
        p.specials += usize::from(seq.iter().any(|&t| t < NUM_SPECIAL));
    }
}

/// Cosine and re-read likelihood of word sequences fed back as their embeddings.
fn word_sequence_stats(params: &ModelParams, p: &mut Partial, tokens: &[Vec<usize>]) -> Result<()> {
    let e = params.word_embeddings();
    for seq in tokens.iter().filter(|s| s.len() >= 2) {
        let n = seq.len();
        let mut data = Vec::with_capacity(n * e.cols());
        seq.iter().for_each(|&t| data.extend_from_slice(e.row(t)));
        let words = Tensor::new(vec![n, e.cols()], data)?;
        p.cos_sum += pairwise_cosine_mean(&words, n);
        p.cos_count += 1;
        let mut g = Graph::inference(params);
        let x = g.tape.constant(words);
        let l = llm_loss(&mut g, x, seq, n)?;
        p.nll_sum += g.tape.value(l).item();
        p.nll_count += 1;
    }
    Ok(())
}

fn eval_chunk(params: &ModelParams, emb: &Tensor, labels: &[usize], path: DecodePath) -> Result<Partial> {
    let cfg = params.config();
    let n = cfg.n_prompt;
    let b = labels.len();
    let mut p = Partial::default();
    match path {
        DecodePath::Soft | DecodePath::Hard => {
            let (out, soft_logits) = forward_soft_from_embeddings(params, emb)?;
            let class_logits = match path {
                DecodePath::Soft => soft_logits,
                _ => classify_tokens(params, &out.hard_tokens)?,
            };
            p.correct = argmax_rows(&class_logits).iter().zip(labels).filter(|(a, b)| a == b).count();
            token_stats(&mut p, &out.hard_tokens);
            if n >= 2 {
                let soft = out.soft_words.clone().reshape(&[b * n, cfg.d_model])?;
                p.cos_sum = pairwise_cosine_mean(&soft, n) * b as f64;
                p.cos_count = b;
                let mut g = Graph::inference(params);
                let x = g.tape.constant(soft);
                let targets: Vec<usize> = out.hard_tokens.concat();
                let l = llm_loss(&mut g, x, &targets, n)?;
                p.nll_sum = g.tape.value(l).item() * b as f64;
                p.nll_count = b;
            }
        }
        DecodePath::NoRep | DecodePath::Caption => {
            let tokens = if path == DecodePath::NoRep {
                sample_no_repetition(params, emb, n)?
            } else {
                greedy_caption(params, emb, CAPTION_MAX_WORDS)?
            };
            let class_logits = classify_tokens(params, &tokens)?;
            p.correct = argmax_rows(&class_logits).iter().zip(labels).filter(|(a, b)| a == b).count();
            token_stats(&mut p, &tokens);
            word_sequence_stats(params, &mut p, &tokens)?;
        }
    }
    Ok(p)
}

/// Accuracy and sequence statistics of one decoding path over precomputed embeddings.
pub fn evaluate_embedded(params: &ModelParams, set: &EmbeddedSet, path: DecodePath) -> Result<EvalStats> {
    if set.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let partials: Vec<Result<Partial>> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|idx| {
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            eval_chunk(params, &set.gather(idx), &labels, path)
        })
        .collect();
    let mut total = Partial::default();
    for p in partials {
        let p = p?;
        total.correct += p.correct;
        total.cos_sum += p.cos_sum;
        total.cos_count += p.cos_count;
        total.nll_sum += p.nll_sum;
        total.nll_count += p.nll_count;
        total.distinct += p.distinct;
        total.duplicates += p.duplicates;
        total.specials += p.specials;
    }
    let count = set.len();
    let mean = |sum: f64, k: usize| (k > 0).then(|| sum / k as f64);
    Ok(EvalStats {
        path,
        count,
        correct: total.correct,
        accuracy: total.correct as f64 / count as f64,
        mean_cosine: mean(total.cos_sum, total.cos_count),
        llm_nll: mean(total.nll_sum, total.nll_count),
        mean_distinct_tokens: total.distinct as f64 / count as f64,
        duplicate_violations: total.duplicates,
        special_violations: total.specials,
    })
}

/// Encodes `dataset` (corrupted if asked) and evaluates one path.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    path: DecodePath,
    corruption: Option<Corruption>,
) -> Result<EvalStats> {
    let set = embed_dataset(params, dataset, corruption)?;
    evaluate_embedded(params, &set, path)
}
