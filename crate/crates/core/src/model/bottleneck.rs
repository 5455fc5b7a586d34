use super::forward::{decoder, encoder, positions, tile};
use super::params::{Graph, ModelParams};
use crate::data::{ImageSample, BOS, NUM_SPECIAL, PAD, UNK};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError, Var};

/// Per-batch result of the soft-prompt pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckOutput {
    /// `[B, n, V]` next-token logits at the prompt positions.
    pub logits: Tensor,
    /// `[B, n, d]` soft word vectors `softmax(logits)·E`.
    pub soft_words: Tensor,
    /// `[B, d]` mean of the soft words.
    pub pooled: Tensor,
    /// `B` sequences of `n` argmax token ids (specials excluded).
    pub hard_tokens: Vec<Vec<usize>>,
}

/// Tape handles for one soft forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SoftPass {
    pub logits: Var,
    pub soft_words: Var,
    pub pooled: Var,
    pub class_logits: Var,
}

/// The decoder input for the soft prompt: `[<bos>]? prompt`, tiled over the
/// batch, positions not yet added. Returns the per-sequence length too.
fn prompt_block(g: &mut Graph) -> Result<(Var, usize)> {
    let cfg = g.params().config().clone();
    let layout = &g.params().layout;
    let (prompt_id, embed_id) = (layout.prompt, layout.embed);
    let prompt = g.p(prompt_id);
    if !cfg.bos_prefix {
        return Ok((prompt, cfg.n_prompt));
    }
    let e = g.p(embed_id);
    let bos = g.tape.embedding_lookup(e, &[BOS])?;
    Ok((g.tape.concat(&[bos, prompt])?, cfg.n_prompt + 1))
}

pub(crate) fn image_memory(g: &mut Graph, image_emb: &Tensor) -> Result<(Var, usize)> {
    let cfg = g.params().config();
    let (t, d) = (cfg.num_patches(), cfg.d_model);
    if image_emb.cols() != d || image_emb.rows() % t != 0 {
        return Err(TensorError::dim(
            "decode_soft",
            format!("image embeddings {:?} are not [B, {t}, {d}]", image_emb.shape()),
        )
        .into());
    }
    let b = image_emb.rows() / t;
    let mem = g.tape.constant(image_emb.clone().reshape(&[b * t, d])?);
    Ok((mem, b))
}

/// Soft-prompt decoding: `[B·n, V]` logits from the prompt positions.
pub fn decode_soft_graph(g: &mut Graph, memory: Var, batch: usize) -> Result<Var> {
    let (block, len) = prompt_block(g)?;
    let x = tile(g, block, batch)?;
    let pos = positions(g, len, batch)?;
    let x = g.tape.add(x, pos)?;
    let logits = decoder(g, x, batch, Some(memory))?;
    if !g.params().config().bos_prefix {
        return Ok(logits);
    }
    let n = g.params().config().n_prompt;
    let rows: Vec<usize> = (0..batch).flat_map(|b| (1..=n).map(move |i| b * (n + 1) + i)).collect();
    Ok(g.tape.embedding_lookup(logits, &rows)?)
}

/// `soft_words = softmax(logits)·E`, `pooled` = mean over each sequence's `n` rows.
pub fn soft_bottleneck_graph(g: &mut Graph, logits: Var) -> Result<(Var, Var)> {
    let n = g.params().config().n_prompt;
    let probs = g.tape.softmax(logits)?;
    let e = g.p(g.params().layout.embed);
    let soft = g.tape.matmul(probs, e)?;
    let pooled = g.tape.group_mean(soft, n)?;
    Ok((soft, pooled))
}

/// `pooled · Wᵀ + b` for `[B, d]` pooled vectors.
pub fn classify_graph(g: &mut Graph, pooled: Var) -> Result<Var> {
    let layout = &g.params().layout;
    let (w, b) = (layout.head_w, layout.head_b);
    let (w, b) = (g.p(w), g.p(b));
    let y = g.tape.matmul_nt(pooled, w)?;
    Ok(g.tape.add_row(y, b)?)
}

/// Full differentiable pass from precomputed image embeddings.
pub fn soft_pass(g: &mut Graph, image_emb: &Tensor) -> Result<SoftPass> {
    let (mem, b) = image_memory(g, image_emb)?;
    let logits = decode_soft_graph(g, mem, b)?;
    let (soft_words, pooled) = soft_bottleneck_graph(g, logits)?;
    let class_logits = classify_graph(g, pooled)?;
    Ok(SoftPass { logits, soft_words, pooled, class_logits })
}

// ----- value-level API ----------------------------------------------------

/// Image embeddings `[B, T, d]`.
pub fn encode_image(params: &ModelParams, images: &[&ImageSample]) -> Result<Tensor> {
    let mut g = Graph::inference(params);
    let x = encoder(&mut g, images)?;
    let cfg = params.config();
    Ok(g.tape.value(x).clone().reshape(&[images.len(), cfg.num_patches(), cfg.d_model])?)
}

/// Logits `[B, n, V]` for image embeddings `[B, T, d]`.
pub fn decode_soft(params: &ModelParams, image_emb: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(params);
    let (mem, b) = image_memory(&mut g, image_emb)?;
    let logits = decode_soft_graph(&mut g, mem, b)?;
    let cfg = params.config();
    Ok(g.tape.value(logits).clone().reshape(&[b, cfg.n_prompt, cfg.vocab_size])?)
}

/// Soft words `softmax(logits)·E` (`[n, d]`) and their mean (`[d]`) for one sequence.
pub fn soft_bottleneck(logits: &Tensor, embeddings: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = crate::tensor::Tape::new();
    let l = tape.constant(logits.clone().reshape(&[logits.rows(), logits.cols()])?);
    let e = tape.constant(embeddings.clone());
    let p = tape.softmax(l)?;
    let s = tape.matmul(p, e)?;
    let m = tape.mean_axis(s, 0)?;
    let pooled = tape.value(m).clone();
    let d = pooled.len();
    Ok((tape.value(s).clone(), pooled.reshape(&[d])?))
}

/// Argmax per row of `logits` over the ids not in `special`; ties go to the lowest id.
pub fn hard_decode(logits: &Tensor, special: &[usize]) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| masked_argmax(logits.row(r), |id| special.contains(&id)))
        .collect()
}

pub(crate) fn masked_argmax(row: &[f64], masked: impl Fn(usize) -> bool) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (id, &v) in row.iter().enumerate() {
        if masked(id) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.expect("at least one unmasked id").0
}

pub(crate) fn special_ids() -> Vec<usize> {
    (0..NUM_SPECIAL).collect()
}

/// Class logits `W·pooled + b` for `[d]` or `[B, d]` pooled input.
pub fn classify(params: &ModelParams, pooled: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(params);
    let x = g.tape.constant(pooled.clone().reshape(&[pooled.rows(), pooled.cols()])?);
    let y = classify_graph(&mut g, x)?;
    Ok(g.tape.value(y).clone())
}

/// Soft path for a batch: bottleneck output plus class logits `[B, C]`.
pub fn forward_soft(params: &ModelParams, images: &[&ImageSample]) -> Result<(BottleneckOutput, Tensor)> {
    let emb = encode_image(params, images)?;
    forward_soft_from_embeddings(params, &emb)
}

pub fn forward_soft_from_embeddings(params: &ModelParams, image_emb: &Tensor) -> Result<(BottleneckOutput, Tensor)> {
    let cfg = params.config();
    let mut g = Graph::inference(params);
    let pass = soft_pass(&mut g, image_emb)?;
    let b = g.tape.value(pass.pooled).rows();
    let logits = g.tape.value(pass.logits).clone();
    let hard = hard_decode(&logits, &special_ids());
    let out = BottleneckOutput {
        logits: logits.reshape(&[b, cfg.n_prompt, cfg.vocab_size])?,
        soft_words: g.tape.value(pass.soft_words).clone().reshape(&[b, cfg.n_prompt, cfg.d_model])?,
        pooled: g.tape.value(pass.pooled).clone(),
        hard_tokens: hard.chunks(cfg.n_prompt).map(<[usize]>::to_vec).collect(),
    };
    Ok((out, g.tape.value(pass.class_logits).clone()))
}

/// Mean word embedding of each token sequence; an empty sequence pools to zero.
pub fn pool_tokens(params: &ModelParams, tokens: &[Vec<usize>]) -> Result<Tensor> {
    let e = params.word_embeddings();
    let d = e.cols();
    let mut out = vec![0.0; tokens.len() * d];
    for (row, seq) in out.chunks_mut(d).zip(tokens) {
        for &id in seq {
            if id >= e.rows() {
                return Err(TensorError::Index {
                    op: "embedding_lookup",
                    detail: format!("id {id} outside table of {} rows", e.rows()),
                }
                .into());
            }
            row.iter_mut().zip(e.row(id)).for_each(|(a, b)| *a += b);
        }
        if !seq.is_empty() {
            row.iter_mut().for_each(|a| *a /= seq.len() as f64);
        }
    }
    Ok(Tensor::new(vec![tokens.len(), d], out)?)
}

/// Classifies from word ids alone: embedding lookup, mean pool, head.
pub fn classify_tokens(params: &ModelParams, tokens: &[Vec<usize>]) -> Result<Tensor> {
    classify(params, &pool_tokens(params, tokens)?)
}

/// Hard path: encode, decode the soft prompt, argmax, look the words up,
/// pool and classify. Returns class logits `[B, C]` and the hard tokens.
pub fn forward_hard(params: &ModelParams, images: &[&ImageSample]) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let emb = encode_image(params, images)?;
    forward_hard_from_embeddings(params, &emb)
}

pub fn forward_hard_from_embeddings(params: &ModelParams, image_emb: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let logits = decode_soft(params, image_emb)?;
    let n = params.config().n_prompt;
    let hard = hard_decode(&logits, &special_ids());
    let tokens: Vec<Vec<usize>> = hard.chunks(n).map(<[usize]>::to_vec).collect();
    Ok((classify_tokens(params, &tokens)?, tokens))
}

/// Greedy autoregressive decoding after the soft prompt that never repeats a
/// token: before each argmax the special ids and every id already emitted for
/// that image are masked out, and the chosen word's embedding is appended as
/// the next decoder input.
pub fn sample_no_repetition(params: &ModelParams, image_emb: &Tensor, n: usize) -> Result<Vec<Vec<usize>>> {
    let cfg = params.config();
    if n > cfg.vocab_size - NUM_SPECIAL {
        return Err(Error::Argument(format!(
            "cannot draw {n} distinct words from {} non-special tokens",
            cfg.vocab_size - NUM_SPECIAL
        )));
    }
    let mut emitted: Vec<Vec<usize>> = Vec::new();
    for step in 0..n {
        let mut g = Graph::inference(params);
        let (mem, b) = image_memory(&mut g, image_emb)?;
        if step == 0 {
            emitted = vec![Vec::with_capacity(n); b];
        }
        let (block, len0) = prompt_block(&mut g)?;
        let e = g.p(params.layout.embed);
        let mut parts = Vec::with_capacity(2 * b);
        for seq in &emitted {
            parts.push(block);
            if !seq.is_empty() {
                parts.push(g.tape.embedding_lookup(e, seq)?);
            }
        }
        let x = g.tape.concat(&parts)?;
        let len = len0 + step;
        let pos = positions(&mut g, len, b)?;
        let x = g.tape.add(x, pos)?;
        let logits = decoder(&mut g, x, b, Some(mem))?;
        let lv = g.tape.value(logits);
        for (i, seq) in emitted.iter_mut().enumerate() {
            let row = lv.row(i * len + len - 1);
            let next = masked_argmax(row, |id| id < NUM_SPECIAL || seq.contains(&id));
            seq.push(next);
        }
    }
    Ok(emitted)
}

/// Plain greedy captioning from `<bos>`: argmax over everything except
/// `<bos>`/`<unk>`, stopping at `<pad>` or after `max_len` words.
pub fn greedy_caption(params: &ModelParams, image_emb: &Tensor, max_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut tokens: Vec<Vec<usize>> = Vec::new();
    let mut done: Vec<bool> = Vec::new();
    for step in 0..max_len {
        let mut g = Graph::inference(params);
        let (mem, b) = image_memory(&mut g, image_emb)?;
        if step == 0 {
            tokens = vec![vec![BOS]; b];
            done = vec![false; b];
        }
        let e = g.p(params.layout.embed);
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let x = g.tape.embedding_lookup(e, &ids)?;
        let len = step + 1;
        let pos = positions(&mut g, len, b)?;
        let x = g.tape.add(x, pos)?;
        let logits = decoder(&mut g, x, b, Some(mem))?;
        let lv = g.tape.value(logits);
        for (i, seq) in tokens.iter_mut().enumerate() {
            // finished sequences keep feeding <pad> so all rows stay the same length
            let next = if done[i] {
                PAD
            } else {
                masked_argmax(lv.row(i * len + len - 1), |id| id == BOS || id == UNK)
            };
            done[i] |= next == PAD;
            seq.push(next);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(tokens
        .into_iter()
        .map(|seq| seq.into_iter().skip(1).take_while(|&t| t != PAD).collect())
        .collect())
}

/// Next-word logits `[B, V]` after the same word prefix for every image.
pub fn next_word_logits(params: &ModelParams, image_emb: &Tensor, prefix: &[usize]) -> Result<Tensor> {
    if prefix.is_empty() {
        return Err(Error::Argument("prefix must hold at least one token".into()));
    }
    let mut g = Graph::inference(params);
    let (mem, b) = image_memory(&mut g, image_emb)?;
    let e = g.p(params.layout.embed);
    let ids: Vec<usize> = (0..b).flat_map(|_| prefix.iter().copied()).collect();
    let x = g.tape.embedding_lookup(e, &ids)?;
    let len = prefix.len();
    let pos = positions(&mut g, len, b)?;
    let x = g.tape.add(x, pos)?;
    let logits = decoder(&mut g, x, b, Some(mem))?;
    let rows: Vec<usize> = (0..b).map(|i| i * len + len - 1).collect();
    let last = g.tape.embedding_lookup(logits, &rows)?;
    Ok(g.tape.value(last).clone())
}
