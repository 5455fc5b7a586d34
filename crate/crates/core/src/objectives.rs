//! Classification loss plus the two auxiliary terms on the word bottleneck.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decoder, hard_decode, positions, soft_pass, Graph, ModelParams, ParamGroup};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sim: f64,
    pub lambda_llm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_sim: 0.1, lambda_llm: 0.1 }
    }
}

impl LossWeights {
    pub const PLAIN: LossWeights = LossWeights { lambda_sim: 0.0, lambda_llm: 0.0 };

    pub fn new(lambda_sim: f64, lambda_llm: f64) -> Result<Self> {
        let w = LossWeights { lambda_sim, lambda_llm };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_sim", self.lambda_sim), ("lambda_llm", self.lambda_llm)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Argument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of `[B, C]` class logits.
pub fn classification_loss(tape: &mut Tape, class_logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(tape.cross_entropy(class_logits, labels)?)
}

/// Mean cosine similarity over the unordered pairs of each sequence's `n`
/// soft words, averaged over the sequences stacked in `soft_words`.
pub fn token_similarity_loss(tape: &mut Tape, soft_words: Var, n: usize) -> Result<Var> {
    if n < 2 {
        return Err(Error::Argument(format!("token similarity needs n >= 2, got {n}")));
    }
    Ok(tape.mean_pairwise_cosine(soft_words, n)?)
}

/// The decoder re-reads each sequence of `n` input vectors as text, with no
/// image cross-attention, and scores `targets[i]` from inputs `< i` for
/// `i = 1..n`. Returns the mean negative log-likelihood.
///
/// `inputs` stacks the sequences as `[B·n, d]`; `targets` has `B·n` ids.
pub fn llm_loss(g: &mut Graph, inputs: Var, targets: &[usize], n: usize) -> Result<Var> {
    if n < 2 {
        return Err(Error::Argument(format!("llm loss needs n >= 2, got {n}")));
    }
    let rows = g.tape.value(inputs).rows();
    if rows % n != 0 || targets.len() != rows {
        return Err(Error::Argument(format!(
            "{rows} input rows and {} targets do not form sequences of {n}",
            targets.len()
        )));
    }
    let b = rows / n;
    let pos = positions(g, n, b)?;
    let x = g.tape.add(inputs, pos)?;
    let logits = decoder(g, x, b, None)?;
    let (rows, labels): (Vec<usize>, Vec<usize>) =
        (0..b).flat_map(|s| (0..n - 1).map(move |i| (s * n + i, s * n + i + 1))).map(|(r, t)| (r, targets[t])).unzip();
    let picked = g.tape.embedding_lookup(logits, &rows)?;
    Ok(g.tape.cross_entropy(picked, &labels)?)
}

/// `class + λ_sim·sim + λ_llm·llm`. Terms with zero weight may be `None`.
pub fn total_loss(tape: &mut Tape, class: Var, sim: Option<Var>, llm: Option<Var>, w: LossWeights) -> Result<Var> {
    w.validate()?;
    let mut total = class;
    for (term, lambda) in [(sim, w.lambda_sim), (llm, w.lambda_llm)] {
        if lambda == 0.0 {
            continue;
        }
        let term = term.ok_or_else(|| Error::Argument("weighted loss term missing".into()))?;
        let t = tape.scale(term, lambda)?;
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Loss terms of one training batch, all on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub class: Var,
    pub sim: Option<Var>,
    pub llm: Option<Var>,
}

/// Forward pass plus every loss term for precomputed image embeddings.
/// `llm_targets` overrides the hard tokens used as llm targets (they are
/// taken from the current logits when `None`).
pub fn batch_loss(
    g: &mut Graph,
    image_emb: &Tensor,
    labels: &[usize],
    w: LossWeights,
    llm_targets: Option<&[usize]>,
) -> Result<BatchLoss> {
    let n = g.params().config().n_prompt;
    let pass = soft_pass(g, image_emb)?;
    let class = classification_loss(&mut g.tape, pass.class_logits, labels)?;
    let sim = if w.lambda_sim > 0.0 { Some(token_similarity_loss(&mut g.tape, pass.soft_words, n)?) } else { None };
    let llm = if w.lambda_llm > 0.0 {
        let targets = match llm_targets {
            Some(t) => t.to_vec(),
            None => hard_decode(g.tape.value(pass.logits), &crate::model::special_ids()),
        };
        Some(llm_loss(g, pass.soft_words, &targets, n)?)
    } else {
        None
    };
    let total = total_loss(&mut g.tape, class, sim, llm, w)?;
    Ok(BatchLoss { total, class, sim, llm })
}

/// Outcome of [`pipeline_grad_check`].
#[derive(Clone, Debug)]
pub struct PipelineCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Central-difference check of `∂ total_loss / ∂ (soft prompt, head)` for one
/// image embedding. The llm targets are the hard tokens at the unperturbed
/// point: argmax has no gradient, so they are constants of the loss.
pub fn pipeline_grad_check(
    params: &ModelParams,
    image_emb: &Tensor,
    label: usize,
    w: LossWeights,
    h: f64,
    sabotage: bool,
) -> Result<PipelineCheck> {
    let groups = [ParamGroup::Prompt, ParamGroup::Head];
    let mut g = Graph::new(params, &groups);
    g.tape.set_sabotage(sabotage);
    let v = params.config().vocab_size;
    let logits = crate::model::decode_soft(params, image_emb)?;
    let rows = logits.len() / v;
    let targets = hard_decode(&logits.reshape(&[rows, v])?, &crate::model::special_ids());
    let loss = batch_loss(&mut g, image_emb, &[label], w, Some(&targets))?;
    g.tape.backward(loss.total)?;

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut g = Graph::inference(p);
        let l = batch_loss(&mut g, image_emb, &[label], w, Some(&targets))?;
        Ok(g.tape.value(l.total).item())
    };
    let mut out = PipelineCheck { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, coordinates: 0 };
    let mut probe = params.clone();
    for group in groups {
        for (idx, grad) in g.grads(group) {
            for k in 0..grad.len() {
                let orig = probe.params()[idx].value.data()[k];
                probe.params_mut()[idx].value.data_mut()[k] = orig + h;
                let up = eval(&probe)?;
                probe.params_mut()[idx].value.data_mut()[k] = orig - h;
                let down = eval(&probe)?;
                probe.params_mut()[idx].value.data_mut()[k] = orig;
                let num = (up - down) / (2.0 * h);
                let a = grad.data()[k];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-12);
                out.coordinates += 1;
                if rel > out.max_rel_error || out.worst_param.is_empty() {
                    out.max_rel_error = rel;
                    out.worst_param = params.params()[idx].name.clone();
                    out.worst_index = k;
                }
            }
        }
    }
    Ok(out)
}
