use super::linalg::{gemm, MatRef};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    GroupMean { x: Var, group: usize },
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SoftCrossEntropy { logits: Var, targets: Vec<f64>, probs: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: usize, probs: Vec<f64> },
    Cosine { u: Var, v: Var },
    PairwiseCosine { x: Var, group: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it.
/// Gradients accumulate additively across [`Tape::backward`] calls only after
/// an explicit [`Tape::zero_grad`]; a second backward without a reset fails.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    sabotage: bool,
}

type R = Result<Var, TensorError>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: corrupts the softmax backward rule (scales it by 1.5) so
    /// gradient checks have a known-bad negative control.
    pub fn set_sabotage(&mut self, on: bool) {
        self.sabotage = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, op: &'static str, value: Tensor, inputs: &[Var], kind: Op) -> R {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: kind,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(TensorError::dim(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> R {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> R {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> R {
        let (m, k) = self.matrix("matmul", a)?;
        let (br, bc) = self.matrix("matmul", b)?;
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!("inner extents differ: {m}x{k} and {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        let bview = MatRef::dense(self.value(b).data(), bc);
        let bview = if tb { bview.t() } else { bview };
        gemm(m, k, n, MatRef::dense(self.value(a).data(), k), bview, 0.0, &mut out, 0, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul { a, b, tb })
    }

    pub fn transpose(&mut self, x: Var) -> R {
        let (r, c) = self.matrix("transpose", x)?;
        let src = self.value(x).data();
        let value = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        self.push("transpose", value, &[x], Op::Transpose(x))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, kind: Op, f: fn(f64, f64) -> f64) -> R {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, value, &[a, b], kind)
    }

    pub fn add(&mut self, a: Var, b: Var) -> R {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> R {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> R {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `bias` (length = last extent of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> R {
        let tx = self.value(x);
        let tb = self.value(bias);
        let c = tx.cols();
        if tb.len() != c {
            return Err(TensorError::dim(
                "add_row",
                format!("bias of {} values for rows of {c}", tb.len()),
            ));
        }
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, v)| v + b[i % c]).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_row", value, &[x, bias], Op::AddRow { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> R {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())?;
        self.push("scale", value, &[x], Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> R {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("gelu", value, &[x], Op::Gelu(x))
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> R {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> R {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Mean of a matrix along `axis`: 0 gives `[1, cols]`, 1 gives `[rows, 1]`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> R {
        let (r, c) = self.matrix("mean_axis", x)?;
        let t = self.value(x);
        let value = match axis {
            0 => Tensor::from_fn(&[1, c], |j| (0..r).map(|i| t.get2(i, j)).sum::<f64>() / r as f64),
            1 => Tensor::from_fn(&[r, 1], |i| t.row(i).iter().sum::<f64>() / c as f64),
            _ => return Err(TensorError::dim("mean_axis", format!("axis {axis} of a matrix"))),
        };
        self.push("mean_axis", value, &[x], Op::MeanAxis { x, axis })
    }

    /// Means over consecutive blocks of `group` rows: `[G·group, d] -> [G, d]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> R {
        let (r, c) = self.matrix("group_mean", x)?;
        if group == 0 || r % group != 0 {
            return Err(TensorError::dim("group_mean", format!("{r} rows in groups of {group}")));
        }
        let t = self.value(x);
        let g = r / group;
        let mut out = vec![0.0; g * c];
        for i in 0..r {
            let dst = &mut out[(i / group) * c..(i / group + 1) * c];
            for (o, v) in dst.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let value = Tensor::new(vec![g, c], out)?;
        self.push("group_mean", value, &[x], Op::GroupMean { x, group })
    }

    // ----- normalisation and probabilities ---------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> R {
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.cols()) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", value, &[x], Op::Softmax(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> R {
        let (b, c) = self.matrix("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("{b} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                detail: format!("label {bad} outside [0, {c})"),
            });
        }
        let t = self.value(logits);
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / b as f64);
        let labels = labels.to_vec();
        self.push("cross_entropy", value, &[logits], Op::CrossEntropy { logits, labels, probs })
    }

    /// Mean over the batch of `-Σ_k targets[i,k]·log softmax(logits)[i,k]`.
    /// Rows of `targets` are meant to be distributions.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> R {
        let (b, c) = self.matrix("soft_cross_entropy", logits)?;
        if targets.shape() != [b, c] {
            return Err(TensorError::dim(
                "soft_cross_entropy",
                format!("logits [{b}, {c}] but targets {:?}", targets.shape()),
            ));
        }
        let t = self.value(logits);
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, q) in probs.chunks_mut(c).zip(targets.data().chunks(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += row.iter().zip(q).filter(|(_, &qk)| qk != 0.0).map(|(x, qk)| qk * (lse - x)).sum::<f64>();
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / b as f64);
        let targets = targets.data().to_vec();
        self.push("soft_cross_entropy", value, &[logits], Op::SoftCrossEntropy { logits, targets, probs })
    }

    /// Row-wise layer normalisation with ε = 1e-5 inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> R {
        let tx = self.value(x);
        let d = tx.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(TensorError::dim("layer_norm", format!("gain/bias must have {d} values")));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in xhat.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let data = xhat.iter().enumerate().map(|(i, v)| v * g[i % d] + b[i % d]).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            value,
            &[x, gain, bias],
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
        )
    }

    // ----- indexing and layout --------------------------------------------

    /// Gathers rows of `table[V×d]` by id: `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> R {
        let (v, d) = self.matrix("embedding_lookup", table)?;
        if ids.is_empty() {
            return Err(TensorError::dim("embedding_lookup", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index {
                op: "embedding_lookup",
                detail: format!("id {bad} outside table of {v} rows"),
            });
        }
        let t = self.value(table);
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push("embedding_lookup", value, &[table], Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat(&mut self, parts: &[Var]) -> R {
        let Some(&first) = parts.first() else {
            return Err(TensorError::dim("concat", "nothing to concatenate"));
        };
        let (_, c) = self.matrix("concat", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix("concat", p)?;
            if pc != c {
                return Err(TensorError::dim("concat", format!("column counts {c} and {pc}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push("concat", value, parts, Op::Concat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> R {
        let (r, c) = self.matrix("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(TensorError::dim("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        self.push("slice_rows", value, &[x], Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> R {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    // ----- attention ------------------------------------------------------

    /// Single-head scaled dot-product attention over one sequence.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> R {
        self.attention(q, k, v, 1, 1, causal)
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences stacked along the rows of `q` (`groups·Lq × D`) and of `k`, `v`
    /// (`groups·Lk × D`). Heads split the `D` columns evenly. With `causal`,
    /// query `i` sees keys `0..=i` (requires `Lq == Lk`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize, causal: bool) -> R {
        let (qr, dq) = self.matrix("attention", q)?;
        let (kr, dk) = self.matrix("attention", k)?;
        let (vr, dv) = self.matrix("attention", v)?;
        if dq != dk || dk != dv || kr != vr {
            return Err(TensorError::dim(
                "attention",
                format!("q {qr}x{dq}, k {kr}x{dk}, v {vr}x{dv}"),
            ));
        }
        if heads == 0 || dq % heads != 0 || groups == 0 || qr % groups != 0 || kr % groups != 0 {
            return Err(TensorError::dim(
                "attention",
                format!("{heads} heads / {groups} groups do not divide q {qr}x{dq}, k {kr}"),
            ));
        }
        let (lq, lk, d) = (qr / groups, kr / groups, dq);
        if causal && lq != lk {
            return Err(TensorError::dim("attention", "causal mask needs equal query/key lengths"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; groups * heads * lq * lk];
        let mut out = vec![0.0; qr * d];
        for g in 0..groups {
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * lq * lk..][..lq * lk];
                let qv = MatRef::dense(tq, d).at(g * lq * d + h * dh);
                let kv = MatRef::dense(tk, d).at(g * lk * d + h * dh);
                let vv = MatRef::dense(tv, d).at(g * lk * d + h * dh);
                gemm(lq, dh, lk, qv, kv.t(), 0.0, p, 0, lk);
                for (i, row) in p.chunks_mut(lk).enumerate() {
                    row.iter_mut().for_each(|s| *s *= scale);
                    if causal {
                        let (seen, masked) = row.split_at_mut(i + 1);
                        softmax_in_place(seen);
                        masked.iter_mut().for_each(|s| *s = 0.0);
                    } else {
                        softmax_in_place(row);
                    }
                }
                gemm(lq, lk, dh, MatRef::dense(p, lk), vv, 0.0, &mut out, g * lq * d + h * dh, d);
            }
        }
        let value = Tensor::new(vec![qr, d], out)?;
        self.push(
            "attention",
            value,
            &[q, k, v],
            Op::Attention { q, k, v, heads, groups, probs },
        )
    }

    // ----- similarity -----------------------------------------------------

    /// `u·v / (‖u‖·‖v‖ + 1e-8)`; the ε keeps zero-norm inputs finite.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> R {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.len() != tv.len() {
            return Err(TensorError::dim(
                "cosine_similarity",
                format!("{} vs {} values", tu.len(), tv.len()),
            ));
        }
        let c = cosine(tu.data(), tv.data());
        self.push("cosine_similarity", Tensor::scalar(c), &[u, v], Op::Cosine { u, v })
    }

    /// Mean cosine similarity over all unordered row pairs `i < j` within each
    /// block of `group` rows, averaged over blocks.
    pub fn mean_pairwise_cosine(&mut self, x: Var, group: usize) -> R {
        let (r, _) = self.matrix("mean_pairwise_cosine", x)?;
        if group < 2 || r % group != 0 {
            return Err(TensorError::dim(
                "mean_pairwise_cosine",
                format!("{r} rows in groups of {group} (need group >= 2)"),
            ));
        }
        let value = Tensor::scalar(pairwise_cosine_mean(self.value(x), group));
        self.push("mean_pairwise_cosine", value, &[x], Op::PairwiseCosine { x, group })
    }

    // ----- reverse pass ---------------------------------------------------

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::Backward(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?;
        accumulate(&mut self.grads[loss.0], seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, to: Var, grad: Tensor) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut self.grads[to.0], grad);
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut sends: Vec<(Var, Tensor)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb } => {
                let (ta, tbv) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                let gv = MatRef::dense(g.data(), n);
                if self.needs(a) {
                    // dA = G · Bᵀ  (B stored k×n, or n×k when tb)
                    let bview = MatRef::dense(tbv.data(), tbv.cols());
                    let bt = if tb { bview } else { bview.t() };
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gv, bt, 0.0, &mut da, 0, k);
                    sends.push((a, Tensor::new(vec![m, k], da).unwrap()));
                }
                if self.needs(b) {
                    let av = MatRef::dense(ta.data(), k);
                    let mut db = vec![0.0; k * n];
                    if tb {
                        // B is n×k: dB = Gᵀ · A
                        gemm(n, m, k, gv.t(), av, 0.0, &mut db, 0, k);
                    } else {
                        // dB = Aᵀ · G
                        gemm(k, m, n, av.t(), gv, 0.0, &mut db, 0, n);
                    }
                    sends.push((b, Tensor::new(tbv.shape().to_vec(), db).unwrap()));
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let gd = g.data();
                sends.push((x, Tensor::from_fn(&[c, r], |j| gd[(j % r) * c + j / r])));
            }
            &Op::Add(a, b) => {
                sends.push((a, g.clone()));
                sends.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                sends.push((a, g.clone()));
                sends.push((b, map(g, |v| -v)));
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    sends.push((a, zip(g, self.value(b), |x, y| x * y)));
                }
                if self.needs(b) {
                    sends.push((b, zip(g, self.value(a), |x, y| x * y)));
                }
            }
            &Op::AddRow { x, bias } => {
                sends.push((x, g.clone()));
                if self.needs(bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    let shape = self.value(bias).shape().to_vec();
                    sends.push((bias, Tensor::new(shape, db).unwrap()));
                }
            }
            &Op::Scale(x, c) => sends.push((x, map(g, |v| v * c))),
            &Op::Sum(x) => {
                let s = self.value(x).shape();
                sends.push((x, Tensor::full(s, g.item())));
            }
            &Op::Mean(x) => {
                let t = self.value(x);
                sends.push((x, Tensor::full(t.shape(), g.item() / t.len() as f64)));
            }
            &Op::MeanAxis { x, axis } => {
                let t = self.value(x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let gd = g.data();
                let dx = if axis == 0 {
                    Tensor::from_fn(&[r, c], |i| gd[i % c] / r as f64)
                } else {
                    Tensor::from_fn(&[r, c], |i| gd[i / c] / c as f64)
                };
                sends.push((x, dx));
            }
            &Op::GroupMean { x, group } => {
                let t = self.value(x);
                let c = t.cols();
                let gd = g.data();
                let dx = Tensor::from_fn(t.shape(), |i| gd[(i / c / group) * c + i % c] / group as f64);
                sends.push((x, dx));
            }
            &Op::Softmax(x) => {
                let c = out.cols();
                let mut dx = g.data().to_vec();
                for (drow, yrow) in dx.chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    drow.iter_mut().zip(yrow).for_each(|(d, y)| *d = y * (*d - dot));
                }
                if self.sabotage {
                    dx.iter_mut().for_each(|d| *d *= 1.5);
                }
                sends.push((x, Tensor::new(out.shape().to_vec(), dx).unwrap()));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let scale = g.item() / labels.len() as f64;
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * c + l] -= 1.0;
                }
                dx.iter_mut().for_each(|d| *d *= scale);
                let shape = self.value(*logits).shape().to_vec();
                sends.push((*logits, Tensor::new(shape, dx).unwrap()));
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let rows = probs.len() / c;
                let scale = g.item() / rows as f64;
                let mut dx = probs.clone();
                for (d, q) in dx.chunks_mut(c).zip(targets.chunks(c)) {
                    let mass: f64 = q.iter().sum();
                    for (dk, qk) in d.iter_mut().zip(q) {
                        *dk = (*dk * mass - qk) * scale;
                    }
                }
                let shape = self.value(*logits).shape().to_vec();
                sends.push((*logits, Tensor::new(shape, dx).unwrap()));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = g.cols();
                let gn = self.value(*gain).data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let dxhat: Vec<f64> = gr.iter().zip(gn).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = is / d as f64 * (d as f64 * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    sends.push((*x, Tensor::new(g.shape().to_vec(), dx).unwrap()));
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    sends.push((*gain, Tensor::new(gs, dg).unwrap()));
                    sends.push((*bias, Tensor::new(bs, db).unwrap()));
                }
            }
            &Op::Gelu(x) => {
                let dx = zip(g, self.value(x), |gv, v| {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * dt)
                });
                sends.push((x, dx));
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (row, &id) in g.data().chunks(d).zip(ids) {
                    dt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                sends.push((*table, Tensor::new(t.shape().to_vec(), dt).unwrap()));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let piece = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    if self.needs(p) {
                        let shape = self.value(p).shape().to_vec();
                        sends.push((p, Tensor::new(shape, piece).unwrap()));
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                let t = self.value(x);
                let c = t.cols();
                let mut dx = vec![0.0; t.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                sends.push((x, Tensor::new(t.shape().to_vec(), dx).unwrap()));
            }
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                sends.push((x, g.clone().reshape(&shape).unwrap()));
            }
            Op::Attention { q, k, v, heads, groups, probs } => {
                let (q, k, v, heads, groups) = (*q, *k, *v, *heads, *groups);
                let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
                let d = tq.cols();
                let (lq, lk) = (tq.rows() / groups, tk.rows() / groups);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                let mut dv = vec![0.0; tv.len()];
                let mut ds = vec![0.0; lq * lk];
                let (nq, nk, nv) = (self.needs(q), self.needs(k), self.needs(v));
                for gi in 0..groups {
                    for h in 0..heads {
                        let p = &probs[(gi * heads + h) * lq * lk..][..lq * lk];
                        let qo = gi * lq * d + h * dh;
                        let ko = gi * lk * d + h * dh;
                        let gview = MatRef::dense(g.data(), d).at(qo);
                        if nv {
                            gemm(lk, lq, dh, MatRef::dense(p, lk).t(), gview, 1.0, &mut dv, ko, d);
                        }
                        if !(nq || nk) {
                            continue;
                        }
                        let vview = MatRef::dense(tv.data(), d).at(ko);
                        gemm(lq, dh, lk, gview, vview.t(), 0.0, &mut ds, 0, lk);
                        for (drow, prow) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            drow.iter_mut()
                                .zip(prow)
                                .for_each(|(s, pv)| *s = pv * (*s - dot) * scale);
                        }
                        if nq {
                            let kview = MatRef::dense(tk.data(), d).at(ko);
                            gemm(lq, lk, dh, MatRef::dense(&ds, lk), kview, 1.0, &mut dq, qo, d);
                        }
                        if nk {
                            let qview = MatRef::dense(tq.data(), d).at(qo);
                            gemm(lk, lq, dh, MatRef::dense(&ds, lk).t(), qview, 1.0, &mut dk, ko, d);
                        }
                    }
                }
                if nq {
                    sends.push((q, Tensor::new(tq.shape().to_vec(), dq).unwrap()));
                }
                if nk {
                    sends.push((k, Tensor::new(tk.shape().to_vec(), dk).unwrap()));
                }
                if nv {
                    sends.push((v, Tensor::new(tv.shape().to_vec(), dv).unwrap()));
                }
            }
            &Op::Cosine { u, v } => {
                let (tu, tv) = (self.value(u), self.value(v));
                let (du, dv) = cosine_grad(tu.data(), tv.data());
                let s = g.item();
                sends.push((u, Tensor::new(tu.shape().to_vec(), du.iter().map(|x| x * s).collect()).unwrap()));
                sends.push((v, Tensor::new(tv.shape().to_vec(), dv.iter().map(|x| x * s).collect()).unwrap()));
            }
            &Op::PairwiseCosine { x, group } => {
                let t = self.value(x);
                let d = t.cols();
                let blocks = t.rows() / group;
                let weight = g.item() * 2.0 / (group * (group - 1)) as f64 / blocks as f64;
                let mut dx = vec![0.0; t.len()];
                for b in 0..blocks {
                    for i in 0..group {
                        for j in i + 1..group {
                            let (ri, rj) = (b * group + i, b * group + j);
                            let (du, dv) = cosine_grad(t.row(ri), t.row(rj));
                            for c in 0..d {
                                dx[ri * d + c] += weight * du[c];
                                dx[rj * d + c] += weight * dv[c];
                            }
                        }
                    }
                }
                sends.push((x, Tensor::new(t.shape().to_vec(), dx).unwrap()));
            }
        }
        for (to, grad) in sends {
            self.send(to, grad);
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&grad),
        None => *slot = Some(grad),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    dot / (norm(u) * norm(v) + COS_EPS)
}

/// Mean pairwise cosine within row blocks; shared by the op and the metrics.
pub(crate) fn pairwise_cosine_mean(x: &Tensor, group: usize) -> f64 {
    let blocks = x.rows() / group;
    let mut total = 0.0;
    for b in 0..blocks {
        let mut s = 0.0;
        for i in 0..group {
            for j in i + 1..group {
                s += cosine(x.row(b * group + i), x.row(b * group + j));
            }
        }
        total += s * 2.0 / (group * (group - 1)) as f64;
    }
    total / blocks as f64
}

fn cosine_grad(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nu, nv) = (norm(u), norm(v));
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let den = nu * nv + COS_EPS;
    let coef_u = if nu > 0.0 { dot * nv / (nu * den * den) } else { 0.0 };
    let coef_v = if nv > 0.0 { dot * nu / (nv * den * den) } else { 0.0 };
    let du = u.iter().zip(v).map(|(ui, vi)| vi / den - coef_u * ui).collect();
    let dv = u.iter().zip(v).map(|(ui, vi)| ui / den - coef_v * vi).collect();
    (du, dv)
}
