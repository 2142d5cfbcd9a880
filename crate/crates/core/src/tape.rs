//! Minimal reverse-mode autodiff over dense matrices.
//!
//! Every node holds a full matrix; ops cover exactly what the
//! encoder-decoder model needs: matmuls, bias/residual adds, ReLU, layer
//! norm, multi-head attention (fused, with its own backward), embedding
//! gather, inverted dropout and a label-smoothed cross-entropy loss.
//! Backward walks nodes in reverse creation order, which is already a
//! topological order because ops may only reference earlier nodes.

#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_slice, Matrix, Real};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Attention masking rule. Blocked positions get probability exactly zero.
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Query at position i may attend keys at positions <= i (per sentence).
    Causal,
    /// Keys at positions >= len of their sentence are blocked.
    KeyPad(Arc<Vec<usize>>),
}

#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, Default)]
pub struct LossStats<T> {
    /// Sum of per-position weights over unmasked positions.
    pub weight_sum: T,
    /// Weighted sum of unsmoothed token negative log-likelihoods.
    pub nll_sum: T,
    /// Number of unmasked target positions.
    pub token_count: usize,
}

enum Op<T: Real> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// C = A · Bᵀ
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, factor: T },
    Relu { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, normed: Matrix<T>, rstd: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, shape: AttnShape, probs: Matrix<T> },
    Embed { table: NodeId, ids: Arc<Vec<usize>> },
    Dropout { a: NodeId, keep: T, mask: Vec<bool> },
    CeLoss { logits: NodeId, targets: Arc<Vec<usize>>, weights: Arc<Vec<T>>, label_eps: T, probs: Matrix<T>, stats: LossStats<T> },
}

pub struct Tape<T: Real> {
    values: Vec<Matrix<T>>,
    grads: Vec<Matrix<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), grads: Vec::new(), ops: Vec::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        let id = NodeId(self.values.len());
        self.grads.push(Matrix::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.ops.push(op);
        id
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> &Matrix<T> {
        &self.grads[id.0]
    }

    pub fn take_grad(&mut self, id: NodeId) -> Matrix<T> {
        let (r, c) = self.grads[id.0].shape();
        std::mem::replace(&mut self.grads[id.0], Matrix::zeros(r, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = matmul(&self.values[a.0], &self.values[b.0]);
        self.push(value, Op::MatMul { a, b })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = matmul_nt(&self.values[a.0], &self.values[b.0]);
        self.push(value, Op::MatMulNT { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        assert_eq!(va.shape(), vb.shape(), "add shape");
        let mut value = va.clone();
        for (x, &y) in value.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            *x = *x + y;
        }
        self.push(value, Op::Add { a, b })
    }

    /// Adds a `[1 × n]` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let va = &self.values[a.0];
        let vb = &self.values[bias.0];
        assert_eq!(vb.rows(), 1, "bias must be a row vector");
        assert_eq!(va.cols(), vb.cols(), "bias width");
        let mut value = va.clone();
        let b_row = vb.row(0).to_vec();
        for i in 0..value.rows() {
            for (x, &y) in value.row_mut(i).iter_mut().zip(b_row.iter()) {
                *x = *x + y;
            }
        }
        self.push(value, Op::AddBias { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let mut value = self.values[a.0].clone();
        for x in value.as_mut_slice() {
            *x = *x * factor;
        }
        self.push(value, Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.values[a.0].clone();
        for x in value.as_mut_slice() {
            if *x < T::zero() {
                *x = T::zero();
            }
        }
        self.push(value, Op::Relu { a })
    }

    /// Per-row layer norm with learned gain and bias (both `[1 × n]`).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let eps = T::from_f64(1e-5);
        let va = &self.values[a.0];
        let g = self.values[gain.0].row(0).to_vec();
        let b = self.values[bias.0].row(0).to_vec();
        let (rows, cols) = va.shape();
        let inv_n = T::one() / T::from_f64(cols as f64);
        let mut normed = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let x = va.row(i);
            let mut mean = T::zero();
            for &xi in x {
                mean = mean + xi;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &xi in x {
                let d = xi - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            let n_row = normed.row_mut(i);
            let out_row = value.row_mut(i);
            for j in 0..cols {
                let xn = (x[j] - mean) * r;
                n_row[j] = xn;
                out_row[j] = xn * g[j] + b[j];
            }
        }
        self.push(value, Op::LayerNorm { a, gain, bias, normed, rstd })
    }

    /// Fused multi-head scaled-dot-product attention over packed
    /// `[batch*len × d]` inputs that were already linearly projected.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttnShape,
        mask: &AttnMask,
    ) -> NodeId {
        let vq = &self.values[q.0];
        let vk = &self.values[k.0];
        let vv = &self.values[v.0];
        let d = vq.cols();
        assert_eq!(d % shape.heads, 0, "d_model divisible by heads");
        assert_eq!(vq.rows(), shape.batch * shape.q_len, "q rows");
        assert_eq!(vk.rows(), shape.batch * shape.k_len, "k rows");
        assert_eq!(vv.rows(), shape.batch * shape.k_len, "v rows");
        let dh = d / shape.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let neg_inf = T::neg_infinity();

        let mut probs = Matrix::zeros(shape.batch * shape.heads * shape.q_len, shape.k_len);
        let mut value = Matrix::zeros(shape.batch * shape.q_len, d);
        for b in 0..shape.batch {
            for h in 0..shape.heads {
                let col0 = h * dh;
                for i in 0..shape.q_len {
                    let q_row = &vq.row(b * shape.q_len + i)[col0..col0 + dh];
                    let p_row =
                        probs.row_mut((b * shape.heads + h) * shape.q_len + i);
                    for j in 0..shape.k_len {
                        let blocked = match mask {
                            AttnMask::Causal => j > i,
                            AttnMask::KeyPad(lens) => j >= lens[b],
                        };
                        if blocked {
                            p_row[j] = neg_inf;
                            continue;
                        }
                        let k_row = &vk.row(b * shape.k_len + j)[col0..col0 + dh];
                        let mut dot = T::zero();
                        for l in 0..dh {
                            dot = dot + q_row[l] * k_row[l];
                        }
                        p_row[j] = dot * scale;
                    }
                    softmax_slice(p_row);
                    let out_row =
                        &mut value.row_mut(b * shape.q_len + i)[col0..col0 + dh];
                    for j in 0..shape.k_len {
                        let p = p_row[j];
                        if p == T::zero() {
                            continue;
                        }
                        let v_row = &vv.row(b * shape.k_len + j)[col0..col0 + dh];
                        for l in 0..dh {
                            out_row[l] = out_row[l] + p * v_row[l];
                        }
                    }
                }
            }
        }
        self.push(value, Op::Attention { q, k, v, shape, probs })
    }

    /// Gathers rows of an embedding table.
    pub fn embed(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let tbl = &self.values[table.0];
        let mut value = Matrix::zeros(ids.len(), tbl.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(tbl.row(id));
        }
        self.push(value, Op::Embed { table, ids: Arc::new(ids) })
    }

    /// Inverted dropout; `rate` in [0, 1). A rate of zero is the identity
    /// but still consumes no randomness.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> NodeId {
        if rate == 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 - rate);
        let va = &self.values[a.0];
        let mask: Vec<bool> = (0..va.len()).map(|_| rng.gen::<f64>() >= rate).collect();
        let mut value = va.clone();
        for (x, &m) in value.as_mut_slice().iter_mut().zip(mask.iter()) {
            *x = if m { *x / keep } else { T::zero() };
        }
        self.push(value, Op::Dropout { a, keep, mask })
    }

    /// Label-smoothed cross entropy, weighted per position; weight 0 masks
    /// a position out entirely. Returns a `[1 × 1]` loss node holding
    /// `Σ_t w_t · ce_t / Σ_t w_t`.
    pub fn ce_loss(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<T>,
        label_eps: f64,
    ) -> NodeId {
        let vl = &self.values[logits.0];
        let (rows, vocab) = vl.shape();
        assert_eq!(targets.len(), rows, "targets per logit row");
        assert_eq!(weights.len(), rows, "weights per logit row");
        let eps = T::from_f64(label_eps);
        let uniform = eps / T::from_f64(vocab as f64);
        let confident = T::one() - eps;

        let mut probs = Matrix::zeros(rows, vocab);
        let mut stats = LossStats { weight_sum: T::zero(), nll_sum: T::zero(), token_count: 0 };
        let mut loss_sum = T::zero();
        for i in 0..rows {
            let w = weights[i];
            if w == T::zero() {
                continue;
            }
            let row = vl.row(i);
            let p_row = probs.row_mut(i);
            p_row.copy_from_slice(row);
            softmax_slice(p_row);
            let mut sum_log_p = T::zero();
            for &p in p_row.iter() {
                sum_log_p = sum_log_p + p.ln();
            }
            let log_p_y = p_row[targets[i]].ln();
            let ce = -(confident * log_p_y + uniform * sum_log_p);
            loss_sum = loss_sum + w * ce;
            stats.weight_sum = stats.weight_sum + w;
            stats.nll_sum = stats.nll_sum - w * log_p_y;
            stats.token_count += 1;
        }
        let denom = if stats.weight_sum > T::zero() { stats.weight_sum } else { T::one() };
        let value = Matrix::from_vec(1, 1, vec![loss_sum / denom]);
        self.push(
            value,
            Op::CeLoss {
                logits,
                targets: Arc::new(targets),
                weights: Arc::new(weights),
                label_eps: eps,
                probs,
                stats,
            },
        )
    }

    pub fn loss_stats(&self, loss: NodeId) -> &LossStats<T> {
        match &self.ops[loss.0] {
            Op::CeLoss { stats, .. } => stats,
            _ => panic!("loss_stats on a non-loss node"),
        }
    }

    /// Reverse pass seeding `d(loss)/d(loss) = 1`.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.values[loss.0].shape(), (1, 1), "loss must be scalar");
        self.grads[loss.0].set(0, 0, T::one());
        for idx in (0..self.ops.len()).rev() {
            self.backward_node(idx);
        }
    }

    fn grad_add(&mut self, id: NodeId, delta: &Matrix<T>) {
        let g = &mut self.grads[id.0];
        assert_eq!(g.shape(), delta.shape());
        for (x, &y) in g.as_mut_slice().iter_mut().zip(delta.as_slice()) {
            *x = *x + y;
        }
    }

    fn backward_node(&mut self, idx: usize) {
        // Contributions are computed into temporaries first, then applied,
        // so aliasing between inputs is never an issue.
        let mut updates: Vec<(NodeId, Matrix<T>)> = Vec::new();
        {
            let g_out = &self.grads[idx];
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    updates.push((*a, matmul_nt(g_out, &self.values[b.0])));
                    updates.push((*b, matmul_tn(&self.values[a.0], g_out)));
                }
                Op::MatMulNT { a, b } => {
                    updates.push((*a, matmul(g_out, &self.values[b.0])));
                    updates.push((*b, matmul_tn(g_out, &self.values[a.0])));
                }
                Op::Add { a, b } => {
                    updates.push((*a, g_out.clone()));
                    updates.push((*b, g_out.clone()));
                }
                Op::AddBias { a, bias } => {
                    updates.push((*a, g_out.clone()));
                    let mut db = Matrix::zeros(1, g_out.cols());
                    for i in 0..g_out.rows() {
                        for (x, &y) in db.row_mut(0).iter_mut().zip(g_out.row(i)) {
                            *x = *x + y;
                        }
                    }
                    updates.push((*bias, db));
                }
                Op::Scale { a, factor } => {
                    let mut da = g_out.clone();
                    for x in da.as_mut_slice() {
                        *x = *x * *factor;
                    }
                    updates.push((*a, da));
                }
                Op::Relu { a } => {
                    let mut da = g_out.clone();
                    for (x, &v) in da.as_mut_slice().iter_mut().zip(self.values[a.0].as_slice()) {
                        if v <= T::zero() {
                            *x = T::zero();
                        }
                    }
                    updates.push((*a, da));
                }
                Op::LayerNorm { a, gain, bias, normed, rstd } => {
                    let (rows, cols) = g_out.shape();
                    let g = self.values[gain.0].row(0);
                    let inv_n = T::one() / T::from_f64(cols as f64);
                    let mut da = Matrix::zeros(rows, cols);
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        let dy = g_out.row(i);
                        let xn = normed.row(i);
                        let r = rstd[i];
                        let mut mean_dxn = T::zero();
                        let mut mean_dxn_xn = T::zero();
                        for j in 0..cols {
                            let dxn = dy[j] * g[j];
                            mean_dxn = mean_dxn + dxn;
                            mean_dxn_xn = mean_dxn_xn + dxn * xn[j];
                        }
                        mean_dxn = mean_dxn * inv_n;
                        mean_dxn_xn = mean_dxn_xn * inv_n;
                        let da_row = da.row_mut(i);
                        for j in 0..cols {
                            let dxn = dy[j] * g[j];
                            da_row[j] = r * (dxn - mean_dxn - xn[j] * mean_dxn_xn);
                        }
                        for j in 0..cols {
                            let dgj = dg.get(0, j) + dy[j] * xn[j];
                            dg.set(0, j, dgj);
                            let dbj = db.get(0, j) + dy[j];
                            db.set(0, j, dbj);
                        }
                    }
                    updates.push((*a, da));
                    updates.push((*gain, dg));
                    updates.push((*bias, db));
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let vq = &self.values[q.0];
                    let vk = &self.values[k.0];
                    let vv = &self.values[v.0];
                    let d = vq.cols();
                    let dh = d / shape.heads;
                    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                    let mut dq = Matrix::zeros(vq.rows(), d);
                    let mut dk = Matrix::zeros(vk.rows(), d);
                    let mut dv = Matrix::zeros(vv.rows(), d);
                    for b in 0..shape.batch {
                        for h in 0..shape.heads {
                            let col0 = h * dh;
                            for i in 0..shape.q_len {
                                let qi = b * shape.q_len + i;
                                let p_row = probs.row((b * shape.heads + h) * shape.q_len + i);
                                let dout = &g_out.row(qi)[col0..col0 + dh];
                                // dp_j = dout · v_j ; dv_j += p_j * dout
                                let mut dp = vec![T::zero(); shape.k_len];
                                for j in 0..shape.k_len {
                                    let p = p_row[j];
                                    if p == T::zero() {
                                        continue;
                                    }
                                    let kj = b * shape.k_len + j;
                                    let v_row = &vv.row(kj)[col0..col0 + dh];
                                    let mut dot = T::zero();
                                    for l in 0..dh {
                                        dot = dot + dout[l] * v_row[l];
                                    }
                                    dp[j] = dot;
                                    let dv_row = &mut dv.row_mut(kj)[col0..col0 + dh];
                                    for l in 0..dh {
                                        dv_row[l] = dv_row[l] + p * dout[l];
                                    }
                                }
                                // softmax backward: ds_j = p_j (dp_j - sum_l p_l dp_l)
                                let mut dot_p_dp = T::zero();
                                for j in 0..shape.k_len {
                                    dot_p_dp = dot_p_dp + p_row[j] * dp[j];
                                }
                                let q_row = &vq.row(qi)[col0..col0 + dh];
                                let dq_row_holder: &mut [T] = &mut dq.row_mut(qi)[col0..col0 + dh];
                                for j in 0..shape.k_len {
                                    let p = p_row[j];
                                    if p == T::zero() {
                                        continue;
                                    }
                                    let ds = p * (dp[j] - dot_p_dp) * scale;
                                    let kj = b * shape.k_len + j;
                                    let k_row = &vk.row(kj)[col0..col0 + dh];
                                    for l in 0..dh {
                                        dq_row_holder[l] = dq_row_holder[l] + ds * k_row[l];
                                    }
                                    let dk_row = &mut dk.row_mut(kj)[col0..col0 + dh];
                                    for l in 0..dh {
                                        dk_row[l] = dk_row[l] + ds * q_row[l];
                                    }
                                }
                            }
                        }
                    }
                    updates.push((*q, dq));
                    updates.push((*k, dk));
                    updates.push((*v, dv));
                }
                Op::Embed { table, ids } => {
                    let tbl_shape = self.values[table.0].shape();
                    let mut dt = Matrix::zeros(tbl_shape.0, tbl_shape.1);
                    for (i, &id) in ids.iter().enumerate() {
                        let src = g_out.row(i);
                        let dst = dt.row_mut(id);
                        for (x, &y) in dst.iter_mut().zip(src) {
                            *x = *x + y;
                        }
                    }
                    updates.push((*table, dt));
                }
                Op::Dropout { a, keep, mask } => {
                    let mut da = g_out.clone();
                    for (x, &m) in da.as_mut_slice().iter_mut().zip(mask.iter()) {
                        *x = if m { *x / *keep } else { T::zero() };
                    }
                    updates.push((*a, da));
                }
                Op::CeLoss { logits, targets, weights, label_eps, probs, stats } => {
                    let g = g_out.get(0, 0);
                    if g == T::zero() {
                        return;
                    }
                    let (rows, vocab) = probs.shape();
                    let denom = if stats.weight_sum > T::zero() {
                        stats.weight_sum
                    } else {
                        T::one()
                    };
                    let uniform = *label_eps / T::from_f64(vocab as f64);
                    let confident = T::one() - *label_eps;
                    let mut dl = Matrix::zeros(rows, vocab);
                    for i in 0..rows {
                        let w = weights[i];
                        if w == T::zero() {
                            continue;
                        }
                        let coeff = g * w / denom;
                        let p_row = probs.row(i);
                        let d_row = dl.row_mut(i);
                        for j in 0..vocab {
                            d_row[j] = coeff * (p_row[j] - uniform);
                        }
                        d_row[targets[i]] = d_row[targets[i]] - coeff * confident;
                    }
                    updates.push((*logits, dl));
                }
            }
        }
        for (id, delta) in updates {
            self.grad_add(id, &delta);
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of a scalar-valued tape function w.r.t.
    /// one leaf entry.
    fn fd_check<F>(build: F, leaf_data: Vec<Vec<f64>>, shapes: Vec<(usize, usize)>)
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    {
        let make_leaves = |tape: &mut Tape<f64>, datas: &[Vec<f64>]| -> Vec<NodeId> {
            datas
                .iter()
                .zip(shapes.iter())
                .map(|(d, &(r, c))| tape.leaf(Matrix::from_vec(r, c, d.clone())))
                .collect()
        };

        let mut tape = Tape::new();
        let leaves = make_leaves(&mut tape, &leaf_data);
        let loss = build(&mut tape, &leaves);
        tape.backward(loss);
        let analytic: Vec<Vec<f64>> =
            leaves.iter().map(|&l| tape.grad(l).as_slice().to_vec()).collect();

        let h = 1e-6;
        for (li, data) in leaf_data.iter().enumerate() {
            for ei in 0..data.len() {
                let run = |delta: f64| -> f64 {
                    let mut perturbed = leaf_data.clone();
                    perturbed[li][ei] += delta;
                    let mut t = Tape::new();
                    let ls = make_leaves(&mut t, &perturbed);
                    let out = build(&mut t, &ls);
                    t.value(out).get(0, 0)
                };
                let numeric = (run(h) - run(-h)) / (2.0 * h);
                let got = analytic[li][ei];
                let denom = numeric.abs().max(got.abs()).max(1e-8);
                assert!(
                    (numeric - got).abs() / denom < 1e-4,
                    "leaf {li} elem {ei}: analytic {got} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        fd_check(
            |tape, leaves| {
                let c = tape.matmul(leaves[0], leaves[1]);
                let d = tape.matmul_nt(c, leaves[2]);
                let r = tape.relu(d);
                tape.ce_loss(r, vec![0, 1], vec![1.0, 1.0], 0.1)
            },
            vec![
                vec![0.5, -0.3, 0.8, 0.2, 0.1, -0.7],
                vec![0.4, -0.2, 0.9, 0.3, -0.5, 0.6],
                vec![0.3, 0.7, -0.4, 0.2, 0.5, -0.1],
            ],
            vec![(2, 3), (3, 2), (3, 2)],
        );
    }

    #[test]
    fn layer_norm_gradients() {
        fd_check(
            |tape, leaves| {
                let ln = tape.layer_norm(leaves[0], leaves[1], leaves[2]);
                tape.ce_loss(ln, vec![2, 0], vec![1.0, 0.5], 0.0)
            },
            vec![
                vec![0.5, -1.3, 0.8, 2.2, 0.1, -0.7],
                vec![1.1, 0.9, 1.0],
                vec![0.0, 0.1, -0.1],
            ],
            vec![(2, 3), (1, 3), (1, 3)],
        );
    }

    #[test]
    fn attention_gradients_causal_and_keypad() {
        let shape = AttnShape { batch: 2, q_len: 2, k_len: 2, heads: 2 };
        for mask in [AttnMask::Causal, AttnMask::KeyPad(Arc::new(vec![1, 2]))] {
            fd_check(
                |tape, leaves| {
                    let att = tape.attention(leaves[0], leaves[1], leaves[2], shape, &mask);
                    tape.ce_loss(att, vec![0, 1, 2, 3], vec![1.0, 1.0, 1.0, 1.0], 0.0)
                },
                vec![
                    vec![0.5, -0.3, 0.8, 0.2, 0.1, -0.7, 0.4, 0.9, -0.2, 0.3, 0.6, -0.5, 0.7, 0.1, -0.8, 0.2],
                    vec![0.2, 0.4, -0.6, 0.8, -0.1, 0.3, 0.5, -0.7, 0.9, -0.2, 0.1, 0.6, -0.3, 0.2, 0.4, -0.4],
                    vec![0.1, -0.5, 0.3, 0.7, 0.2, -0.3, 0.8, 0.4, -0.6, 0.5, 0.2, -0.1, 0.3, 0.9, -0.2, 0.6],
                ],
                vec![(4, 4), (4, 4), (4, 4)],
            );
        }
    }

    #[test]
    fn embed_scatter_gradients() {
        fd_check(
            |tape, leaves| {
                let e = tape.embed(leaves[0], vec![1, 0, 1]);
                tape.ce_loss(e, vec![0, 1, 0], vec![1.0, 1.0, 2.0], 0.05)
            },
            vec![vec![0.5, -0.3, 0.8, 0.2]],
            vec![(2, 2)],
        );
    }

    #[test]
    fn dropout_backward_matches_mask() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = tape.dropout(a, 0.5, &mut rng);
        let loss = tape.ce_loss(d, vec![0, 1], vec![1.0, 1.0], 0.0);
        tape.backward(loss);
        // dropped entries have zero value and zero gradient
        for i in 0..4 {
            let v = tape.value(d).as_slice()[i];
            let g = tape.grad(a).as_slice()[i];
            if v == 0.0 && tape.value(a).as_slice()[i] != 0.0 {
                assert_eq!(g, 0.0);
            }
        }
    }

    #[test]
    fn ce_loss_weight_two_equals_duplicate() {
        let logits = vec![0.3, -0.2, 0.9, 0.1, 0.5, -0.5];
        let mut t1: Tape<f64> = Tape::new();
        let l1 = t1.leaf(Matrix::from_vec(2, 3, logits.clone()));
        let loss1 = t1.ce_loss(l1, vec![2, 0], vec![1.0, 1.0], 0.1);

        // duplicate row 0 twice at weight 1 == row 0 once at weight 2
        let mut dup = logits[0..3].to_vec();
        dup.extend_from_slice(&logits);
        let mut t2: Tape<f64> = Tape::new();
        let l2 = t2.leaf(Matrix::from_vec(3, 3, dup));
        let loss2 = t2.ce_loss(l2, vec![2, 2, 0], vec![1.0, 1.0, 1.0], 0.1);

        let mut t3: Tape<f64> = Tape::new();
        let l3 = t3.leaf(Matrix::from_vec(2, 3, logits));
        let loss3 = t3.ce_loss(l3, vec![2, 0], vec![2.0, 1.0], 0.1);

        let a = t2.value(loss2).get(0, 0);
        let b = t3.value(loss3).get(0, 0);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        // and both differ from the unweighted case
        assert!((t1.value(loss1).get(0, 0) - a).abs() > 1e-9);
    }
}
