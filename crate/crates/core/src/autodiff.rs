//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the tape in reverse and accumulates exact gradients. Dropout masks
//! are drawn while recording and stored on the tape, so the backward pass
//! differentiates exactly the function that was evaluated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Matrix;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Seeded source of dropout decisions.
///
/// Each optimization step opens its own ChaCha stream, so the masks of any
/// step can be replayed from `(seed, step)` alone.
#[derive(Debug, Clone)]
pub struct DropoutStream {
    rng: ChaCha8Rng,
}

impl DropoutStream {
    pub fn new(seed: u64, step: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        DropoutStream { rng }
    }

    /// Scale factor for one unit: `0` when dropped, `1 / (1 - p)` otherwise.
    pub fn keep_scale(&mut self, p: f64) -> f64 {
        if p <= 0.0 {
            return 1.0;
        }
        if self.rng.random::<f64>() < p {
            0.0
        } else {
            1.0 / (1.0 - p)
        }
    }
}

#[derive(Debug)]
struct AttnBlock {
    start: usize,
    len: usize,
    head: usize,
    /// Softmax probabilities, `len x len`, before dropout.
    probs: Vec<f64>,
    /// Per-entry dropout scale, when dropout was active.
    mask: Option<Vec<f64>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Relu(usize),
    MulScalar(usize, usize),
    Gather(usize, Vec<usize>),
    ScatterAdd(usize, Vec<usize>),
    ScaleRows(usize, Vec<f64>),
    Mask(usize, Vec<f64>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        head_dim: usize,
        blocks: Vec<AttnBlock>,
    },
    L1Loss(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape position; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a.0, b.0))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, self.value(x).cols()), "bias shape");
        let b = b.row(0).to_vec();
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            for (a, bb) in v.row_mut(r).iter_mut().zip(&b) {
                *a += bb;
            }
        }
        self.push(v, Op::AddBias(x.0, bias.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x.0))
    }

    /// `x * s` for a `1 x 1` variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "scalar shape");
        let s0 = sv.get(0, 0);
        let v = self.value(x).map(|a| a * s0);
        self.push(v, Op::MulScalar(x.0, s.0))
    }

    /// Row `i` of the result is row `index[i]` of `x`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Var {
        let src = self.value(x);
        let mut v = Matrix::zeros(index.len(), src.cols());
        for (i, &r) in index.iter().enumerate() {
            v.row_mut(i).copy_from_slice(src.row(r));
        }
        self.push(v, Op::Gather(x.0, index.to_vec()))
    }

    /// Sums row `i` of `x` into row `index[i]` of an `out_rows`-row result.
    pub fn scatter_add(&mut self, x: Var, index: &[usize], out_rows: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.rows(), index.len(), "scatter index length");
        let mut v = Matrix::zeros(out_rows, src.cols());
        for (i, &r) in index.iter().enumerate() {
            for (a, b) in v.row_mut(r).iter_mut().zip(src.row(i)) {
                *a += b;
            }
        }
        self.push(v, Op::ScatterAdd(x.0, index.to_vec()))
    }

    pub fn scale_rows(&mut self, x: Var, scale: Vec<f64>) -> Var {
        let mut v = self.value(x).clone();
        assert_eq!(v.rows(), scale.len(), "row scale length");
        for (r, s) in scale.iter().enumerate() {
            v.row_mut(r).iter_mut().for_each(|a| *a *= s);
        }
        self.push(v, Op::ScaleRows(x.0, scale))
    }

    /// Elementwise dropout with probability `p`; identity when `stream` is
    /// `None` or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, stream: Option<&mut DropoutStream>) -> Var {
        let stream = match stream {
            Some(s) if p > 0.0 => s,
            _ => return x,
        };
        let mask: Vec<f64> = (0..self.value(x).len()).map(|_| stream.keep_scale(p)).collect();
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
        self.push(v, Op::Mask(x.0, mask))
    }

    /// Per-row layer normalization with `1 x c` scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, g[c] * h + b[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention restricted to contiguous
    /// row segments. Heads split the columns of `q`, `k`, `v` into equal
    /// blocks; rows of different segments never attend to each other.
    /// Dropout (probability `p`) applies to the attention probabilities.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
        p: f64,
        mut stream: Option<&mut DropoutStream>,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qm.shape();
        assert!(heads > 0 && d % heads == 0, "head split");
        assert_eq!(km.shape(), (n, d));
        assert_eq!(vm.shape(), (n, d));
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut blocks = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let mut probs = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qm.row(start + i)[cols.clone()];
                    let row = &mut probs[i * len..(i + 1) * len];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &km.row(start + j)[cols.clone()];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                }
                let mask = match stream.as_deref_mut() {
                    Some(st) if p > 0.0 => Some((0..len * len).map(|_| st.keep_scale(p)).collect::<Vec<_>>()),
                    _ => None,
                };
                for i in 0..len {
                    for j in 0..len {
                        let w = probs[i * len + j] * mask.as_ref().map_or(1.0, |m| m[i * len + j]);
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vm.row(start + j)[cols.clone()];
                        let o = &mut out.row_mut(start + i)[cols.clone()];
                        for (a, b) in o.iter_mut().zip(vj) {
                            *a += w * b;
                        }
                    }
                }
                blocks.push(AttnBlock {
                    start,
                    len,
                    head: h,
                    probs,
                    mask,
                });
            }
        }
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                head_dim: hd,
                blocks,
            },
        )
    }

    /// Mean absolute error between an `n x 1` prediction and `targets`.
    pub fn l1_loss(&mut self, pred: Var, targets: &[f64]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), (targets.len(), 1), "loss shapes");
        let n = targets.len().max(1) as f64;
        let loss = p.data().iter().zip(targets).map(|(a, t)| (a - t).abs()).sum::<f64>() / n;
        self.push(Matrix::scalar(loss), Op::L1Loss(pred.0, targets.to_vec()))
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar");
        self.backward_from(out, Matrix::scalar(1.0))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_from(&self, out: Var, seed: Matrix) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(&self.nodes[*b].value);
                    let gb = self.nodes[*a].value.matmul_tn(&g);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*b], g.clone());
                    accumulate(&mut grads[*a], g);
                }
                Op::AddBias(x, b) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads[*b], gb);
                    accumulate(&mut grads[*x], g);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = g;
                    gx.data_mut()
                        .iter_mut()
                        .zip(xv.data())
                        .for_each(|(gv, &a)| if a <= 0.0 { *gv = 0.0 });
                    accumulate(&mut grads[*x], gx);
                }
                Op::MulScalar(x, s) => {
                    let xv = &self.nodes[*x].value;
                    let s0 = self.nodes[*s].value.get(0, 0);
                    let gs: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads[*s], Matrix::scalar(gs));
                    accumulate(&mut grads[*x], g.map(|a| a * s0));
                }
                Op::Gather(x, index) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (i, &r) in index.iter().enumerate() {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::ScatterAdd(x, index) => {
                    let mut gx = Matrix::zeros(index.len(), g.cols());
                    for (i, &r) in index.iter().enumerate() {
                        gx.row_mut(i).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::ScaleRows(x, scale) => {
                    let mut gx = g;
                    for (r, s) in scale.iter().enumerate() {
                        gx.row_mut(r).iter_mut().for_each(|a| *a *= s);
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::Mask(x, mask) => {
                    let mut gx = g;
                    gx.data_mut().iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
                    accumulate(&mut grads[*x], gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.nodes[*gamma].value.row(0);
                    let (rows, cols) = g.shape();
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gbeta = Matrix::zeros(1, cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            gg.row_mut(0)[c] += gr[c] * hr[c];
                            gbeta.row_mut(0)[c] += gr[c];
                            let dh = gr[c] * gam[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            gx.set(r, c, inv_std[r] / n * (n * dh - sum_dh - hr[c] * sum_dh_h));
                        }
                    }
                    accumulate(&mut grads[*gamma], gg);
                    accumulate(&mut grads[*beta], gbeta);
                    accumulate(&mut grads[*x], gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    head_dim,
                    blocks,
                } => {
                    let (qm, km, vm) = (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let (n, d) = qm.shape();
                    let hd = *head_dim;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut gq = Matrix::zeros(n, d);
                    let mut gk = Matrix::zeros(n, d);
                    let mut gv = Matrix::zeros(n, d);
                    for blk in blocks {
                        let (start, len) = (blk.start, blk.len);
                        let cols = blk.head * hd..(blk.head + 1) * hd;
                        let m = |i: usize, j: usize| blk.mask.as_ref().map_or(1.0, |mk| mk[i * len + j]);
                        let mut dp = vec![0.0; len * len];
                        for i in 0..len {
                            let go = &g.row(start + i)[cols.clone()];
                            for j in 0..len {
                                let w = blk.probs[i * len + j] * m(i, j);
                                let vj = &vm.row(start + j)[cols.clone()];
                                dp[i * len + j] = go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() * m(i, j);
                                if w != 0.0 {
                                    let gvr = &mut gv.row_mut(start + j)[cols.clone()];
                                    for (a, b) in gvr.iter_mut().zip(go) {
                                        *a += w * b;
                                    }
                                }
                            }
                        }
                        for i in 0..len {
                            let p = &blk.probs[i * len..(i + 1) * len];
                            let dpi = &dp[i * len..(i + 1) * len];
                            let dot: f64 = p.iter().zip(dpi).map(|(a, b)| a * b).sum();
                            for j in 0..len {
                                let ds = p[j] * (dpi[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = km.row(start + j)[cols.clone()].to_vec();
                                let qi = qm.row(start + i)[cols.clone()].to_vec();
                                for (a, b) in gq.row_mut(start + i)[cols.clone()].iter_mut().zip(&kj) {
                                    *a += ds * b;
                                }
                                for (a, b) in gk.row_mut(start + j)[cols.clone()].iter_mut().zip(&qi) {
                                    *a += ds * b;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*q], gq);
                    accumulate(&mut grads[*k], gk);
                    accumulate(&mut grads[*v], gv);
                }
                Op::L1Loss(pred, targets) => {
                    let pv = &self.nodes[*pred].value;
                    let n = targets.len().max(1) as f64;
                    let g0 = g.get(0, 0);
                    let data = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(a, t)| {
                            let diff = a - t;
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            g0 * sign / n
                        })
                        .collect();
                    accumulate(&mut grads[*pred], Matrix::from_vec(pv.rows(), 1, data));
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w .* f(x)))/dx against central differences.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let w = rand_matrix(&mut rng, tape.value(y).rows(), tape.value(y).cols());
        let grads = tape.backward_from(y, w.clone());
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));
        let f = |m: &Matrix| {
            let mut t = Tape::new();
            let xv = t.leaf(m.clone());
            let yv = build(&mut t, xv);
            t.value(yv).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() < 1e-6 * (1.0 + a.abs()), "entry {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_matrix(&mut rng, 3, 5);
        let g = rand_matrix(&mut rng, 1, 5);
        let b = rand_matrix(&mut rng, 1, 5);
        check(
            |t, x| {
                let gv = t.leaf(g.clone());
                let bv = t.leaf(b.clone());
                t.layer_norm(x, gv, bv)
            },
            x0,
        );
    }

    #[test]
    fn attention_gradient_through_q_k_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_matrix(&mut rng, 5, 4);
        let wq = rand_matrix(&mut rng, 4, 4);
        let wk = rand_matrix(&mut rng, 4, 4);
        let segments = [(0, 2), (2, 3)];
        check(
            |t, x| {
                let a = t.leaf(wq.clone());
                let b = t.leaf(wk.clone());
                let q = t.matmul(x, a);
                let k = t.matmul(x, b);
                let mut stream = DropoutStream::new(5, 0);
                t.segment_attention(q, k, x, 2, &segments, 0.3, Some(&mut stream))
            },
            x0,
        );
    }

    #[test]
    fn gather_scatter_scalar_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_matrix(&mut rng, 4, 3);
        check(
            |t, x| {
                let s = t.leaf(Matrix::scalar(0.7));
                let g = t.gather(x, &[0, 2, 2, 3, 1]);
                let r = t.relu(g);
                let sc = t.scatter_add(r, &[1, 1, 0, 2, 0], 3);
                let m = t.mul_scalar(sc, s);
                t.scale_rows(m, vec![0.5, 2.0, -1.0])
            },
            x0,
        );
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut t = Tape::new();
        let q = t.leaf(Matrix::from_vec(1, 2, vec![3.0, -1.0]));
        let k = t.leaf(Matrix::from_vec(1, 2, vec![0.5, 2.0]));
        let v = t.leaf(Matrix::from_vec(1, 2, vec![7.0, 8.0]));
        let o = t.segment_attention(q, k, v, 1, &[(0, 1)], 0.0, None);
        assert_eq!(t.value(o).data(), &[7.0, 8.0]);
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::from_vec(2, 1, vec![1.0, 3.0]));
        let l = t.l1_loss(p, &[1.0, 1.0]);
        assert_eq!(t.value(l).get(0, 0), 1.0);
        let g = t.backward(l);
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.5]);
    }
}
