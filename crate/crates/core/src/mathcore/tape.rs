//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`GradTape`] records a forward computation as a flat list of nodes, each
//! holding its value and the operation that produced it. Because slots are
//! appended in evaluation order, a single reverse scan visits every node
//! exactly once and is already topologically sorted. The op set is exactly
//! the primitives the registration networks need; each op carries a
//! hand-written adjoint that is validated against central finite differences.
//!
//! Matrices holding per-point 3D features use the "point block" layout: a
//! `(C, 3N)` matrix stores the coordinates of point `n` for channel `c` in
//! columns `3n .. 3n + 3` of row `c`.

use std::sync::Arc;

use super::linalg::DenseMatrix;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot(usize);

/// Gate pass-through threshold: direction vectors shorter than this are
/// treated as absent and the input passes unchanged.
const GATE_EPS: f64 = 1e-12;

enum Op {
    /// Differentiable leaf (network weights) or constant data; both receive
    /// gradients, callers simply ignore the ones they do not need.
    Leaf,
    /// `a * b`
    MatMul { a: Slot, b: Slot },
    /// `a + b`
    Add { a: Slot, b: Slot },
    /// `a - b`
    Sub { a: Slot, b: Slot },
    /// `c * a` for a compile-time constant factor
    Scale { a: Slot, factor: f64 },
    /// `a[i][j] + bias[i][0]`
    AddColBroadcast { a: Slot, bias: Slot },
    /// `a[i][j] + bias[0][j]`
    AddRowBroadcast { a: Slot, bias: Slot },
    /// rows of `a` stacked over rows of `b`
    ConcatRows { a: Slot, b: Slot },
    Tanh { a: Slot },
    Sigmoid { a: Slot },
    /// Direction-gated projection over point blocks (see [`GradTape::vn_gate`]).
    VnGate { v: Slot, k: Slot },
    /// Per-point mean over neighbor blocks.
    NeighborMean { a: Slot, neighbors: Arc<Vec<Vec<usize>>> },
    /// `(C, 3N) -> (C, 3)` mean over point blocks.
    PointMean { a: Slot },
    /// `(C, 3) -> (C, 3N)` repetition across point blocks.
    TilePoints { a: Slot, points: usize },
    /// Per-point dot products between all channel pairs of two block matrices.
    InvariantPair { f: Slot, v: Slot },
    /// Frobenius norm squared, a `(1, 1)` scalar.
    FrobSq { a: Slot },
    /// Sum of all entries, a `(1, 1)` scalar.
    SumAll { a: Slot },
    /// Summed sigmoid cross-entropy of logits against fixed labels in [0, 1].
    CeWithLogitsSum { logits: Slot, labels: DenseMatrix },
    /// Mean over rows of softmax cross-entropy against fixed target columns.
    SoftmaxXentRowsMean { scores: Slot, targets: Vec<usize> },
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Slot`].
pub struct Gradients {
    g: Vec<DenseMatrix>,
}

impl Gradients {
    pub fn get(&self, s: Slot) -> &DenseMatrix {
        &self.g[s.0]
    }
}

/// Append-only reverse-mode tape.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> GradTape {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Slot {
        self.nodes.push(Node { value, op });
        Slot(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves receive gradients; use this for weights and
    /// for constants alike (constant gradients are simply never read).
    pub fn input(&mut self, m: DenseMatrix) -> Slot {
        self.push(m, Op::Leaf)
    }

    /// Alias of [`GradTape::input`] that documents intent at call sites.
    pub fn constant(&mut self, m: DenseMatrix) -> Slot {
        self.input(m)
    }

    pub fn value(&self, s: Slot) -> &DenseMatrix {
        &self.nodes[s.0].value
    }

    /// Value of a `(1, 1)` slot.
    pub fn scalar_value(&self, s: Slot) -> f64 {
        let v = self.value(s);
        assert!(v.rows() == 1 && v.cols() == 1, "slot is not scalar");
        v.at(0, 0)
    }

    pub fn matmul(&mut self, a: Slot, b: Slot) -> Slot {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Slot, b: Slot) -> Slot {
        let out = self.value(a).add(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Slot, b: Slot) -> Slot {
        let out = self.value(a).sub(self.value(b));
        self.push(out, Op::Sub { a, b })
    }

    pub fn scale(&mut self, a: Slot, factor: f64) -> Slot {
        let out = self.value(a).scale(factor);
        self.push(out, Op::Scale { a, factor })
    }

    pub fn add_col_broadcast(&mut self, a: Slot, bias: Slot) -> Slot {
        let (av, bv) = (self.value(a), self.value(bias));
        assert!(bv.cols() == 1 && bv.rows() == av.rows(), "column bias shape mismatch");
        let mut out = av.clone();
        for i in 0..out.rows() {
            let b = bv.at(i, 0);
            for j in 0..out.cols() {
                out.add_at(i, j, b);
            }
        }
        self.push(out, Op::AddColBroadcast { a, bias })
    }

    pub fn add_row_broadcast(&mut self, a: Slot, bias: Slot) -> Slot {
        let (av, bv) = (self.value(a), self.value(bias));
        assert!(bv.rows() == 1 && bv.cols() == av.cols(), "row bias shape mismatch");
        let mut out = av.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.add_at(i, j, bv.at(0, j));
            }
        }
        self.push(out, Op::AddRowBroadcast { a, bias })
    }

    pub fn concat_rows(&mut self, a: Slot, b: Slot) -> Slot {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "concat_rows column mismatch");
        let mut data = Vec::with_capacity((av.rows() + bv.rows()) * av.cols());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = DenseMatrix::from_vec(av.rows() + bv.rows(), av.cols(), data);
        self.push(out, Op::ConcatRows { a, b })
    }

    pub fn tanh(&mut self, a: Slot) -> Slot {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Slot) -> Slot {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid { a })
    }

    /// Direction-gated nonlinearity over point blocks.
    ///
    /// For each channel/point block with feature `v` and direction `k`: when
    /// `<v, k> >= 0` the block passes unchanged, otherwise the component of
    /// `v` along `k` is removed (`v - (<v, k> / <k, k>) k`). Directions with
    /// norm below 1e-12 pass `v` through unchanged.
    pub fn vn_gate(&mut self, v: Slot, k: Slot) -> Slot {
        let out = vn_gate_forward(self.value(v), self.value(k));
        self.push(out, Op::VnGate { v, k })
    }

    /// Replaces each point block with the mean of its neighbors' blocks.
    pub fn neighbor_mean(&mut self, a: Slot, neighbors: Arc<Vec<Vec<usize>>>) -> Slot {
        let av = self.value(a);
        assert_eq!(av.cols() % 3, 0, "neighbor_mean expects point-block layout");
        let blocks = av.cols() / 3;
        assert_eq!(neighbors.len(), blocks, "neighbor list length mismatch");
        let mut out = DenseMatrix::zeros(av.rows(), av.cols());
        for (n, nbrs) in neighbors.iter().enumerate() {
            assert!(!nbrs.is_empty(), "point {n} has no neighbors");
            let inv = 1.0 / nbrs.len() as f64;
            for i in 0..av.rows() {
                let mut acc = [0.0f64; 3];
                for &m in nbrs {
                    for d in 0..3 {
                        acc[d] += av.at(i, 3 * m + d);
                    }
                }
                for d in 0..3 {
                    out.set(i, 3 * n + d, acc[d] * inv);
                }
            }
        }
        self.push(out, Op::NeighborMean { a, neighbors })
    }

    /// Mean over point blocks: `(C, 3N) -> (C, 3)`.
    pub fn point_mean(&mut self, a: Slot) -> Slot {
        let av = self.value(a);
        assert!(av.cols() >= 3 && av.cols() % 3 == 0, "point_mean expects point-block layout");
        let blocks = av.cols() / 3;
        let inv = 1.0 / blocks as f64;
        let mut out = DenseMatrix::zeros(av.rows(), 3);
        for i in 0..av.rows() {
            for n in 0..blocks {
                for d in 0..3 {
                    out.add_at(i, d, av.at(i, 3 * n + d) * inv);
                }
            }
        }
        self.push(out, Op::PointMean { a })
    }

    /// Repeats a `(C, 3)` block across `points` blocks: `(C, 3 * points)`.
    pub fn tile_points(&mut self, a: Slot, points: usize) -> Slot {
        let av = self.value(a);
        assert_eq!(av.cols(), 3, "tile_points expects a (C, 3) input");
        assert!(points > 0);
        let mut out = DenseMatrix::zeros(av.rows(), 3 * points);
        for i in 0..av.rows() {
            for n in 0..points {
                for d in 0..3 {
                    out.set(i, 3 * n + d, av.at(i, d));
                }
            }
        }
        self.push(out, Op::TilePoints { a, points })
    }

    /// Rotation-invariant pairing: for block matrices `f: (C, 3N)` and
    /// `v: (K, 3N)`, produces `(C * K, N)` where entry `(c * K + k, n)` is the
    /// dot product of the two 3D blocks at point `n`. Because both factors
    /// rotate together, the output is unchanged by a global rotation.
    pub fn invariant_pair(&mut self, f: Slot, v: Slot) -> Slot {
        let (fv, vv) = (self.value(f), self.value(v));
        assert_eq!(fv.cols(), vv.cols(), "invariant_pair point count mismatch");
        assert_eq!(fv.cols() % 3, 0, "invariant_pair expects point-block layout");
        let blocks = fv.cols() / 3;
        let (cf, ck) = (fv.rows(), vv.rows());
        let mut out = DenseMatrix::zeros(cf * ck, blocks);
        for c in 0..cf {
            for k in 0..ck {
                let row = c * ck + k;
                for n in 0..blocks {
                    let mut acc = 0.0;
                    for d in 0..3 {
                        acc += fv.at(c, 3 * n + d) * vv.at(k, 3 * n + d);
                    }
                    out.set(row, n, acc);
                }
            }
        }
        self.push(out, Op::InvariantPair { f, v })
    }

    pub fn frob_sq(&mut self, a: Slot) -> Slot {
        let out = DenseMatrix::scalar(self.value(a).frob_norm_sq());
        self.push(out, Op::FrobSq { a })
    }

    pub fn sum_all(&mut self, a: Slot) -> Slot {
        let out = DenseMatrix::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::SumAll { a })
    }

    /// Summed sigmoid cross-entropy between `logits` and fixed `labels`
    /// (values in `[0, 1]`), computed with the numerically stable softplus.
    pub fn ce_with_logits_sum(&mut self, logits: Slot, labels: DenseMatrix) -> Slot {
        let lv = self.value(logits);
        assert!(lv.same_shape(&labels), "labels shape mismatch");
        let mut total = 0.0;
        for (z, y) in lv.data().iter().zip(labels.data().iter()) {
            total += softplus(*z) - y * z;
        }
        self.push(DenseMatrix::scalar(total), Op::CeWithLogitsSum { logits, labels })
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn softmax_xent_rows_mean(&mut self, scores: Slot, targets: Vec<usize>) -> Slot {
        let sv = self.value(scores);
        assert_eq!(sv.rows(), targets.len(), "one target per row required");
        assert!(sv.rows() > 0 && sv.cols() > 0);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < sv.cols(), "target column out of range");
            let row = sv.row_slice(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let mean = total / targets.len() as f64;
        self.push(DenseMatrix::scalar(mean), Op::SoftmaxXentRowsMean { scores, targets })
    }

    /// Runs the reverse pass from a scalar `loss` slot, visiting each
    /// recorded node exactly once, and returns gradients for every slot.
    pub fn backward(&self, loss: Slot) -> Gradients {
        {
            let lv = self.value(loss);
            assert!(lv.rows() == 1 && lv.cols() == 1, "backward requires a scalar loss");
        }
        let mut g: Vec<DenseMatrix> = self
            .nodes
            .iter()
            .map(|n| DenseMatrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        let mut touched = vec![false; self.nodes.len()];
        g[loss.0].set(0, 0, 1.0);
        touched[loss.0] = true;

        for i in (0..self.nodes.len()).rev() {
            if !touched[i] {
                continue;
            }
            // Split the gradient vector so the node's own gradient can be
            // read while the input gradients are written.
            let (before, rest) = g.split_at_mut(i);
            let grad = &rest[0];
            let node = &self.nodes[i];
            let mut touch = |s: Slot| {
                debug_assert!(s.0 < i, "tape not topologically ordered");
                touched[s.0] = true;
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = grad.matmul_nt(bv);
                    let gb = av.matmul_tn(grad);
                    before[a.0] = before[a.0].add(&ga);
                    before[b.0] = before[b.0].add(&gb);
                    touch(*a);
                    touch(*b);
                }
                Op::Add { a, b } => {
                    before[a.0] = before[a.0].add(&grad);
                    before[b.0] = before[b.0].add(&grad);
                    touch(*a);
                    touch(*b);
                }
                Op::Sub { a, b } => {
                    before[a.0] = before[a.0].add(&grad);
                    before[b.0] = before[b.0].sub(&grad);
                    touch(*a);
                    touch(*b);
                }
                Op::Scale { a, factor } => {
                    before[a.0] = before[a.0].add(&grad.scale(*factor));
                    touch(*a);
                }
                Op::AddColBroadcast { a, bias } => {
                    before[a.0] = before[a.0].add(&grad);
                    for r in 0..grad.rows() {
                        let s: f64 = grad.row_slice(r).iter().sum();
                        before[bias.0].add_at(r, 0, s);
                    }
                    touch(*a);
                    touch(*bias);
                }
                Op::AddRowBroadcast { a, bias } => {
                    before[a.0] = before[a.0].add(&grad);
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            before[bias.0].add_at(0, c, grad.at(r, c));
                        }
                    }
                    touch(*a);
                    touch(*bias);
                }
                Op::ConcatRows { a, b } => {
                    let ra = self.nodes[a.0].value.rows();
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            if r < ra {
                                before[a.0].add_at(r, c, grad.at(r, c));
                            } else {
                                before[b.0].add_at(r - ra, c, grad.at(r, c));
                            }
                        }
                    }
                    touch(*a);
                    touch(*b);
                }
                Op::Tanh { a } => {
                    let out = &node.value;
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            let y = out.at(r, c);
                            before[a.0].add_at(r, c, grad.at(r, c) * (1.0 - y * y));
                        }
                    }
                    touch(*a);
                }
                Op::Sigmoid { a } => {
                    let out = &node.value;
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            let y = out.at(r, c);
                            before[a.0].add_at(r, c, grad.at(r, c) * y * (1.0 - y));
                        }
                    }
                    touch(*a);
                }
                Op::VnGate { v, k } => {
                    let (vv, kv) = (&self.nodes[v.0].value, &self.nodes[k.0].value);
                    let blocks = vv.cols() / 3;
                    for i2 in 0..vv.rows() {
                        for n in 0..blocks {
                            let c = 3 * n;
                            let vb = [vv.at(i2, c), vv.at(i2, c + 1), vv.at(i2, c + 2)];
                            let kb = [kv.at(i2, c), kv.at(i2, c + 1), kv.at(i2, c + 2)];
                            let gb = [grad.at(i2, c), grad.at(i2, c + 1), grad.at(i2, c + 2)];
                            let q = kb[0] * kb[0] + kb[1] * kb[1] + kb[2] * kb[2];
                            let s = vb[0] * kb[0] + vb[1] * kb[1] + vb[2] * kb[2];
                            if q < GATE_EPS * GATE_EPS || s >= 0.0 {
                                // Pass-through branch: identity in v, flat in k.
                                for d in 0..3 {
                                    before[v.0].add_at(i2, c + d, gb[d]);
                                }
                                continue;
                            }
                            let gk = gb[0] * kb[0] + gb[1] * kb[1] + gb[2] * kb[2];
                            let f = s / q;
                            for d in 0..3 {
                                before[v.0].add_at(i2, c + d, gb[d] - (gk / q) * kb[d]);
                                before[k.0].add_at(
                                    i2,
                                    c + d,
                                    -(gk / q) * vb[d] - f * gb[d] + 2.0 * f * (gk / q) * kb[d],
                                );
                            }
                        }
                    }
                    touch(*v);
                    touch(*k);
                }
                Op::NeighborMean { a, neighbors } => {
                    for (n, nbrs) in neighbors.iter().enumerate() {
                        let inv = 1.0 / nbrs.len() as f64;
                        for i2 in 0..grad.rows() {
                            for d in 0..3 {
                                let gv = grad.at(i2, 3 * n + d) * inv;
                                if gv == 0.0 {
                                    continue;
                                }
                                for &m in nbrs {
                                    before[a.0].add_at(i2, 3 * m + d, gv);
                                }
                            }
                        }
                    }
                    touch(*a);
                }
                Op::PointMean { a } => {
                    let blocks = self.nodes[a.0].value.cols() / 3;
                    let inv = 1.0 / blocks as f64;
                    for i2 in 0..grad.rows() {
                        for d in 0..3 {
                            let gv = grad.at(i2, d) * inv;
                            for n in 0..blocks {
                                before[a.0].add_at(i2, 3 * n + d, gv);
                            }
                        }
                    }
                    touch(*a);
                }
                Op::TilePoints { a, points } => {
                    for i2 in 0..grad.rows() {
                        for d in 0..3 {
                            let mut acc = 0.0;
                            for n in 0..*points {
                                acc += grad.at(i2, 3 * n + d);
                            }
                            before[a.0].add_at(i2, d, acc);
                        }
                    }
                    touch(*a);
                }
                Op::InvariantPair { f, v } => {
                    let (fv, vv) = (&self.nodes[f.0].value, &self.nodes[v.0].value);
                    let blocks = fv.cols() / 3;
                    let ck = vv.rows();
                    for c in 0..fv.rows() {
                        for k2 in 0..ck {
                            let row = c * ck + k2;
                            for n in 0..blocks {
                                let gv = grad.at(row, n);
                                if gv == 0.0 {
                                    continue;
                                }
                                for d in 0..3 {
                                    before[f.0].add_at(c, 3 * n + d, gv * vv.at(k2, 3 * n + d));
                                    before[v.0].add_at(k2, 3 * n + d, gv * fv.at(c, 3 * n + d));
                                }
                            }
                        }
                    }
                    touch(*f);
                    touch(*v);
                }
                Op::FrobSq { a } => {
                    let gs = grad.at(0, 0);
                    let av = &self.nodes[a.0].value;
                    before[a.0] = before[a.0].add(&av.scale(2.0 * gs));
                    touch(*a);
                }
                Op::SumAll { a } => {
                    let gs = grad.at(0, 0);
                    let av = &self.nodes[a.0].value;
                    before[a.0] = before[a.0].add(&DenseMatrix::filled(av.rows(), av.cols(), gs));
                    touch(*a);
                }
                Op::CeWithLogitsSum { logits, labels } => {
                    let gs = grad.at(0, 0);
                    let lv = &self.nodes[logits.0].value;
                    for r in 0..lv.rows() {
                        for c in 0..lv.cols() {
                            let z = lv.at(r, c);
                            before[logits.0].add_at(r, c, gs * (sigmoid(z) - labels.at(r, c)));
                        }
                    }
                    touch(*logits);
                }
                Op::SoftmaxXentRowsMean { scores, targets } => {
                    let gs = grad.at(0, 0) / targets.len() as f64;
                    let sv = &self.nodes[scores.0].value;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = sv.row_slice(r);
                        let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                        let denom: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                        for c in 0..sv.cols() {
                            let p = (row[c] - m).exp() / denom;
                            let delta = if c == t { 1.0 } else { 0.0 };
                            before[scores.0].add_at(r, c, gs * (p - delta));
                        }
                    }
                    touch(*scores);
                }
            }
        }
        Gradients { g }
    }
}

/// Shared forward pass of the gate so the tape op and the standalone
/// nonlinearity cannot drift apart.
pub(crate) fn vn_gate_forward(vv: &DenseMatrix, kv: &DenseMatrix) -> DenseMatrix {
    assert!(vv.same_shape(kv), "vn_gate shape mismatch");
    assert_eq!(vv.cols() % 3, 0, "vn_gate expects point-block layout");
    let mut out = vv.clone();
    let blocks = vv.cols() / 3;
    for i in 0..out.rows() {
        for n in 0..blocks {
            let c = 3 * n;
            let vb = [vv.at(i, c), vv.at(i, c + 1), vv.at(i, c + 2)];
            let kb = [kv.at(i, c), kv.at(i, c + 1), kv.at(i, c + 2)];
            let q = kb[0] * kb[0] + kb[1] * kb[1] + kb[2] * kb[2];
            if q < GATE_EPS * GATE_EPS {
                continue;
            }
            let s = vb[0] * kb[0] + vb[1] * kb[1] + vb[2] * kb[2];
            if s >= 0.0 {
                continue;
            }
            let f = s / q;
            for d in 0..3 {
                out.set(i, c + d, vb[d] - f * kb[d]);
            }
        }
    }
    out
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Compares tape gradients against central finite differences.
///
/// `build` must record the same scalar loss on any fresh tape given the
/// parameter slots in order. Returns the worst relative error over every
/// entry of every parameter, where the relative error uses a small floor so
/// near-zero derivative pairs compare stably.
pub fn finite_difference_max_rel_err<F>(params: &[DenseMatrix], step: f64, build: F) -> f64
where
    F: Fn(&mut GradTape, &[Slot]) -> Slot,
{
    let mut tape = GradTape::new();
    let slots: Vec<Slot> = params.iter().map(|p| tape.input(p.clone())).collect();
    let loss = build(&mut tape, &slots);
    let grads = tape.backward(loss);

    let eval = |perturbed: &[DenseMatrix]| -> f64 {
        let mut t = GradTape::new();
        let ss: Vec<Slot> = perturbed.iter().map(|m| t.input(m.clone())).collect();
        let l = build(&mut t, &ss);
        t.scalar_value(l)
    };

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.rows() {
            for j in 0..p.cols() {
                let mut plus = params.to_vec();
                plus[pi].set(i, j, p.at(i, j) + step);
                let mut minus = params.to_vec();
                minus[pi].set(i, j, p.at(i, j) - step);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let an = grads.get(slots[pi]).at(i, j);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    worst
}
