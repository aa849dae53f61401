//! Minimal reverse-mode autodiff over `f64` matrices.
//!
//! The training losses here compose a fixed, small set of operations (linear
//! maps, row softmax, ReLU, floored log, masked sums), so a tape with exactly
//! those primitives is enough.  Values are computed eagerly when a node is
//! pushed; `backward` replays the tape in reverse and accumulates adjoints.
//! Every primitive is checked against central finite differences in the tests
//! below, and the composed losses are checked again end to end in the
//! acceptance suite.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position of the node on its tape; indexes the vector that
    /// [`Tape::backward`] returns.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    /// Leaf holding an input or constant.
    Leaf,
    /// a . b
    MatMul(NodeId, NodeId),
    /// a^T
    Transpose(NodeId),
    /// c * a
    Scale(NodeId, f64),
    /// a + b, same shape
    Add(NodeId, NodeId),
    /// a + row broadcast over rows of a; row is 1 x cols
    AddRow(NodeId, NodeId),
    /// softmax over each row of a
    RowSoftmax(NodeId),
    /// max(a, 0) elementwise
    Relu(NodeId),
    /// ln(max(a, floor)) elementwise
    LnFloored(NodeId, f64),
    /// a * c elementwise, c constant
    MulConst(NodeId, Array2<f64>),
    /// 1x1 sum of all entries
    Sum(NodeId),
    /// rows of a stacked over rows of b
    ConcatRows(NodeId, NodeId),
    /// rows [start, end) of a
    SliceRows(NodeId, usize, usize),
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Array2<f64>>,
}

fn row_softmax(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        NodeId(self.ops.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.values[id.0]
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() needs a 1x1 node");
        v[(0, 0)]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.values[a.0].dot(&self.values[b.0]);
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].t().to_owned();
        self.push(Op::Transpose(a), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = &self.values[a.0] * c;
        self.push(Op::Scale(a, c), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.values[a.0] + &self.values[b.0];
        self.push(Op::Add(a, b), value)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.values[row.0].nrows(), 1, "bias must be a 1 x n row");
        let value = &self.values[a.0] + &self.values[row.0].row(0);
        self.push(Op::AddRow(a, row), value)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let value = row_softmax(&self.values[a.0]);
        self.push(Op::RowSoftmax(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].mapv(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn ln_floored(&mut self, a: NodeId, floor: f64) -> NodeId {
        let value = self.values[a.0].mapv(|v| v.max(floor).ln());
        self.push(Op::LnFloored(a, floor), value)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        assert_eq!(self.values[a.0].dim(), c.dim(), "mul_const shape mismatch");
        let value = &self.values[a.0] * &c;
        self.push(Op::MulConst(a, c), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.values[a.0].sum());
        self.push(Op::Sum(a), value)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = ndarray::concatenate(
            Axis(0),
            &[self.values[a.0].view(), self.values[b.0].view()],
        )
        .expect("concat_rows column mismatch");
        self.push(Op::ConcatRows(a, b), value)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.values[a.0]
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        self.push(Op::SliceRows(a, start, end), value)
    }

    /// Adjoints of every node with respect to a 1x1 root.
    pub fn backward(&self, root: NodeId) -> Vec<Array2<f64>> {
        assert_eq!(self.values[root.0].dim(), (1, 1), "root must be scalar");
        let mut grads: Vec<Array2<f64>> = self
            .values
            .iter()
            .map(|v| Array2::zeros(v.dim()))
            .collect();
        grads[root.0][(0, 0)] = 1.0;

        for i in (0..=root.0).rev() {
            let g = grads[i].clone();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.values[b.0].t());
                    let gb = self.values[a.0].t().dot(&g);
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::Transpose(a) => {
                    grads[a.0] += &g.t();
                }
                Op::Scale(a, c) => {
                    grads[a.0] += &(&g * *c);
                }
                Op::Add(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] += &g;
                }
                Op::AddRow(a, row) => {
                    grads[a.0] += &g;
                    let col_sums = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[row.0] += &col_sums;
                }
                Op::RowSoftmax(a) => {
                    // d/dz of softmax row s: s * (g - <g, s>)
                    let s = &self.values[i];
                    let mut ga = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let dot: f64 = g
                            .row(r)
                            .iter()
                            .zip(s.row(r).iter())
                            .map(|(x, y)| x * y)
                            .sum();
                        for c in 0..g.ncols() {
                            ga[(r, c)] = s[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    grads[a.0] += &ga;
                }
                Op::Relu(a) => {
                    let mask = self.values[a.0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    grads[a.0] += &(&g * &mask);
                }
                Op::LnFloored(a, floor) => {
                    let deriv = self.values[a.0]
                        .mapv(|v| if v > *floor { 1.0 / v } else { 0.0 });
                    grads[a.0] += &(&g * &deriv);
                }
                Op::MulConst(a, c) => {
                    grads[a.0] += &(&g * c);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.values[a.0].dim(), g[(0, 0)]);
                    grads[a.0] += &ga;
                }
                Op::ConcatRows(a, b) => {
                    let na = self.values[a.0].nrows();
                    grads[a.0] += &g.slice(ndarray::s![..na, ..]);
                    grads[b.0] += &g.slice(ndarray::s![na.., ..]);
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = grads[a.0].clone();
                    let mut region = ga.slice_mut(ndarray::s![*start..*end, ..]);
                    region += &g;
                    grads[a.0] = ga;
                }
            }
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite difference of `f` at `inputs[target]`, entry (r, c).
    fn central_diff(
        f: &dyn Fn(&[Array2<f64>]) -> f64,
        inputs: &[Array2<f64>],
        target: usize,
        r: usize,
        c: usize,
    ) -> f64 {
        let h = 1e-6;
        let mut plus = inputs.to_vec();
        plus[target][(r, c)] += h;
        let mut minus = inputs.to_vec();
        minus[target][(r, c)] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    /// Assert analytic gradients of a scalar-valued builder against finite
    /// differences for every entry of every input.
    fn assert_grads(
        build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
        inputs: &[Array2<f64>],
    ) {
        let eval = |vals: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let root = build(&mut tape, &ids);
            tape.scalar(root)
        };
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);
        for (t, id) in ids.iter().enumerate() {
            let g = &grads[id.0];
            for r in 0..g.nrows() {
                for c in 0..g.ncols() {
                    let fd = central_diff(&eval, inputs, t, r, c);
                    let ad = g[(r, c)];
                    let denom = ad.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (ad - fd).abs() / denom < 1e-5,
                        "input {t} entry ({r},{c}): analytic {ad} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        assert_grads(
            &|t, ids| {
                let m = t.matmul(ids[0], ids[1]);
                t.sum(m)
            },
            &[a, b],
        );
    }

    #[test]
    fn softmax_relu_log_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 3, 5);
        assert_grads(
            &|t, ids| {
                let r = t.relu(ids[0]);
                let s = t.row_softmax(r);
                let l = t.ln_floored(s, 1e-12);
                t.sum(l)
            },
            &[a],
        );
    }

    #[test]
    fn bias_scale_concat_slice_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 2, 3);
        let bias = random_matrix(&mut rng, 1, 3);
        // Weight the softmax output so the sum is not trivially constant.
        let weights = Array2::from_shape_fn((4, 3), |(r, c)| (r + 2 * c) as f64 - 2.5);
        assert_grads(
            &|t, ids| {
                let cat = t.concat_rows(ids[0], ids[1]);
                let biased = t.add_row(cat, ids[2]);
                let scaled = t.scale(biased, 0.7);
                let sliced = t.slice_rows(scaled, 1, 5);
                let soft = t.row_softmax(sliced);
                let weighted = t.mul_const(soft, weights.clone());
                t.sum(weighted)
            },
            &[a, b, bias],
        );
    }

    #[test]
    fn attention_shaped_graph_matches_finite_differences() {
        // softmax(Q K^T / sqrt(dk)) V with all three inputs live, the exact
        // shape of the conditional-classifier block.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_matrix(&mut rng, 3, 4);
        let k = random_matrix(&mut rng, 5, 4);
        let v = random_matrix(&mut rng, 5, 4);
        assert_grads(
            &|t, ids| {
                let kt = t.transpose(ids[1]);
                let qk = t.matmul(ids[0], kt);
                let scaled = t.scale(qk, 0.5);
                let attn = t.row_softmax(scaled);
                let out = t.matmul(attn, ids[2]);
                let sq = t.mul_const(out, Array2::from_elem((3, 4), 1.0));
                t.sum(sq)
            },
            &[q, k, v],
        );
    }

    #[test]
    fn masked_ce_shaped_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random_matrix(&mut rng, 4, 3);
        let mut onehot = Array2::zeros((4, 3));
        onehot[(0, 2)] = 1.0;
        onehot[(1, 0)] = 1.0;
        onehot[(3, 1)] = 1.0; // row 2 masked out
        assert_grads(
            &|t, ids| {
                let s = t.row_softmax(ids[0]);
                let l = t.ln_floored(s, 1e-12);
                let picked = t.mul_const(l, onehot.clone());
                let total = t.sum(picked);
                t.scale(total, -1.0 / 3.0)
            },
            &[logits],
        );
    }

    #[test]
    fn ln_floor_zeroes_gradient_below_floor() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1e-15, 0.5]]);
        let l = tape.ln_floored(a, 1e-12);
        let s = tape.sum(l);
        let grads = tape.backward(s);
        assert_eq!(grads[0][(0, 0)], 0.0);
        assert!((grads[0][(0, 1)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grad_accumulates_when_node_is_reused() {
        // loss = sum(a) + sum(a . I) must give gradient 2 everywhere.
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let eye = tape.leaf(Array2::eye(2));
        let prod = tape.matmul(a, eye);
        let s1 = tape.sum(a);
        let s2 = tape.sum(prod);
        let total = tape.add(s1, s2);
        let grads = tape.backward(total);
        assert!(grads[0].iter().all(|&g| (g - 2.0).abs() < 1e-12));
    }
}
