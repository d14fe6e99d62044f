//! Minimal tape-based reverse-mode differentiation over `Array2<f64>`.
//!
//! The tape records each operation with the ids of its inputs; ids are
//! append-ordered, so a single reverse sweep propagates gradients. Only the
//! operations the traffic encoder, its trainer, the perturbation search, and
//! the convolutional baseline need are implemented.

use ndarray::{Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a (m x k) . b (k x n)
    MatMul(VarId, VarId),
    /// a (m x k) . b^T (n x k) -> m x n
    MatMulNT(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    /// a (m x d) + row (1 x d) broadcast over rows
    AddRow(VarId, VarId),
    Mul(VarId, VarId),
    /// mul * a + add (the additive constant does not affect gradients)
    Affine(VarId, f64),
    Relu(VarId),
    /// a^c elementwise, c a constant
    PowConst(VarId, f64),
    Ln(VarId),
    SoftmaxRows(VarId),
    /// Row-wise layer norm with learnable gain/bias (1 x d each).
    LayerNormRows {
        x: VarId,
        gamma: VarId,
        beta: VarId,
    },
    /// m x d -> 1 x d
    MeanRows(VarId),
    /// -> 1 x 1
    SumAll(VarId),
    /// Rows scaled to unit L2 norm.
    L2NormRows(VarId),
    GatherRows {
        a: VarId,
        idx: Vec<usize>,
    },
    /// Picks single elements -> n x 1.
    GatherElems {
        a: VarId,
        idx: Vec<(usize, usize)>,
    },
    SliceCols {
        a: VarId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<VarId>),
    /// Stacks 1 x d rows into m x d.
    StackRows(Vec<VarId>),
    /// Sliding-window unfold: (n x c) -> (p x kernel*c) with given stride.
    Im2Col {
        a: VarId,
        kernel: usize,
        stride: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-30;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the sweep's scalar root with respect to `id`; zero array
    /// if the root does not depend on it.
    pub fn get(&self, id: VarId, tape: &Tape) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[id.0].value.raw_dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn affine(&mut self, a: VarId, mul: f64, add: f64) -> VarId {
        let v = self.value(a).mapv(|x| mul * x + add);
        self.push(v, Op::Affine(a, mul))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn pow_const(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).mapv(|x| x.powf(c));
        self.push(v, Op::PowConst(a, c))
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let normalized = layer_norm_normalize(self.value(x));
        let v = &normalized * self.value(gamma) + self.value(beta);
        self.push(v, Op::LayerNormRows { x, gamma, beta })
    }

    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let m = self.value(a).nrows() as f64;
        let v = self
            .value(a)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .mapv(|x| x / m);
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn l2_normalize_rows(&mut self, a: VarId) -> VarId {
        let v = l2_normalize_rows(self.value(a));
        self.push(v, Op::L2NormRows(a))
    }

    pub fn gather_rows(&mut self, a: VarId, idx: Vec<usize>) -> VarId {
        let src = self.value(a);
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        self.push(v, Op::GatherRows { a, idx })
    }

    pub fn gather_elems(&mut self, a: VarId, idx: Vec<(usize, usize)>) -> VarId {
        let src = self.value(a);
        let mut v = Array2::zeros((idx.len(), 1));
        for (i, &(r, c)) in idx.iter().enumerate() {
            v[[i, 0]] = src[[r, c]];
        }
        self.push(v, Op::GatherElems { a, idx })
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<VarId>) -> VarId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn stack_rows(&mut self, parts: Vec<VarId>) -> VarId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("stack shape mismatch");
        self.push(v, Op::StackRows(parts))
    }

    pub fn im2col(&mut self, a: VarId, kernel: usize, stride: usize) -> VarId {
        let src = self.value(a);
        let (n, c) = (src.nrows(), src.ncols());
        assert!(kernel <= n, "kernel {kernel} larger than {n} rows");
        let p = (n - kernel) / stride + 1;
        let mut v = Array2::zeros((p, kernel * c));
        for i in 0..p {
            for j in 0..kernel {
                for ch in 0..c {
                    v[[i, j * c + ch]] = src[[i * stride + j, ch]];
                }
            }
        }
        self.push(v, Op::Im2Col { a, kernel, stride })
    }

    /// Reverse sweep from a 1x1 scalar node.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, dy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add_to = |grads: &mut [Option<Array2<f64>>], id: VarId, delta: Array2<f64>| {
            match &mut grads[id.0] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = dy.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(dy);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let da = dy.dot(self.value(*b));
                let db = dy.t().dot(self.value(*a));
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, dy.clone());
                add_to(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, dy.clone());
                add_to(grads, *b, -dy);
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, dy.clone());
                let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *row, dr);
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, dy * self.value(*b));
                add_to(grads, *b, dy * self.value(*a));
            }
            Op::Affine(a, mul) => {
                add_to(grads, *a, dy.mapv(|x| x * mul));
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                add_to(grads, *a, dy * &mask);
            }
            Op::PowConst(a, c) => {
                if *c == 0.0 {
                    return;
                }
                let x = self.value(*a);
                let dx = x.mapv(|v| c * v.powf(c - 1.0)) * dy;
                add_to(grads, *a, dx);
            }
            Op::Ln(a) => {
                add_to(grads, *a, dy / self.value(*a));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let inner = (dy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = y * &(dy - &inner);
                add_to(grads, *a, dx);
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let xv = self.value(*x);
                let g = self.value(*gamma);
                let normalized = layer_norm_normalize(xv);
                let d = xv.ncols() as f64;
                let dgamma = (dy * &normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                // dxhat = dy * gamma (gamma broadcast over rows)
                let dxhat = dy * g;
                let mean_dxhat = dxhat
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1))
                    .mapv(|v| v / d);
                let mean_dxhat_xhat = (&dxhat * &normalized)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1))
                    .mapv(|v| v / d);
                let inv_std = row_inv_std(xv);
                let dx = (&dxhat - &mean_dxhat - &(&normalized * &mean_dxhat_xhat)) * &inv_std;
                add_to(grads, *x, dx);
                add_to(grads, *gamma, dgamma);
                add_to(grads, *beta, dbeta);
            }
            Op::MeanRows(a) => {
                let m = self.value(*a).nrows();
                let mut dx = Array2::zeros(self.value(*a).raw_dim());
                let scaled = dy.mapv(|v| v / m as f64);
                for mut row in dx.rows_mut() {
                    row += &scaled.row(0);
                }
                add_to(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let dx = Array2::from_elem(self.value(*a).raw_dim(), dy[[0, 0]]);
                add_to(grads, *a, dx);
            }
            Op::L2NormRows(a) => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let norms = x
                    .rows()
                    .into_iter()
                    .map(|r| r.dot(&r).sqrt().max(NORM_EPS))
                    .collect::<Vec<f64>>();
                let mut dx = Array2::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let proj = yr.dot(&dyr);
                    for c in 0..x.ncols() {
                        dx[[r, c]] = (dyr[c] - yr[c] * proj) / norms[r];
                    }
                }
                add_to(grads, *a, dx);
            }
            Op::GatherRows { a, idx } => {
                let mut dx = Array2::zeros(self.value(*a).raw_dim());
                for (i_out, &r) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(r);
                    row += &dy.row(i_out);
                }
                add_to(grads, *a, dx);
            }
            Op::GatherElems { a, idx } => {
                let mut dx = Array2::zeros(self.value(*a).raw_dim());
                for (i_out, &(r, c)) in idx.iter().enumerate() {
                    dx[[r, c]] += dy[[i_out, 0]];
                }
                add_to(grads, *a, dx);
            }
            Op::SliceCols { a, start, len } => {
                let mut dx = Array2::zeros(self.value(*a).raw_dim());
                dx.slice_mut(ndarray::s![.., *start..*start + *len])
                    .assign(dy);
                add_to(grads, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    let dp = dy.slice(ndarray::s![.., start..start + w]).to_owned();
                    add_to(grads, *p, dp);
                    start += w;
                }
            }
            Op::StackRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    let dp = dy.slice(ndarray::s![start..start + h, ..]).to_owned();
                    add_to(grads, *p, dp);
                    start += h;
                }
            }
            Op::Im2Col { a, kernel, stride } => {
                let c = self.value(*a).ncols();
                let mut dx = Array2::zeros(self.value(*a).raw_dim());
                for i_out in 0..dy.nrows() {
                    for j in 0..*kernel {
                        for ch in 0..c {
                            dx[[i_out * stride + j, ch]] += dy[[i_out, j * c + ch]];
                        }
                    }
                }
                add_to(grads, *a, dx);
            }
        }
    }
}

/// Numerically stable row-wise softmax, shared by tape and plain forward.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise (x - mean) / sqrt(var + eps), shared by tape and plain forward.
pub fn layer_norm_normalize(x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn row_inv_std(x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let col: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|row| {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            1.0 / (var + LN_EPS).sqrt()
        })
        .collect();
    Array2::from_shape_vec((x.nrows(), 1), col).unwrap()
}

/// Row-wise unit-norm scaling, shared by tape and plain forward.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(NORM_EPS);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(w . f(x)) / dx against central differences for a generic
    /// graph builder. `build` returns the output var given leaf ids.
    fn check_grad<F>(inputs: Vec<Array2<f64>>, build: F)
    where
        F: Fn(&mut Tape, &[VarId]) -> VarId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // Analytic pass
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &ids);
        let weights = rand_array(&mut rng, tape.value(out).nrows(), tape.value(out).ncols());
        let w_id = tape.leaf(weights.clone());
        let prod = tape.mul(out, w_id);
        let scalar = tape.sum_all(prod);
        let grads = tape.backward(scalar);

        let scalar_of = |perturbed: &[Array2<f64>]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<VarId> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
            let out = build(&mut t, &ids);
            (t.value(out) * &weights).sum()
        };

        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[k], &tape);
            for r in 0..input.nrows() {
                for c in 0..input.ncols() {
                    let mut plus = inputs.clone();
                    plus[k][[r, c]] += h;
                    let mut minus = inputs.clone();
                    minus[k][[r, c]] -= h;
                    let numeric = (scalar_of(&plus) - scalar_of(&minus)) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(numeric.abs()).max(1e-4);
                    assert!(
                        (a - numeric).abs() / denom < 1e-4,
                        "input {k} at ({r},{c}): analytic {a}, numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_array(&mut rng, 3, 4);
        let b = rand_array(&mut rng, 4, 2);
        check_grad(vec![a, b], |t, ids| t.matmul(ids[0], ids[1]));
    }

    #[test]
    fn matmul_nt_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_array(&mut rng, 3, 4);
        let b = rand_array(&mut rng, 5, 4);
        check_grad(vec![a, b], |t, ids| t.matmul_nt(ids[0], ids[1]));
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_array(&mut rng, 4, 5);
        check_grad(vec![a], |t, ids| t.softmax_rows(ids[0]));
    }

    #[test]
    fn layer_norm_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_array(&mut rng, 4, 6);
        let gamma = rand_array(&mut rng, 1, 6);
        let beta = rand_array(&mut rng, 1, 6);
        check_grad(vec![x, gamma, beta], |t, ids| {
            t.layer_norm_rows(ids[0], ids[1], ids[2])
        });
    }

    #[test]
    fn l2_normalize_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_array(&mut rng, 3, 4) + 0.5;
        check_grad(vec![x], |t, ids| t.l2_normalize_rows(ids[0]));
    }

    #[test]
    fn composite_attention_block_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_array(&mut rng, 5, 4);
        let wq = rand_array(&mut rng, 4, 4);
        let wk = rand_array(&mut rng, 4, 4);
        let wv = rand_array(&mut rng, 4, 4);
        check_grad(vec![x, wq, wk, wv], |t, ids| {
            let q = t.matmul(ids[0], ids[1]);
            let k = t.matmul(ids[0], ids[2]);
            let v = t.matmul(ids[0], ids[3]);
            let scores = t.matmul_nt(q, k);
            let scaled = t.affine(scores, 0.5, 0.0);
            let attn = t.softmax_rows(scaled);
            t.matmul(attn, v)
        });
    }

    #[test]
    fn gather_slice_stack_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_array(&mut rng, 6, 4);
        check_grad(vec![x], |t, ids| {
            let g = t.gather_rows(ids[0], vec![0, 2, 2, 5]);
            let s1 = t.slice_cols(g, 0, 2);
            let s2 = t.slice_cols(g, 2, 2);
            let c = t.concat_cols(vec![s2, s1]);
            let m = t.mean_rows(c);
            let m2 = t.relu(m);
            t.stack_rows(vec![m, m2])
        });
    }

    #[test]
    fn elementwise_op_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_array(&mut rng, 3, 3).mapv(|v| v.abs() + 0.2);
        let y = rand_array(&mut rng, 3, 3);
        check_grad(vec![x, y], |t, ids| {
            let l = t.ln(ids[0]);
            let p = t.pow_const(ids[0], 1.7);
            let m = t.mul(l, ids[1]);
            let a = t.add(m, p);
            let s = t.sub(a, ids[1]);
            t.affine(s, -0.3, 0.1)
        });
    }

    #[test]
    fn im2col_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_array(&mut rng, 9, 2);
        check_grad(vec![x], |t, ids| t.im2col(ids[0], 3, 2));
    }

    #[test]
    fn add_row_and_gather_elems_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_array(&mut rng, 4, 3);
        let row = rand_array(&mut rng, 1, 3);
        check_grad(vec![x, row], |t, ids| {
            let s = t.add_row(ids[0], ids[1]);
            t.gather_elems(s, vec![(0, 1), (3, 2), (2, 0)])
        });
    }
}
