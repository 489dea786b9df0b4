//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! A [`Tape`] records a DAG of matrix operations; [`Tape::backward`] walks
//! it once in reverse and accumulates gradients for every node. All tensors
//! are `Array2<f64>` with rows acting as the batch dimension; scalars are
//! 1x1 matrices. The op set is exactly what the models in this crate need.

use ndarray::{Array1, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Raw node index, used to look up gradients returned by backward.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// a (BxI) . b (IxO)
    MatMul(usize, usize),
    /// a (BxD) . b (CxD) transposed -> BxC
    MatMulNT(usize, usize),
    /// a (BxD) + row-broadcast bias (1xD)
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Softplus(usize),
    Square(usize),
    /// mean over all elements -> 1x1
    Mean(usize),
    /// sum over all elements -> 1x1
    Sum(usize),
    /// mean over columns -> Bx1
    RowMean(usize),
    /// rows scaled to unit L2 norm
    NormalizeRows(usize),
    Transpose(usize),
    /// diagonal of a square matrix -> Bx1
    Diag(usize),
    /// log(sum(exp(row))) -> Bx1
    RowLogSumExp(usize),
    ConcatCols(Vec<usize>),
    /// mean of embedding-table rows per id list -> BxD
    EmbedMean { table: usize, ids: Vec<Vec<usize>> },
    /// elementwise clamp; gradient passes only strictly inside the band
    Clamp(usize, f64, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable softplus ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.shape(), &[1, 1]);
        m[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        debug_assert_eq!(self.nodes[bias.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[bias.0].value;
        self.push(v, Op::AddRow(a.0, bias.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = &self.nodes[a.0].value * s;
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = &self.nodes[a.0].value + s;
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn softplus_of(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a.0))
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let cols = src.ncols() as f64;
        let v = src
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .mapv(|x| x / cols);
        self.push(v, Op::RowMean(a.0))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::NormalizeRows(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn diag(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        debug_assert_eq!(src.nrows(), src.ncols());
        let d = src.diag().to_owned().insert_axis(Axis(1));
        self.push(d, Op::Diag(a.0))
    }

    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let mut out = Array2::<f64>::zeros((src.nrows(), 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            out[[i, 0]] = mx + s.ln();
        }
        self.push(out, Op::RowLogSumExp(a.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut v = Array2::<f64>::zeros((rows, total));
        let mut at = 0;
        for p in parts {
            let src = &self.nodes[p.0].value;
            debug_assert_eq!(src.nrows(), rows);
            let w = src.ncols();
            v.slice_mut(ndarray::s![.., at..at + w]).assign(src);
            at += w;
        }
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Mean-pool rows of an embedding table per id list. Each id list must be
    /// non-empty.
    pub fn embed_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Var {
        let tab = &self.nodes[table.0].value;
        let d = tab.ncols();
        let mut v = Array2::<f64>::zeros((ids.len(), d));
        for (i, list) in ids.iter().enumerate() {
            debug_assert!(!list.is_empty());
            for &id in list {
                for j in 0..d {
                    v[[i, j]] += tab[[id, j]];
                }
            }
            let inv = 1.0 / list.len() as f64;
            for j in 0..d {
                v[[i, j]] *= inv;
            }
        }
        self.push(v, Op::EmbedMean { table: table.0, ids })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi))
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    ///
    /// Entries are `None` for nodes the root does not depend on.
    pub fn backward(&self, root: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(
            self.nodes[root.0].value.shape(),
            &[1, 1],
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value);
                    let gb = g.t().dot(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &node.value;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = &g * &self.nodes[*a].value.mapv(sigmoid);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = &g * &(&self.nodes[*a].value * 2.0);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let src = &self.nodes[*a].value;
                    let scale = g[[0, 0]] / src.len() as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(src.raw_dim(), scale));
                }
                Op::Sum(a) => {
                    let src = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, Array2::from_elem(src.raw_dim(), g[[0, 0]]));
                }
                Op::RowMean(a) => {
                    let src = &self.nodes[*a].value;
                    let cols = src.ncols();
                    let mut ga = Array2::<f64>::zeros(src.raw_dim());
                    for i in 0..src.nrows() {
                        let v = g[[i, 0]] / cols as f64;
                        for j in 0..cols {
                            ga[[i, j]] = v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let mut ga = Array2::<f64>::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let xi = x.row(i);
                        let norm = xi.dot(&xi).sqrt().max(1e-12);
                        let yi = y.row(i);
                        let gi = g.row(i);
                        let dot = gi.dot(&yi);
                        for j in 0..x.ncols() {
                            ga[[i, j]] = (gi[j] - yi[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Diag(a) => {
                    let n = self.nodes[*a].value.nrows();
                    let mut ga = Array2::<f64>::zeros((n, n));
                    for i in 0..n {
                        ga[[i, i]] = g[[i, 0]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowLogSumExp(a) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Array2::<f64>::zeros(src.raw_dim());
                    for i in 0..src.nrows() {
                        let row = src.row(i);
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Array1<f64> = row.mapv(|x| (x - mx).exp());
                        let total: f64 = exps.sum();
                        for j in 0..src.ncols() {
                            ga[[i, j]] = g[[i, 0]] * exps[j] / total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let gp = g.slice(ndarray::s![.., at..at + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += w;
                    }
                }
                Op::EmbedMean { table, ids } => {
                    let tab = &self.nodes[*table].value;
                    let mut gt = Array2::<f64>::zeros(tab.raw_dim());
                    for (i, list) in ids.iter().enumerate() {
                        let inv = 1.0 / list.len() as f64;
                        for &id in list {
                            for j in 0..tab.ncols() {
                                gt[[id, j]] += g[[i, j]] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Clamp(a, lo, hi) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = g.clone();
                    for (gv, &x) in ga.iter_mut().zip(src.iter()) {
                        if x <= *lo || x >= *hi {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
            // Interior gradients are dropped once propagated; only leaf
            // gradients remain in the result.
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
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

    /// Central finite difference on a scalar-valued closure of one matrix.
    fn fd<F: Fn(&Array2<f64>) -> f64>(x: &Array2<f64>, f: F) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::<f64>::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / scale < tol,
                "gradient mismatch: {x} vs {y}"
            );
        }
    }

    #[test]
    fn matmul_chain_gradients_match_fd() {
        let mut rng = crate::seeding::rng_from_seed(11);
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((1, 5), |_| rng.gen_range(-1.0..1.0));

        let run = |xv: &Array2<f64>, wv: &Array2<f64>, bv: &Array2<f64>| {
            let mut t = Tape::new();
            let xi = t.leaf(xv.clone());
            let wi = t.leaf(wv.clone());
            let bi = t.leaf(bv.clone());
            let h = t.matmul(xi, wi);
            let h = t.add_row(h, bi);
            let h = t.tanh(h);
            let h = t.square(h);
            let loss = t.mean(h);
            (t, xi, wi, bi, loss)
        };

        let (t, xi, wi, bi, loss) = run(&x, &w, &b);
        let grads = t.backward(loss);

        let gx = grads[xi.0].as_ref().unwrap();
        let gw = grads[wi.0].as_ref().unwrap();
        let gb = grads[bi.0].as_ref().unwrap();

        let eval_x = |v: &Array2<f64>| { let r = run(v, &w, &b); r.0.scalar(r.4) };
        let eval_w = |v: &Array2<f64>| { let r = run(&x, v, &b); r.0.scalar(r.4) };
        let eval_b = |v: &Array2<f64>| { let r = run(&x, &w, v); r.0.scalar(r.4) };
        assert_close(gx, &fd(&x, eval_x), 1e-6);
        assert_close(gw, &fd(&w, eval_w), 1e-6);
        assert_close(gb, &fd(&b, eval_b), 1e-6);
    }

    #[test]
    fn contrastive_style_ops_match_fd() {
        let mut rng = crate::seeding::rng_from_seed(13);
        let a = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));

        let run = |av: &Array2<f64>, bv: &Array2<f64>| -> (Tape, Var, Var, Var) {
            let mut t = Tape::new();
            let ai = t.leaf(av.clone());
            let bi = t.leaf(bv.clone());
            let an = t.normalize_rows(ai);
            let bn = t.normalize_rows(bi);
            let sim = t.matmul_nt(an, bn);
            let sim = t.scale(sim, 1.0 / 0.07);
            let lse = t.row_logsumexp(sim);
            let d = t.diag(sim);
            let gap = t.sub(lse, d);
            let loss = t.mean(gap);
            (t, ai, bi, loss)
        };

        let (t, ai, bi, loss) = run(&a, &b);
        let grads = t.backward(loss);
        let ga = grads[ai.0].as_ref().unwrap();
        let gb = grads[bi.0].as_ref().unwrap();

        assert_close(ga, &fd(&a, |v| { let r = run(v, &b); r.0.scalar(r.3) }), 1e-5);
        assert_close(gb, &fd(&b, |v| { let r = run(&a, v); r.0.scalar(r.3) }), 1e-5);
    }

    #[test]
    fn embed_mean_and_concat_match_fd() {
        let mut rng = crate::seeding::rng_from_seed(17);
        let table = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let extra = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let ids = vec![vec![0usize, 2, 2], vec![5]];

        let run = |tv: &Array2<f64>, ev: &Array2<f64>| -> (Tape, Var, Var, Var) {
            let mut t = Tape::new();
            let ti = t.leaf(tv.clone());
            let ei = t.leaf(ev.clone());
            let pooled = t.embed_mean(ti, ids.clone());
            let cat = t.concat_cols(&[pooled, ei]);
            let sq = t.square(cat);
            let loss = t.sum(sq);
            (t, ti, ei, loss)
        };

        let (t, ti, ei, loss) = run(&table, &extra);
        let grads = t.backward(loss);
        let gt = grads[ti.0].as_ref().unwrap();
        let ge = grads[ei.0].as_ref().unwrap();
        assert_close(gt, &fd(&table, |v| { let r = run(v, &extra); r.0.scalar(r.3) }), 1e-6);
        assert_close(ge, &fd(&extra, |v| { let r = run(&table, v); r.0.scalar(r.3) }), 1e-6);
    }

    #[test]
    fn softplus_and_clamp_match_fd() {
        let x = array![[0.5, -0.25, 2.0, -3.0]];
        let run = |xv: &Array2<f64>| -> (Tape, Var, Var) {
            let mut t = Tape::new();
            let xi = t.leaf(xv.clone());
            let c = t.clamp(xi, -2.0, 1.5);
            let s = t.softplus_of(c);
            let loss = t.sum(s);
            (t, xi, loss)
        };
        let (t, xi, loss) = run(&x);
        let grads = t.backward(loss);
        let gx = grads[xi.0].as_ref().unwrap();
        // Clamped entries (2.0 and -3.0) must have zero gradient.
        assert_eq!(gx[[0, 2]], 0.0);
        assert_eq!(gx[[0, 3]], 0.0);
        assert!((gx[[0, 0]] - sigmoid(0.5)).abs() < 1e-10);
        assert!((gx[[0, 1]] - sigmoid(-0.25)).abs() < 1e-10);
    }
}
