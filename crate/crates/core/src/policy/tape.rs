//! A small eager reverse-mode autodiff tape over dense row-major f64 matrices.
//!
//! Values are computed as nodes are pushed; [`Graph::backward`] walks the
//! tape in reverse and accumulates parameter gradients into a [`Gradients`].

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out += a · b`
fn matmul_acc(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// `out += a · bᵀ`
fn matmul_bt_acc(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.rows);
    debug_assert_eq!(k, b.cols);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ · b`
fn matmul_at_acc(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let x = a.data[p * m + i];
            if x == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Named, shaped parameter tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn scale(&mut self, f: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= f);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// Adds a `1×n` row to every row of `a`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRow(Var),
    /// `log Σ_{k ∈ idx} exp(a_k)` over a single row.
    LogSumExpAt(Var, Vec<usize>),
    Pick(Var, usize),
    Sum(Vec<Var>),
}

struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
}

/// One forward computation. Parameters are borrowed, never copied.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.params.get(*id),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.input(Tensor::zeros(rows, cols))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        matmul_acc(ta, tb, &mut out.data);
        self.push(Op::MatMul(a, b), out)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_bt shape mismatch");
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        matmul_bt_acc(ta, tb, &mut out.data);
        self.push(Op::MatMulBt(a, b), out)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert!(tr.rows == 1 && tr.cols == ta.cols, "add_row shape mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, b) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&tr.data) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| f(*x)).collect());
        self.push(op, out)
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        self.map(a, Op::Scale(a, f), |x| x * f)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, cols, data))
    }

    /// Columns `start..start+width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let ta = self.value(a);
        assert!(start + width <= ta.cols, "slice out of range");
        let mut data = Vec::with_capacity(ta.rows * width);
        for r in 0..ta.rows {
            data.extend_from_slice(&ta.row(r)[start..start + width]);
        }
        self.push(Op::SliceCols(a, start), Tensor::from_vec(ta.rows, width, data))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * ta.cols);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        self.push(Op::GatherRows(a, idx.to_vec()), Tensor::from_vec(idx.len(), ta.cols, data))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.gather_rows(a, &[r])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * ta.cols..(r + 1) * ta.cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn log_softmax_row(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows, 1, "log_softmax_row expects a single row");
        let lse = log_sum_exp(ta.data.iter().copied());
        let out = Tensor::from_vec(1, ta.cols, ta.data.iter().map(|x| x - lse).collect());
        self.push(Op::LogSoftmaxRow(a), out)
    }

    pub fn log_sum_exp_at(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows, 1, "log_sum_exp_at expects a single row");
        let v = log_sum_exp(idx.iter().map(|&i| ta.data[i]));
        self.push(Op::LogSumExpAt(a, idx.to_vec()), Tensor::from_vec(1, 1, vec![v]))
    }

    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).data[i];
        self.push(Op::Pick(a, i), Tensor::from_vec(1, 1, vec![v]))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]);
        let mut out = Tensor::zeros(first.rows, first.cols);
        for &p in parts {
            out.add_assign(self.value(p));
        }
        self.push(Op::Sum(parts.to_vec()), out)
    }

    /// Multiplies by a fresh inverted-dropout mask; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (rows, cols) = self.value(a).shape();
        let keep = 1.0 - p;
        let mask = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.input(Tensor::from_vec(rows, cols, mask));
        self.mul(a, m)
    }

    /// Back-propagates from scalar `loss`, adding `scale · ∂loss/∂θ` into `grads`.
    pub fn backward(&self, loss: Var, scale: f64, grads: &mut Gradients) {
        let mut g: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        let lt = self.value(loss);
        assert_eq!(lt.data.len(), 1, "backward from a non-scalar");
        g[loss.0] = Some(Tensor::from_vec(1, 1, vec![scale]));

        fn acc(g: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
            g[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
        }

        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            let out = node.value.as_ref();
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.tensors[id.0].add_assign(&gi),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    matmul_bt_acc(&gi, tb, &mut acc(&mut g, *a, ta.shape()).data);
                    matmul_at_acc(ta, &gi, &mut acc(&mut g, *b, tb.shape()).data);
                }
                Op::MatMulBt(a, b) => {
                    // out = a bᵀ: ga += g b, gb += gᵀ a
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    matmul_acc(&gi, tb, &mut acc(&mut g, *a, ta.shape()).data);
                    matmul_at_acc(&gi, ta, &mut acc(&mut g, *b, tb.shape()).data);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, gi.shape()).add_assign(&gi);
                    acc(&mut g, *b, gi.shape()).add_assign(&gi);
                }
                Op::AddRow(a, r) => {
                    acc(&mut g, *a, gi.shape()).add_assign(&gi);
                    let gr = acc(&mut g, *r, (1, gi.cols));
                    for row in 0..gi.rows {
                        for (x, y) in gr.data.iter_mut().zip(gi.row(row)) {
                            *x += y;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = gi.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = gi.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    let shape = gi.shape();
                    for (x, y) in acc(&mut g, *a, shape).data.iter_mut().zip(ga) {
                        *x += y;
                    }
                    if !matches!(self.nodes[b.0].op, Op::Input) {
                        for (x, y) in acc(&mut g, *b, shape).data.iter_mut().zip(gb) {
                            *x += y;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    for (x, y) in acc(&mut g, *a, gi.shape()).data.iter_mut().zip(&gi.data) {
                        *x += f * y;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = out.expect("value");
                    let ga = acc(&mut g, *a, gi.shape());
                    for ((x, gy), s) in ga.data.iter_mut().zip(&gi.data).zip(&y.data) {
                        *x += gy * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let y = out.expect("value");
                    let ga = acc(&mut g, *a, gi.shape());
                    for ((x, gy), t) in ga.data.iter_mut().zip(&gi.data).zip(&y.data) {
                        *x += gy * (1.0 - t * t);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        let gp = acc(&mut g, p, shape);
                        for r in 0..gi.rows {
                            let src = &gi.row(r)[offset..offset + shape.1];
                            for (x, y) in gp.data[r * shape.1..(r + 1) * shape.1].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                        offset += shape.1;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        let n = shape.0 * shape.1;
                        let gp = acc(&mut g, p, shape);
                        for (x, y) in gp.data.iter_mut().zip(&gi.data[offset..offset + n]) {
                            *x += y;
                        }
                        offset += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let shape = self.value(*a).shape();
                    let ga = acc(&mut g, *a, shape);
                    for r in 0..gi.rows {
                        let dst = &mut ga.data[r * shape.1 + start..r * shape.1 + start + gi.cols];
                        for (x, y) in dst.iter_mut().zip(gi.row(r)) {
                            *x += y;
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let shape = self.value(*a).shape();
                    // Embedding tables get scattered straight into their gradient buffer.
                    let target: &mut Tensor = match self.nodes[a.0].op {
                        Op::Param(id) => &mut grads.tensors[id.0],
                        Op::Input => continue,
                        _ => acc(&mut g, *a, shape),
                    };
                    for (k, &r) in idx.iter().enumerate() {
                        let dst = &mut target.data[r * shape.1..(r + 1) * shape.1];
                        for (x, y) in dst.iter_mut().zip(gi.row(k)) {
                            *x += y;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = out.expect("value");
                    let ga = acc(&mut g, *a, gi.shape());
                    for r in 0..gi.rows {
                        let (yr, gr) = (y.row(r), gi.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..gi.cols {
                            ga.data[r * gi.cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LogSoftmaxRow(a) => {
                    let y = out.expect("value");
                    let total: f64 = gi.data.iter().sum();
                    let ga = acc(&mut g, *a, gi.shape());
                    for ((x, gy), lp) in ga.data.iter_mut().zip(&gi.data).zip(&y.data) {
                        *x += gy - lp.exp() * total;
                    }
                }
                Op::LogSumExpAt(a, idx) => {
                    let ta = self.value(*a);
                    let lse = out.expect("value").scalar();
                    let gy = gi.scalar();
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for &k in idx {
                        ga.data[k] += gy * (ta.data[k] - lse).exp();
                    }
                    acc(&mut g, *a, ta.shape()).add_assign(&ga);
                }
                Op::Pick(a, k) => {
                    let shape = self.value(*a).shape();
                    acc(&mut g, *a, shape).data[*k] += gi.scalar();
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut g, p, gi.shape()).add_assign(&gi);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of every op on a small composite function.
    #[test]
    fn ops_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let a = store.add("a", rand_tensor(&mut rng, 3, 4));
        let b = store.add("b", rand_tensor(&mut rng, 4, 2));
        let r = store.add("r", rand_tensor(&mut rng, 1, 2));
        let e = store.add("e", rand_tensor(&mut rng, 5, 2));

        let f = |store: &ParamStore, grads: Option<&mut Gradients>| -> f64 {
            let mut g = Graph::new(store);
            let (va, vb, vr, ve) = (g.param(a), g.param(b), g.param(r), g.param(e));
            let ab = g.matmul(va, vb);
            let ab = g.add_row(ab, vr);
            let s = g.sigmoid(ab);
            let t = g.tanh(ab);
            let m = g.mul(s, t);
            let emb = g.gather_rows(ve, &[0, 3, 3]);
            let mm = g.add(m, emb);
            let cat = g.concat_cols(&[mm, t]);
            let sl = g.slice_cols(cat, 1, 2);
            let sm = g.softmax_rows(sl);
            let att = g.matmul_bt(sm, emb);
            let mixed = g.matmul(att, sm);
            let rows = g.concat_rows(&[mixed, sm]);
            let row = g.row(rows, 4);
            let lp = g.log_softmax_row(row);
            let x = g.log_sum_exp_at(lp, &[0]);
            let y = g.pick(att, 5);
            let z = g.scale(y, 0.7);
            let loss = g.sum(&[x, z]);
            let v = g.value(loss).scalar();
            if let Some(grads) = grads {
                g.backward(loss, 1.0, grads);
            }
            v
        };

        let mut grads = store.zeros_like();
        f(&store, Some(&mut grads));
        let eps = 1e-6;
        for p in 0..store.len() {
            for k in 0..store.tensors[p].data.len() {
                let mut plus = store.clone();
                plus.tensors[p].data[k] += eps;
                let mut minus = store.clone();
                minus.tensors[p].data[k] -= eps;
                let num = (f(&plus, None) - f(&minus, None)) / (2.0 * eps);
                let ana = grads.tensors[p].data[k];
                assert!((num - ana).abs() < 1e-7, "param {p}[{k}]: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn uniform_attention_is_the_mean() {
        let mut store = ParamStore::default();
        let keys = store.add(
            "k",
            Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]),
        );
        let mut g = Graph::new(&store);
        let k = g.param(keys);
        let q = g.zeros(1, 2);
        let scores = g.matmul_bt(q, k);
        let alpha = g.softmax_rows(scores);
        let ctx = g.matmul(alpha, k);
        let v = g.value(ctx);
        assert!((v.data[0] - 3.0).abs() < 1e-12);
        assert!((v.data[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_sums_to_one() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_vec(1, 4, vec![0.3, -2.0, 5.0, 1.0]));
        let lp = g.log_softmax_row(x);
        let total: f64 = g.value(lp).data.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
