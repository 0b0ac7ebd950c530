//! Recorded forward tape with hand-derived reverse-mode rules.
//!
//! Every forward operation appends a node holding its output value and the
//! ids of its inputs. `backward` walks the nodes in reverse and applies the
//! per-operation adjoint rules below. Parameter leaves borrow the parameter
//! blocks instead of copying them; their adjoints are accumulated into one
//! gradient matrix per block.

use crate::tensor::Matrix;

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Param(usize),
    Const,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Mul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub struct Tape<'a> {
    params: &'a [Matrix],
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    /// Creates a tape whose first `params.len()` nodes are parameter leaves,
    /// so node id `i < params.len()` is parameter block `i`.
    pub fn new(params: &'a [Matrix]) -> Self {
        let nodes = (0..params.len())
            .map(|i| Node {
                value: None,
                op: Op::Param(i),
            })
            .collect();
        Self { params, nodes }
    }

    pub fn param(&self, block: usize) -> NodeId {
        debug_assert!(block < self.params.len());
        block
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        match &self.nodes[id].op {
            Op::Param(b) => &self.params[*b],
            _ => self.nodes[id].value.as_ref().expect("node value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1×n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, r.cols, "add_row width");
        for i in 0..v.rows {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data
            .iter_mut()
            .for_each(|x| *x = 1.0 / (1.0 + (-*x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!(v.shape(), bv.shape(), "mul shape");
        for (x, y) in v.data.iter_mut().zip(&bv.data) {
            *x *= y;
        }
        self.push(v, Op::Mul(a, b))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let (rows, cols) = xv.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let n = (row[j] - mean) * is;
                normed.set(i, j, n);
                out.set(i, j, n * g.data[j] + b.data[j]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rows, bv.rows, "concat_cols height");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..av.rows {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let v = Matrix::from_vec(av.rows, av.cols + bv.cols, data);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice_rows(start, end);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice_cols(start, end);
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let src = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * src.cols);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let v = Matrix::from_vec(indices.len(), src.cols, data);
        self.push(v, Op::GatherRows(a, indices.to_vec()))
    }

    /// Propagates the seeded adjoints back to the parameter leaves.
    ///
    /// Returns one gradient matrix per parameter block (zeros for blocks the
    /// tape never touched).
    pub fn backward(&self, seeds: &[(NodeId, Matrix)]) -> Vec<Matrix> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            accumulate(&mut grads, *id, g.clone());
        }
        for id in (self.params.len()..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
        }
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                grads[i]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(p.rows, p.cols))
            })
            .collect()
    }

    fn propagate(&self, id: NodeId, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = self.value(id);
        match &self.nodes[id].op {
            Op::Param(_) | Op::Const => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_bt(self.value(*b));
                let db = self.value(*a).matmul_at(g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulBt(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.matmul_at(self.value(*a));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                let mut dr = Matrix::zeros(1, g.cols);
                for i in 0..g.rows {
                    for (d, x) in dr.data.iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, dr);
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_assign(*s);
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                for (x, y) in d.data.iter_mut().zip(&out.data) {
                    *x *= 1.0 - y * y;
                }
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                for (x, y) in d.data.iter_mut().zip(&out.data) {
                    *x *= y * (1.0 - y);
                }
                accumulate(grads, *a, d);
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (x, y) in da.data.iter_mut().zip(&self.value(*b).data) {
                    *x *= y;
                }
                let mut db = g.clone();
                for (x, y) in db.data.iter_mut().zip(&self.value(*a).data) {
                    *x *= y;
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let inner: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                        *dv = y[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (rows, cols) = g.shape();
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                let n = cols as f64;
                for i in 0..rows {
                    let gr = g.row(i);
                    let nr = normed.row(i);
                    let mut mean_dn = 0.0;
                    let mut mean_dn_n = 0.0;
                    for j in 0..cols {
                        dgain.data[j] += gr[j] * nr[j];
                        dbias.data[j] += gr[j];
                        let dn = gr[j] * gv.data[j];
                        mean_dn += dn;
                        mean_dn_n += dn * nr[j];
                    }
                    mean_dn /= n;
                    mean_dn_n /= n;
                    for j in 0..cols {
                        let dn = gr[j] * gv.data[j];
                        dx.set(i, j, inv_std[i] * (dn - mean_dn - nr[j] * mean_dn_n));
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows;
                    accumulate(grads, p, g.slice_rows(start, start + r));
                    start += r;
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols;
                accumulate(grads, *a, g.slice_cols(0, ac));
                accumulate(grads, *b, g.slice_cols(ac, g.cols));
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows, src.cols);
                d.data[start * src.cols..start * src.cols + g.len()].copy_from_slice(&g.data);
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start, end) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows, src.cols);
                for i in 0..src.rows {
                    d.row_mut(i)[*start..*end].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, d);
            }
            Op::GatherRows(a, indices) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows, src.cols);
                for (k, &i) in indices.iter().enumerate() {
                    for (x, y) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
