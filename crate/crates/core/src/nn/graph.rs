//! Eager tape-based reverse-mode autodiff over 2-D matrices.
//!
//! Each forward op appends a node holding its value; `backward` walks the
//! tape in reverse and accumulates gradients into a store-aligned buffer.
//! Everything is f64 and single-threaded per graph, so losses and gradients
//! are bit-reproducible; parallelism happens across graphs.

use super::params::{Gradients, ParamStore};
use crate::mat::Mat;

pub type NodeId = usize;

enum Op {
    /// Constant input, no gradient tracking.
    Input,
    /// Leaf bound to a parameter slot.
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Matrix plus a broadcast row vector.
    AddRow(NodeId, NodeId),
    /// Matrix times a broadcast row vector.
    MulRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// a * b^T without materializing the transpose.
    MatMulNT(NodeId, NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    /// Row-wise log-softmax.
    LogSoftmax(NodeId),
    /// Row-wise standardization without affine terms.
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    MeanRows(NodeId),
    SumAll(NodeId),
    /// Sliding-window stacking: T x C -> T_out x (k*C), zero padded.
    Unfold { x: NodeId, k: usize, stride: usize, pad_left: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    ConcatRows(Vec<NodeId>),
    /// Row lookup from a parameter table (embeddings).
    GatherRows { table: NodeId, idx: Vec<usize> },
    /// CTC loss over frame logits; cache holds softmax - posterior.
    CtcLoss { logits: NodeId, grad_cache: Mat },
    /// Mean cross-entropy over rows against integer targets.
    CeRows { logits: NodeId, targets: Vec<usize> },
    /// Mean binary cross-entropy with logits.
    BceLogits { logits: NodeId, labels: Vec<f64> },
    /// Mean absolute error.
    L1(NodeId, NodeId),
    /// Mean squared error.
    Mse(NodeId, NodeId),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.data.len(), 1);
        self.nodes[id].value.data[0]
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: usize) -> NodeId {
        self.push(self.store.value(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.add_assign(&self.nodes[b].value);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = &self.nodes[b].value;
        let av = &self.nodes[a].value;
        assert!(av.same_shape(bv), "sub shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        self.push(Mat::from_vec(av.rows, av.cols, data), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = &self.nodes[b].value;
        let av = &self.nodes[a].value;
        assert!(av.same_shape(bv), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        self.push(Mat::from_vec(av.rows, av.cols, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.nodes[a].value.map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let rv = &self.nodes[row].value;
        let av = &self.nodes[a].value;
        assert_eq!(rv.rows, 1, "add_row needs a row vector");
        assert_eq!(rv.cols, av.cols, "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += rv.data[c];
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let rv = &self.nodes[row].value;
        let av = &self.nodes[a].value;
        assert_eq!(rv.rows, 1, "mul_row needs a row vector");
        assert_eq!(rv.cols, av.cols, "mul_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= rv.data[c];
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a].value.matmul_nt(&self.nodes[b].value);
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let mut out = av.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let mut out = av.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= logsum;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows);
        let n = av.cols as f64;
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + 1e-6).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * istd;
            }
            inv_std.push(istd);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let mut out = Mat::zeros(1, av.cols);
        for r in 0..av.rows {
            for c in 0..av.cols {
                out.data[c] += av.data[r * av.cols + c];
            }
        }
        out.scale_assign(1.0 / av.rows as f64);
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let sum = self.nodes[a].value.data.iter().sum();
        self.push(Mat::scalar(sum), Op::SumAll(a))
    }

    /// T x C -> T_out x (k*C) window stacking with zero padding.
    pub fn unfold(&mut self, a: NodeId, k: usize, stride: usize, pad_left: usize, t_out: usize) -> NodeId {
        let av = &self.nodes[a].value;
        let (t_in, c) = (av.rows, av.cols);
        let mut out = Mat::zeros(t_out, k * c);
        for t in 0..t_out {
            for j in 0..k {
                let src = t as isize * stride as isize + j as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t_in {
                    let src = src as usize;
                    out.data[t * k * c + j * c..t * k * c + (j + 1) * c]
                        .copy_from_slice(av.row(src));
                }
            }
        }
        self.push(out, Op::Unfold { x: a, k, stride, pad_left })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = &self.nodes[a].value;
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x: a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.nodes[parts[0]].value.rows;
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = Mat::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = &self.nodes[a].value;
        assert!(start + len <= av.rows, "slice_rows out of range");
        let mut out = Mat::zeros(len, av.cols);
        for r in 0..len {
            out.row_mut(r).copy_from_slice(av.row(start + r));
        }
        self.push(out, Op::SliceRows { x: a, start, len })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.nodes[parts[0]].value.cols;
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.rows).sum();
        let mut out = Mat::zeros(total, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            assert_eq!(pv.cols, cols, "concat_rows col mismatch");
            for r in 0..pv.rows {
                out.row_mut(offset + r).copy_from_slice(pv.row(r));
            }
            offset += pv.rows;
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let tv = &self.nodes[table].value;
        let mut out = Mat::zeros(idx.len(), tv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(out, Op::GatherRows { table, idx: idx.to_vec() })
    }

    /// CTC negative log-likelihood of `labels` given per-frame logits
    /// (T x (V+1), blank is the last column). Returns a scalar node.
    pub fn ctc_loss(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let (loss, grad) = super::ctc::ctc_forward_backward(&self.nodes[logits].value, labels);
        self.push(Mat::scalar(loss), Op::CtcLoss { logits, grad_cache: grad })
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.rows, targets.len(), "target count mismatch");
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += logsum - row[t];
        }
        loss /= targets.len() as f64;
        self.push(
            Mat::scalar(loss),
            Op::CeRows { logits, targets: targets.to_vec() },
        )
    }

    /// Mean binary cross-entropy with logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[f64]) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.data.len(), labels.len(), "label count mismatch");
        let mut loss = 0.0;
        for (&z, &y) in lv.data.iter().zip(labels) {
            loss += z.max(0.0) - y * z + (1.0 + (-z.abs()).exp()).ln();
        }
        loss /= labels.len() as f64;
        self.push(
            Mat::scalar(loss),
            Op::BceLogits { logits, labels: labels.to_vec() },
        )
    }

    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert!(av.same_shape(bv), "l1 shape mismatch");
        let loss = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / av.data.len() as f64;
        self.push(Mat::scalar(loss), Op::L1(a, b))
    }

    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert!(av.same_shape(bv), "mse shape mismatch");
        let loss = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / av.data.len() as f64;
        self.push(Mat::scalar(loss), Op::Mse(a, b))
    }

    /// Backpropagates from a scalar node, adding parameter gradients
    /// (scaled by `weight`) into `accum`.
    pub fn backward(&self, root: NodeId, weight: f64, accum: &mut Gradients) {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_val = &self.nodes[root].value;
        assert_eq!(root_val.data.len(), 1, "backward root must be scalar");
        grads[root] = Some(Mat::scalar(weight));

        for id in (0..=root).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => accum[*pid].add_assign(&gout),
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, &gout);
                    add_grad(&mut grads, *b, &gout);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, *a, &gout);
                    let neg = gout.map(|v| -v);
                    add_grad(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga = elem_mul(&gout, &self.nodes[*b].value);
                    let gb = elem_mul(&gout, &self.nodes[*a].value);
                    add_grad(&mut grads, *a, &ga);
                    add_grad(&mut grads, *b, &gb);
                }
                Op::Scale(a, s) => {
                    let ga = gout.map(|v| v * s);
                    add_grad(&mut grads, *a, &ga);
                }
                Op::AddRow(a, row) => {
                    add_grad(&mut grads, *a, &gout);
                    let mut grow = Mat::zeros(1, gout.cols);
                    for r in 0..gout.rows {
                        for c in 0..gout.cols {
                            grow.data[c] += gout.data[r * gout.cols + c];
                        }
                    }
                    add_grad(&mut grads, *row, &grow);
                }
                Op::MulRow(a, row) => {
                    let rv = &self.nodes[*row].value;
                    let av = &self.nodes[*a].value;
                    let mut ga = gout.clone();
                    let mut grow = Mat::zeros(1, gout.cols);
                    for r in 0..gout.rows {
                        for c in 0..gout.cols {
                            ga.data[r * gout.cols + c] *= rv.data[c];
                            grow.data[c] += gout.data[r * gout.cols + c] * av.data[r * gout.cols + c];
                        }
                    }
                    add_grad(&mut grads, *a, &ga);
                    add_grad(&mut grads, *row, &grow);
                }
                Op::MatMul(a, b) => {
                    let ga = gout.matmul_nt(&self.nodes[*b].value);
                    let gb = self.nodes[*a].value.matmul_tn(&gout);
                    add_grad(&mut grads, *a, &ga);
                    add_grad(&mut grads, *b, &gb);
                }
                Op::MatMulNT(a, b) => {
                    // out = a b^T: da = g b, db = g^T a.
                    let ga = gout.matmul(&self.nodes[*b].value);
                    let gb = gout.matmul_tn(&self.nodes[*a].value);
                    add_grad(&mut grads, *a, &ga);
                    add_grad(&mut grads, *b, &gb);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    let data = gout
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_grad(&mut grads, *a, &Mat::from_vec(gout.rows, gout.cols, data));
                }
                Op::Gelu(a) => {
                    let av = &self.nodes[*a].value;
                    let data = gout
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(g, x)| g * gelu_grad_scalar(*x))
                        .collect();
                    add_grad(&mut grads, *a, &Mat::from_vec(gout.rows, gout.cols, data));
                }
                Op::Tanh(a) => {
                    let yv = &node.value;
                    let data = gout
                        .data
                        .iter()
                        .zip(&yv.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    add_grad(&mut grads, *a, &Mat::from_vec(gout.rows, gout.cols, data));
                }
                Op::Sigmoid(a) => {
                    let yv = &node.value;
                    let data = gout
                        .data
                        .iter()
                        .zip(&yv.data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    add_grad(&mut grads, *a, &Mat::from_vec(gout.rows, gout.cols, data));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &gout.data[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let out = ga.row_mut(r);
                        for c in 0..y.cols {
                            out[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    add_grad(&mut grads, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &gout.data[r * y.cols..(r + 1) * y.cols];
                        let gsum: f64 = gr.iter().sum();
                        let out = ga.row_mut(r);
                        for c in 0..y.cols {
                            out[c] = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                    add_grad(&mut grads, *a, &ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = y.cols as f64;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &gout.data[r * y.cols..(r + 1) * y.cols];
                        let gmean: f64 = gr.iter().sum::<f64>() / n;
                        let gydot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                        let out = ga.row_mut(r);
                        for c in 0..y.cols {
                            out[c] = inv_std[r] * (gr[c] - gmean - yr[c] * gydot);
                        }
                    }
                    add_grad(&mut grads, *x, &ga);
                }
                Op::MeanRows(a) => {
                    let av = &self.nodes[*a].value;
                    let scale = 1.0 / av.rows as f64;
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        for c in 0..av.cols {
                            ga.data[r * av.cols + c] = gout.data[c] * scale;
                        }
                    }
                    add_grad(&mut grads, *a, &ga);
                }
                Op::SumAll(a) => {
                    let av = &self.nodes[*a].value;
                    let g = gout.data[0];
                    let ga = Mat::from_vec(av.rows, av.cols, vec![g; av.data.len()]);
                    add_grad(&mut grads, *a, &ga);
                }
                Op::Unfold { x, k, stride, pad_left } => {
                    let av = &self.nodes[*x].value;
                    let c = av.cols;
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for t in 0..gout.rows {
                        for j in 0..*k {
                            let src = t as isize * *stride as isize + j as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < av.rows {
                                let src = src as usize;
                                for cc in 0..c {
                                    ga.data[src * c + cc] += gout.data[t * k * c + j * c + cc];
                                }
                            }
                        }
                    }
                    add_grad(&mut grads, *x, &ga);
                }
                Op::SliceCols { x, start, len } => {
                    let av = &self.nodes[*x].value;
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        for c in 0..*len {
                            ga.data[r * av.cols + start + c] = gout.data[r * len + c];
                        }
                    }
                    add_grad(&mut grads, *x, &ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &self.nodes[p].value;
                        let mut gp = Mat::zeros(pv.rows, pv.cols);
                        for r in 0..pv.rows {
                            gp.row_mut(r)
                                .copy_from_slice(&gout.row(r)[offset..offset + pv.cols]);
                        }
                        offset += pv.cols;
                        add_grad(&mut grads, p, &gp);
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let av = &self.nodes[*x].value;
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for r in 0..*len {
                        ga.row_mut(start + r).copy_from_slice(gout.row(r));
                    }
                    add_grad(&mut grads, *x, &ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &self.nodes[p].value;
                        let mut gp = Mat::zeros(pv.rows, pv.cols);
                        for r in 0..pv.rows {
                            gp.row_mut(r).copy_from_slice(gout.row(offset + r));
                        }
                        offset += pv.rows;
                        add_grad(&mut grads, p, &gp);
                    }
                }
                Op::GatherRows { table, idx } => {
                    let tv = &self.nodes[*table].value;
                    let mut gt = Mat::zeros(tv.rows, tv.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..tv.cols {
                            gt.data[i * tv.cols + c] += gout.data[r * tv.cols + c];
                        }
                    }
                    add_grad(&mut grads, *table, &gt);
                }
                Op::CtcLoss { logits, grad_cache } => {
                    let g = gout.data[0];
                    let ga = grad_cache.map(|v| v * g);
                    add_grad(&mut grads, *logits, &ga);
                }
                Op::CeRows { logits, targets } => {
                    let lv = &self.nodes[*logits].value;
                    let g = gout.data[0] / targets.len() as f64;
                    let mut ga = Mat::zeros(lv.rows, lv.cols);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = lv.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        let out = ga.row_mut(r);
                        for c in 0..lv.cols {
                            let p = (row[c] - max).exp() / sum;
                            out[c] = g * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    add_grad(&mut grads, *logits, &ga);
                }
                Op::BceLogits { logits, labels } => {
                    let lv = &self.nodes[*logits].value;
                    let g = gout.data[0] / labels.len() as f64;
                    let data = lv
                        .data
                        .iter()
                        .zip(labels)
                        .map(|(&z, &y)| g * (1.0 / (1.0 + (-z).exp()) - y))
                        .collect();
                    add_grad(&mut grads, *logits, &Mat::from_vec(lv.rows, lv.cols, data));
                }
                Op::L1(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let g = gout.data[0] / av.data.len() as f64;
                    let ga: Vec<f64> = av
                        .data
                        .iter()
                        .zip(&bv.data)
                        .map(|(x, y)| g * (x - y).signum())
                        .collect();
                    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                    add_grad(&mut grads, *a, &Mat::from_vec(av.rows, av.cols, ga));
                    add_grad(&mut grads, *b, &Mat::from_vec(av.rows, av.cols, gb));
                }
                Op::Mse(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let g = 2.0 * gout.data[0] / av.data.len() as f64;
                    let ga: Vec<f64> = av
                        .data
                        .iter()
                        .zip(&bv.data)
                        .map(|(x, y)| g * (x - y))
                        .collect();
                    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                    add_grad(&mut grads, *a, &Mat::from_vec(av.rows, av.cols, ga));
                    add_grad(&mut grads, *b, &Mat::from_vec(av.rows, av.cols, gb));
                }
            }
        }
    }
}

fn add_grad(grads: &mut [Option<Mat>], id: NodeId, g: &Mat) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn elem_mul(a: &Mat, b: &Mat) -> Mat {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.rows, a.cols, data)
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{max_relative_error, numeric_gradients};
    use super::*;
    use crate::rng::Prng;

    /// Composite expression touching most ops, checked against central
    /// finite differences.
    fn build_loss(store: &ParamStore, ids: &[usize]) -> f64 {
        let mut g = Graph::new(store);
        let root = build_graph(&mut g, ids);
        g.scalar_value(root)
    }

    fn build_graph(g: &mut Graph, ids: &[usize]) -> NodeId {
        let [w1, b1, w2, table, row] = *ids else { panic!() };
        let x = g.input(Mat::from_vec(
            4,
            3,
            vec![0.3, -0.2, 0.5, 1.0, 0.4, -0.7, -0.1, 0.2, 0.9, 0.6, -0.5, 0.1],
        ));
        let w1 = g.param(w1);
        let b1 = g.param(b1);
        let w2 = g.param(w2);
        let table = g.param(table);
        let rowp = g.param(row);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let h = g.layer_norm(h);
        let emb = g.gather_rows(table, &[1, 0, 2, 1]);
        let h = g.add(h, emb);
        let h = g.mul_row(h, rowp);
        let uf = g.unfold(h, 2, 2, 0, 2);
        let att = g.matmul_nt(uf, uf);
        let att = g.scale(att, 0.4);
        let att = g.softmax(att);
        let mixed = g.matmul(att, uf);
        let left = g.slice_cols(mixed, 0, 4);
        let right = g.slice_cols(mixed, 4, 4);
        let joined = g.concat_cols(&[right, left]);
        let s = g.tanh(joined);
        let s = g.matmul(s, w2);
        let prob_loss = g.cross_entropy_rows(s, &[1, 0]);
        let sg = g.sigmoid(s);
        let target = g.input(Mat::from_vec(2, 2, vec![0.2, 0.7, 0.9, 0.1]));
        let l1 = g.l1_loss(sg, target);
        let mse = g.mse_loss(s, target);
        let ls = g.log_softmax(s);
        let lsum = g.sum_all(ls);
        let lsum = g.scale(lsum, 0.05);
        let bce = g.bce_with_logits(s, &[1.0, 0.0, 0.0, 1.0]);
        let mr = g.mean_rows(s);
        let mr_sum = g.sum_all(mr);
        let relu_part = g.relu(s);
        let relu_sum = g.sum_all(relu_part);
        let relu_sum = g.scale(relu_sum, 0.1);
        let total = g.add(prob_loss, l1);
        let total = g.add(total, mse);
        let total = g.add(total, lsum);
        let total = g.add(total, bce);
        let total = g.add(total, mr_sum);
        let total = g.add(total, relu_sum);
        let sliced = g.slice_rows(s, 0, 1);
        let stacked = g.concat_rows(&[sliced, sliced]);
        let extra = g.mse_loss(stacked, target);
        g.add(total, extra)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = Prng::seed_from_u64(3);
        let ids = vec![
            store.add_glorot("w1", 3, 8, &mut rng),
            store.add_glorot("b1", 1, 8, &mut rng),
            store.add_glorot("w2", 8, 2, &mut rng),
            store.add_glorot("table", 3, 8, &mut rng),
            store.add_glorot("row", 1, 8, &mut rng),
        ];
        let mut analytic = store.zero_gradients();
        {
            let mut g = Graph::new(&store);
            let root = build_graph(&mut g, &ids);
            g.backward(root, 1.0, &mut analytic);
        }
        let numeric = numeric_gradients(&mut store, |s| build_loss(s, &ids), 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let s = g.softmax(x);
        for r in 0..2 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unfold_stacks_and_pads() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let u = g.unfold(x, 2, 2, 0, 2);
        assert_eq!(g.value(u).rows, 2);
        assert_eq!(g.value(u).row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(u).row(1), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_of_zero_logit_is_ln2() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.input(Mat::from_vec(1, 4, vec![0.0; 4]));
        let loss = g.bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0]);
        assert!((g.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
