//! Minimal reverse-mode differentiation over dense f64 matrices, sized for
//! the fixed transformer and GNN architectures in this crate.
//!
//! A [`Tape`] borrows a [`ParamSet`] and records eager forward computations;
//! [`Tape::backward`] replays the recording in reverse and returns exact
//! gradients for every parameter node. Softmax rows whose entries are all
//! -inf evaluate to zero rows (used for fully masked attention queries), and
//! masked-out attention weights are exactly 0.0, so gradients through masked
//! paths vanish exactly rather than approximately.

#[derive(Debug, Clone, PartialEq)]
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
        assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameter tensors; the declaration order fixes checkpoint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.tensors.push(tensor);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flattens all tensors in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in &mut self.tensors {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        assert_eq!(offset, flat.len());
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

pub type NodeId = usize;

enum Op {
    Param(usize),
    Const,
    /// op_a(A) * op_b(B); only (false, false) and (false, true) occur.
    Matmul {
        a: NodeId,
        b: NodeId,
        tb: bool,
    },
    Add(NodeId, NodeId),
    /// A + bias broadcast over rows; bias is 1 x cols.
    AddRowBroadcast {
        a: NodeId,
        bias: NodeId,
    },
    Scale(NodeId, f64),
    Gelu(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    /// Row-wise layer norm with learned gain/bias (1 x cols each).
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Row-wise softmax; rows with no finite entry become zero rows.
    SoftmaxRows(NodeId),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        a: NodeId,
        from: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// out[i][j] = col[i] + row[j]; col is R x 1, row is C x 1.
    OuterSum {
        col: NodeId,
        row: NodeId,
    },
    /// Scalar weighted sum of per-row cross entropies.
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    /// Owned value; empty for Param nodes (resolved through the ParamSet).
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

const LN_EPS: f64 = 1e-5;

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// C += op(A) * op_b(B) with A (m x k) and op_b(B) (k x n).
fn gemm_acc(
    c: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    tb: bool,
) {
    if tb {
        // B is n x k; C[i][j] += dot(A[i], B[j]).
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                crow[j] += acc;
            }
        }
    } else {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += aik * bj;
                }
            }
        }
    }
}

/// C += A^T * B with A (k x m), B (k x n), C (m x n).
fn gemm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aki * bj;
            }
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.tensors.len()],
        }
    }

    pub fn val(&self, id: NodeId) -> &[f64] {
        match self.nodes[id].op {
            Op::Param(p) => &self.params.tensors[p].data,
            _ => &self.nodes[id].value,
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        self.nodes.len() - 1
    }

    /// Parameter leaf; repeated calls return the same node so gradients from
    /// every use site accumulate in one place.
    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        let t = &self.params.tensors[index];
        let id = self.push(t.rows, t.cols, Vec::new(), Op::Param(index));
        self.param_nodes[index] = Some(id);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t.rows, t.cols, t.data, Op::Const)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, false)
    }

    /// A * B^T.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, tb: bool) -> NodeId {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let n = if tb { br } else { bc };
        assert_eq!(k, if tb { bc } else { br }, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, self.val(a), self.val(b), m, k, n, tb);
        self.push(m, n, out, Op::Matmul { a, b, tb })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias shape");
        let mut out = self.val(a).to_vec();
        let b = self.val(bias).to_vec();
        for row in out.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(r, c, out, Op::AddRowBroadcast { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out: Vec<f64> = self.val(a).iter().map(|x| x * factor).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.val(a).iter().map(|&x| gelu_fwd(x)).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.val(a).iter().map(|&x| x.max(0.0)).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let out: Vec<f64> = self
            .val(a)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::LeakyRelu(a, slope))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let g = self.val(gain).to_vec();
        let b = self.val(bias).to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.val(x)[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        self.push(r, c, out, Op::LayerNorm { x, gain, bias })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.val(x)[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                continue; // fully masked row stays zero
            }
            let dst = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        self.push(r, c, out, Op::SoftmaxRows(x))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (tr, c) = self.shape(table);
        let mut out = vec![0.0; ids.len() * c];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < tr, "gather id out of range");
            out[i * c..(i + 1) * c].copy_from_slice(&self.val(table)[id * c..(id + 1) * c]);
        }
        self.push(
            ids.len(),
            c,
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(from < to && to <= c);
        let w = to - from;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&self.val(a)[i * c + from..i * c + to]);
        }
        self.push(r, w, out, Op::SliceCols { a, from })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, r);
            for i in 0..r {
                out[i * total + offset..i * total + offset + pc]
                    .copy_from_slice(&self.val(p)[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn outer_sum(&mut self, col: NodeId, row: NodeId) -> NodeId {
        let (r, c1) = self.shape(col);
        let (c, c2) = self.shape(row);
        assert_eq!(c1, 1);
        assert_eq!(c2, 1);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let ci = self.val(col)[i];
            for j in 0..c {
                out[i * c + j] = ci + self.val(row)[j];
            }
        }
        self.push(r, c, out, Op::OuterSum { col, row })
    }

    /// Weighted sum over rows of -log softmax(logits)[target]; weights pick
    /// and scale the scored rows. Returns a 1 x 1 scalar node.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> NodeId {
        let (r, c) = self.shape(logits);
        assert_eq!(targets.len(), r);
        assert_eq!(weights.len(), r);
        let mut total = 0.0;
        for i in 0..r {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &self.val(logits)[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += weights[i] * (lse - row[targets[i]]);
        }
        self.push(
            1,
            1,
            vec![total],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; parameter
    /// gradients live at the node ids returned by [`Tape::param`].
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param(_) | Op::Const => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::Matmul { a, b, tb } => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    {
                        let ga = self.grad_buf(&mut grads, *a);
                        if *tb {
                            // dA += dC * B
                            gemm_acc(ga, &grad, self.val(*b), m, n, k, false);
                        } else {
                            // dA += dC * B^T
                            gemm_acc(ga, &grad, self.val(*b), m, n, k, true);
                        }
                    }
                    {
                        let gb = self.grad_buf(&mut grads, *b);
                        if *tb {
                            // dB += dC^T * A
                            gemm_tn_acc(gb, &grad, self.val(*a), m, n, k);
                        } else {
                            // dB += A^T * dC
                            gemm_tn_acc(gb, self.val(*a), &grad, m, k, n);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &src in [a, b].iter() {
                        let g = self.grad_buf(&mut grads, *src);
                        for (gi, di) in g.iter_mut().zip(&grad) {
                            *gi += di;
                        }
                    }
                }
                Op::AddRowBroadcast { a, bias } => {
                    let c = node.cols;
                    {
                        let ga = self.grad_buf(&mut grads, *a);
                        for (gi, di) in ga.iter_mut().zip(&grad) {
                            *gi += di;
                        }
                    }
                    let gb = self.grad_buf(&mut grads, *bias);
                    for row in grad.chunks(c) {
                        for (gj, dj) in gb.iter_mut().zip(row) {
                            *gj += dj;
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    let ga = self.grad_buf(&mut grads, *a);
                    for (gi, di) in ga.iter_mut().zip(&grad) {
                        *gi += factor * di;
                    }
                }
                Op::Gelu(a) => {
                    let x = self.val(*a).to_vec();
                    let ga = self.grad_buf(&mut grads, *a);
                    for ((gi, di), xi) in ga.iter_mut().zip(&grad).zip(&x) {
                        *gi += gelu_grad(*xi) * di;
                    }
                }
                Op::Relu(a) => {
                    let x = self.val(*a).to_vec();
                    let ga = self.grad_buf(&mut grads, *a);
                    for ((gi, di), xi) in ga.iter_mut().zip(&grad).zip(&x) {
                        if *xi > 0.0 {
                            *gi += di;
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.val(*a).to_vec();
                    let ga = self.grad_buf(&mut grads, *a);
                    for ((gi, di), xi) in ga.iter_mut().zip(&grad).zip(&x) {
                        *gi += if *xi >= 0.0 { *di } else { slope * di };
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (r, c) = (node.rows, node.cols);
                    let xv = self.val(*x).to_vec();
                    let g = self.val(*gain).to_vec();
                    {
                        let ggain = self.grad_buf(&mut grads, *gain);
                        for i in 0..r {
                            let row = &xv[i * c..(i + 1) * c];
                            let mean = row.iter().sum::<f64>() / c as f64;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                            let inv = 1.0 / (var + LN_EPS).sqrt();
                            for j in 0..c {
                                let xhat = (row[j] - mean) * inv;
                                ggain[j] += grad[i * c + j] * xhat;
                            }
                        }
                    }
                    {
                        let gbias = self.grad_buf(&mut grads, *bias);
                        for i in 0..r {
                            for j in 0..c {
                                gbias[j] += grad[i * c + j];
                            }
                        }
                    }
                    let gx = self.grad_buf(&mut grads, *x);
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let dyrow = &grad[i * c..(i + 1) * c];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = dyrow[j] * g[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = dyrow[j] * g[j];
                            gx[i * c + j] += inv
                                * (dxhat - sum_dxhat / c as f64 - xhat * sum_dxhat_xhat / c as f64);
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let (r, c) = (node.rows, node.cols);
                    let y = node.value.clone();
                    let gx = self.grad_buf(&mut grads, *x);
                    for i in 0..r {
                        let yrow = &y[i * c..(i + 1) * c];
                        let drow = &grad[i * c..(i + 1) * c];
                        let dot: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                }
                Op::GatherRows { table, ids } => {
                    let c = node.cols;
                    let gt = self.grad_buf(&mut grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += grad[i * c + j];
                        }
                    }
                }
                Op::SliceCols { a, from, .. } => {
                    let (r, w) = (node.rows, node.cols);
                    let full = self.shape(*a).1;
                    let ga = self.grad_buf(&mut grads, *a);
                    for i in 0..r {
                        for j in 0..w {
                            ga[i * full + from + j] += grad[i * w + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let (r, total) = (node.rows, node.cols);
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.shape(p).1;
                        let gp = self.grad_buf(&mut grads, p);
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += grad[i * total + offset + j];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::OuterSum { col, row } => {
                    let (r, c) = (node.rows, node.cols);
                    {
                        let gc = self.grad_buf(&mut grads, *col);
                        for i in 0..r {
                            gc[i] += grad[i * c..(i + 1) * c].iter().sum::<f64>();
                        }
                    }
                    let gr = self.grad_buf(&mut grads, *row);
                    for j in 0..c {
                        for i in 0..r {
                            gr[j] += grad[i * c + j];
                        }
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    weights,
                } => {
                    let scale = grad[0];
                    let (r, c) = self.shape(*logits);
                    let lv = self.val(*logits).to_vec();
                    let (targets, weights) = (targets.clone(), weights.clone());
                    let gl = self.grad_buf(&mut grads, *logits);
                    for i in 0..r {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let row = &lv[i * c..(i + 1) * c];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                        let total: f64 = exps.iter().sum();
                        for e in &mut exps {
                            *e /= total;
                        }
                        let w = weights[i] * scale;
                        for j in 0..c {
                            let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                            gl[i * c + j] += w * (exps[j] - indicator);
                        }
                    }
                }
            }
            // Keep every node's gradient so callers can audit activations
            // (e.g. the ancestor-mask causality check reads them).
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> &'g mut Vec<f64> {
        let n = &self.nodes[id];
        grads[id].get_or_insert_with(|| vec![0.0; n.rows * n.cols])
    }

    /// Gradient accumulated at the parameter's node, if it was used.
    pub fn param_grad<'g>(&self, grads: &'g Gradients, index: usize) -> Option<&'g [f64]> {
        let id = self.param_nodes[index]?;
        grads.grads[id].as_deref()
    }

    pub fn node_grad<'g>(&self, grads: &'g Gradients, id: NodeId) -> Option<&'g [f64]> {
        grads.grads[id].as_deref()
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central-difference audit of d(scalar)/d(param[index]) for every
    /// coordinate of every parameter.
    fn check_grads<F>(params: &mut ParamSet, build: F, tol: f64)
    where
        F: Fn(&mut Tape) -> NodeId,
    {
        let (analytic, base) = {
            let mut tape = Tape::new(params);
            let root = build(&mut tape);
            let value = tape.val(root)[0];
            let grads = tape.backward(root);
            let collected: Vec<Vec<f64>> = (0..params.tensors.len())
                .map(|i| {
                    tape.param_grad(&grads, i)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; params.tensors[i].len()])
                })
                .collect();
            (collected, value)
        };
        assert!(base.is_finite());
        let h = 1e-5;
        for p in 0..params.tensors.len() {
            for i in 0..params.tensors[p].len() {
                let orig = params.tensors[p].data[i];
                params.tensors[p].data[i] = orig + h;
                let up = {
                    let mut tape = Tape::new(params);
                    let root = build(&mut tape);
                    tape.val(root)[0]
                };
                params.tensors[p].data[i] = orig - h;
                let down = {
                    let mut tape = Tape::new(params);
                    let root = build(&mut tape);
                    tape.val(root)[0]
                };
                params.tensors[p].data[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let got = analytic[p][i];
                let denom = fd.abs().max(got.abs()).max(1e-6);
                assert!(
                    ((fd - got) / denom).abs() < tol,
                    "param {p} coord {i}: fd {fd} vs analytic {got}"
                );
            }
        }
    }

    fn random_tensor(rows: usize, cols: usize, stream: &mut rand_chacha::ChaCha8Rng) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| stream.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut stream = crate::rng::stream(1, 1);
        let mut params = ParamSet::new();
        params.push("a", random_tensor(3, 4, &mut stream));
        params.push("b", random_tensor(4, 2, &mut stream));
        params.push("c", random_tensor(3, 2, &mut stream));
        check_grads(
            &mut params,
            |t| {
                let a = t.param(0);
                let b = t.param(1);
                let c = t.param(2);
                let ab = t.matmul(a, b);
                let nt = t.matmul_nt(ab, c); // (3x2)(3x2)^T = 3x3
                let sq = t.matmul_nt(nt, nt);
                let flat = t.softmax_xent(sq, &[0, 1, 2], &[1.0, 0.5, 0.25]);
                flat
            },
            1e-5,
        );
    }

    #[test]
    fn elementwise_op_gradients() {
        let mut stream = crate::rng::stream(2, 1);
        let mut params = ParamSet::new();
        params.push("x", random_tensor(2, 5, &mut stream));
        params.push("bias", random_tensor(1, 5, &mut stream));
        check_grads(
            &mut params,
            |t| {
                let x = t.param(0);
                let bias = t.param(1);
                let xb = t.add_row_bias(x, bias);
                let g = t.gelu(xb);
                let r = t.relu(g);
                let l = t.leaky_relu(r, 0.2);
                let s = t.scale(l, 1.7);
                let doubled = t.add(s, s);
                t.softmax_xent(doubled, &[1, 3], &[1.0, 1.0])
            },
            1e-5,
        );
    }

    #[test]
    fn layer_norm_and_softmax_gradients() {
        let mut stream = crate::rng::stream(3, 1);
        let mut params = ParamSet::new();
        params.push("x", random_tensor(3, 6, &mut stream));
        params.push("gain", random_tensor(1, 6, &mut stream));
        params.push("bias", random_tensor(1, 6, &mut stream));
        check_grads(
            &mut params,
            |t| {
                let x = t.param(0);
                let g = t.param(1);
                let b = t.param(2);
                let ln = t.layer_norm(x, g, b);
                let sm = t.softmax_rows(ln);
                let mixed = t.matmul_nt(sm, ln);
                t.softmax_xent(mixed, &[0, 2, 1], &[0.7, 0.2, 0.1])
            },
            1e-4,
        );
    }

    #[test]
    fn gather_slice_concat_outer_gradients() {
        let mut stream = crate::rng::stream(4, 1);
        let mut params = ParamSet::new();
        params.push("table", random_tensor(5, 4, &mut stream));
        params.push("col", random_tensor(3, 1, &mut stream));
        params.push("row", random_tensor(4, 1, &mut stream));
        check_grads(
            &mut params,
            |t| {
                let table = t.param(0);
                let col = t.param(1);
                let row = t.param(2);
                let gathered = t.gather_rows(table, &[0, 2, 2]); // repeated id
                let left = t.slice_cols(gathered, 0, 2);
                let right = t.slice_cols(gathered, 2, 4);
                let swapped = t.concat_cols(&[right, left]);
                let outer = t.outer_sum(col, row);
                let sum = t.add(swapped, outer);
                t.softmax_xent(sum, &[3, 0, 1], &[1.0, 1.0, 1.0])
            },
            1e-5,
        );
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.constant(Tensor::from_vec(
            2,
            3,
            vec![
                1.0,
                f64::NEG_INFINITY,
                0.5,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
            ],
        ));
        let sm = tape.softmax_rows(x);
        let v = tape.val(sm);
        assert_eq!(v[1], 0.0);
        assert_eq!(&v[3..6], &[0.0, 0.0, 0.0]);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn xent_of_uniform_logits_is_ln_vocab() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let logits = tape.constant(Tensor::zeros(4, 7));
        let loss = tape.softmax_xent(logits, &[0, 1, 2, 3], &[0.25; 4]);
        assert!((tape.val(loss)[0] - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_param_use_accumulates_once() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::from_vec(1, 2, vec![0.3, -0.7]));
        let mut tape = Tape::new(&params);
        let w1 = tape.param(0);
        let w2 = tape.param(0);
        assert_eq!(w1, w2);
    }
}
