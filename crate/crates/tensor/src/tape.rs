//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Node ids are
//! assigned in creation order, so creation order is a valid topological
//! order and [`Tape::backward`] walks the nodes once, in reverse.
//!
//! Leaves come in two kinds: trainable leaves created with [`Tape::var`] or
//! [`Tape::param`], whose gradients persist on the tape and accumulate across
//! repeated `backward` calls, and constants created with
//! [`Tape::constant`], which never receive a gradient. Interior adjoints are
//! scratch buffers local to one `backward` call.

use std::cell::{Ref, RefCell};

use rand::Rng;

use crate::error::{mismatch, Result, TensorError};
use crate::tensor::{numel, ParamId, ParamStore, Tensor};

/// Which key positions each query may attend to in [`attention`].
///
/// The input rows are split into `groups` independent blocks of `len` rows.
/// Position `(g, i, j)` is allowed when `structure[i * len + j]` holds and,
/// if present, `key_valid[g * len + j]` holds.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub groups: usize,
    pub len: usize,
    pub structure: Vec<bool>,
    pub key_valid: Option<Vec<bool>>,
}

impl AttentionMask {
    pub fn new(groups: usize, len: usize, structure: Vec<bool>) -> Result<Self> {
        if structure.len() != len * len {
            return Err(TensorError::InvalidArgument(format!(
                "attention structure has {} entries, expected {}x{}",
                structure.len(),
                len,
                len
            )));
        }
        Ok(Self {
            groups,
            len,
            structure,
            key_valid: None,
        })
    }

    /// Lower-triangular mask over `len` positions.
    pub fn causal(groups: usize, len: usize) -> Self {
        let structure = (0..len * len).map(|ij| ij % len <= ij / len).collect();
        Self {
            groups,
            len,
            structure,
            key_valid: None,
        }
    }

    pub fn with_key_valid(mut self, key_valid: Vec<bool>) -> Result<Self> {
        if key_valid.len() != self.groups * self.len {
            return Err(TensorError::InvalidArgument(format!(
                "key_valid has {} entries, expected {}",
                key_valid.len(),
                self.groups * self.len
            )));
        }
        self.key_valid = Some(key_valid);
        Ok(self)
    }

    #[inline]
    pub fn allowed(&self, g: usize, i: usize, j: usize) -> bool {
        self.structure[i * self.len + j]
            && self
                .key_valid
                .as_ref()
                .is_none_or(|kv| kv[g * self.len + j])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Relu {
        a: usize,
    },
    LeakyRelu {
        a: usize,
        slope: f64,
    },
    Map {
        a: usize,
        df: fn(f64) -> f64,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        cols: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    MaskedFill {
        a: usize,
        mask: Vec<bool>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    GroupMeanRows {
        a: usize,
        group: usize,
        cols: usize,
    },
    Reshape {
        a: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        width: usize,
        cols: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        cols: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        classes: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        mask: AttentionMask,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param,
        });
        self.leaf_grads.borrow_mut().push(None);
        Var { tape: self, id }
    }

    /// Trainable leaf.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false, None)
    }

    /// Trainable leaf holding a copy of a stored parameter.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let p = store.get(id);
        self.push(
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
            Op::Leaf,
            true,
            Some(id),
        )
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    ///
    /// Gradients of trainable leaves accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        adj.resize_with(loss.id + 1, || None);
        adj[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                op => backward_op(op, node, &g, &nodes, &mut adj),
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.leaf_grads.borrow()[v.id].clone()
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let nodes = self.nodes.borrow();
        let grads = self.leaf_grads.borrow();
        for (node, grad) in nodes.iter().zip(grads.iter()) {
            if let (Some(pid), Some(g)) = (node.param, grad) {
                store
                    .get_mut(pid)
                    .grad
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Attention probabilities recorded by an [`attention`] node, laid out as
    /// `groups x heads x len x len`.
    pub fn attention_probs(&self, v: Var<'_>) -> Option<Vec<f64>> {
        match &self.node(v.id).op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = adj[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    g(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c = op(a) * op(b) + beta * c`, row-major, with optional transposition of
/// either operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backward_op(op: &Op, node: &Node, g: &[f64], nodes: &[Node], adj: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => unreachable!(),
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            accumulate(adj, nodes, *a, |da| gemm(m, n, k, g, false, bv, true, da, 1.0));
            accumulate(adj, nodes, *b, |db| gemm(k, m, n, av, true, g, false, db, 1.0));
        }
        Op::Add { a, b } => {
            accumulate(adj, nodes, *a, |d| add_into(d, g));
            accumulate(adj, nodes, *b, |d| add_into(d, g));
        }
        Op::AddRow { a, b } => {
            accumulate(adj, nodes, *a, |d| add_into(d, g));
            let cols = nodes[*b].value.len();
            accumulate(adj, nodes, *b, |d| {
                for row in g.chunks_exact(cols) {
                    add_into(d, row);
                }
            });
        }
        Op::Sub { a, b } => {
            accumulate(adj, nodes, *a, |d| add_into(d, g));
            accumulate(adj, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            accumulate(adj, nodes, *a, |d| {
                for ((x, gy), bb) in d.iter_mut().zip(g).zip(bv) {
                    *x += gy * bb;
                }
            });
            accumulate(adj, nodes, *b, |d| {
                for ((x, gy), aa) in d.iter_mut().zip(g).zip(av) {
                    *x += gy * aa;
                }
            });
        }
        Op::Scale { a, c } => {
            accumulate(adj, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
        }
        Op::Relu { a } => {
            let av = &nodes[*a].value;
            accumulate(adj, nodes, *a, |d| {
                for ((x, gy), v) in d.iter_mut().zip(g).zip(av) {
                    if *v > 0.0 {
                        *x += gy;
                    }
                }
            });
        }
        Op::LeakyRelu { a, slope } => {
            let av = &nodes[*a].value;
            accumulate(adj, nodes, *a, |d| {
                for ((x, gy), v) in d.iter_mut().zip(g).zip(av) {
                    *x += if *v > 0.0 { *gy } else { slope * gy };
                }
            });
        }
        Op::Map { a, df } => {
            let av = &nodes[*a].value;
            accumulate(adj, nodes, *a, |d| {
                for ((x, gy), v) in d.iter_mut().zip(g).zip(av) {
                    *x += gy * df(*v);
                }
            });
        }
        Op::Softmax { a, outer, len, inner } => {
            let y = &node.value;
            accumulate(adj, nodes, *a, |d| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let dot: f64 = (0..*len).map(|l| y[at(l)] * g[at(l)]).sum();
                        for l in 0..*len {
                            d[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, outer, len, inner } => {
            let y = &node.value;
            accumulate(adj, nodes, *a, |d| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let gsum: f64 = (0..*len).map(|l| g[at(l)]).sum();
                        for l in 0..*len {
                            d[at(l)] += g[at(l)] - y[at(l)].exp() * gsum;
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            cols,
        } => {
            let cols = *cols;
            let gv = &nodes[*gamma].value;
            accumulate(adj, nodes, *gamma, |d| {
                for (grow, xrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for ((dd, gy), xh) in d.iter_mut().zip(grow).zip(xrow) {
                        *dd += gy * xh;
                    }
                }
            });
            accumulate(adj, nodes, *beta, |d| {
                for grow in g.chunks_exact(cols) {
                    add_into(d, grow);
                }
            });
            accumulate(adj, nodes, *x, |d| {
                let mut dxhat = vec![0.0; cols];
                for (r, ((drow, grow), xrow)) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(xhat.chunks_exact(cols))
                    .enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        dxhat[c] = grow[c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xrow[c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        drow[c] += rstd[r] * (dxhat[c] - mean_d - xrow[c] * mean_dx);
                    }
                }
            });
        }
        Op::Dropout { a, mask } => {
            accumulate(adj, nodes, *a, |d| {
                for ((x, gy), m) in d.iter_mut().zip(g).zip(mask) {
                    *x += gy * m;
                }
            });
        }
        Op::GatherRows { table, idx, cols } => {
            accumulate(adj, nodes, *table, |d| {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut d[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            });
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(id, len) in parts {
                accumulate(adj, nodes, id, |d| {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                    }
                });
                offset += len;
            }
        }
        Op::MaskedFill { a, mask } => {
            accumulate(adj, nodes, *a, |d| {
                for ((x, gy), m) in d.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *x += gy;
                    }
                }
            });
        }
        Op::Sum { a } => {
            accumulate(adj, nodes, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean { a } => {
            let n = nodes[*a].value.len() as f64;
            accumulate(adj, nodes, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::GroupMeanRows { a, group, cols } => {
            let scale = 1.0 / *group as f64;
            accumulate(adj, nodes, *a, |d| {
                for (r, drow) in d.chunks_exact_mut(*cols).enumerate() {
                    let grow = &g[(r / group) * cols..(r / group + 1) * cols];
                    for (x, gy) in drow.iter_mut().zip(grow) {
                        *x += gy * scale;
                    }
                }
            });
        }
        Op::Reshape { a } => {
            accumulate(adj, nodes, *a, |d| add_into(d, g));
        }
        Op::Transpose { a, rows, cols } => {
            accumulate(adj, nodes, *a, |d| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            });
        }
        Op::SliceCols { a, start, width, cols } => {
            accumulate(adj, nodes, *a, |d| {
                for (drow, grow) in d.chunks_exact_mut(*cols).zip(g.chunks_exact(*width)) {
                    add_into(&mut drow[*start..start + width], grow);
                }
            });
        }
        Op::SliceRows { a, start, cols } => {
            accumulate(adj, nodes, *a, |d| {
                add_into(&mut d[start * cols..start * cols + g.len()], g);
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            classes,
        } => {
            accumulate(adj, nodes, *logits, |d| {
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..*classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        d[r * classes + c] += g[0] * w * (probs[r * classes + c] - onehot);
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            mask,
            probs,
        } => attention_backward(
            g,
            nodes,
            adj,
            (*q, *k, *v),
            *heads,
            mask,
            probs,
            node.shape[1],
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    nodes: &[Node],
    adj: &mut [Option<Vec<f64>>],
    (q, k, v): (usize, usize, usize),
    heads: usize,
    mask: &AttentionMask,
    probs: &[f64],
    width: usize,
) {
    let (groups, len) = (mask.groups, mask.len);
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qv = &nodes[q].value;
    let kv = &nodes[k].value;
    let vv = &nodes[v].value;
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut dp = vec![0.0; len];
    for gi in 0..groups {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..len {
                let row_i = (gi * len + i) * width + col;
                let prow = &probs[((gi * heads + h) * len + i) * len..][..len];
                let gout = &g[row_i..row_i + dh];
                let mut dot = 0.0;
                for j in 0..len {
                    if !mask.allowed(gi, i, j) {
                        continue;
                    }
                    let row_j = (gi * len + j) * width + col;
                    let vj = &vv[row_j..row_j + dh];
                    dp[j] = gout.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += prow[j] * dp[j];
                    for (x, go) in dv[row_j..row_j + dh].iter_mut().zip(gout) {
                        *x += prow[j] * go;
                    }
                }
                for j in 0..len {
                    if !mask.allowed(gi, i, j) {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let row_j = (gi * len + j) * width + col;
                    for c in 0..dh {
                        dq[row_i + c] += ds * kv[row_j + c];
                        dk[row_j + c] += ds * qv[row_i + c];
                    }
                }
            }
        }
    }
    accumulate(adj, nodes, q, |d| add_into(d, &dq));
    accumulate(adj, nodes, k, |d| add_into(d, &dk));
    accumulate(adj, nodes, v, |d| add_into(d, &dv));
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.node(self.id).value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.tape.node(self.id);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.tape.node(self.id).value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    fn rg(&self, other: &Var<'_>) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn unary(self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg, None)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            gemm(m, k, n, &nodes[self.id].value, false, &nodes[rhs.id].value, false, &mut out, 0.0);
        }
        let rg = self.rg(&rhs);
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            rg,
            None,
        ))
    }

    fn zip_with(self, rhs: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(mismatch(name, &sa, &sb));
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .iter()
                .zip(&nodes[rhs.id].value)
                .map(|(a, b)| f(*a, *b))
                .collect()
        };
        let rg = self.rg(&rhs);
        Ok(self.tape.push(sa, out, op, rg, None))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Add { a: self.id, b: rhs.id };
        self.zip_with(rhs, "add", |a, b| a + b, op)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Sub { a: self.id, b: rhs.id };
        self.zip_with(rhs, "sub", |a, b| a - b, op)
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Mul { a: self.id, b: rhs.id };
        self.zip_with(rhs, "mul", |a, b| a * b, op)
    }

    /// Adds a vector to every row (broadcast over the leading axes).
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let (sa, sb) = (self.shape(), row.shape());
        let cols = sb.iter().product::<usize>();
        if sb.len() != 1 || sa.last() != Some(&cols) {
            return Err(mismatch("add_row", &sa, &sb));
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let b = &nodes[row.id].value;
            let mut out = nodes[self.id].value.clone();
            for r in out.chunks_exact_mut(cols) {
                add_into(r, b);
            }
            out
        };
        let rg = self.rg(&row);
        Ok(self
            .tape
            .push(sa, out, Op::AddRow { a: self.id, b: row.id }, rg, None))
    }

    /// `self @ weight + bias`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_row(bias)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.tape.node(self.id).value.iter().map(|x| x * c).collect();
        self.unary(self.shape(), out, Op::Scale { a: self.id, c })
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.tape.node(self.id).value.iter().map(|x| x.max(0.0)).collect();
        self.unary(self.shape(), out, Op::Relu { a: self.id })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let out = self
            .tape
            .node(self.id)
            .value
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.unary(self.shape(), out, Op::LeakyRelu { a: self.id, slope })
    }

    /// Elementwise function with a caller-supplied derivative.
    pub fn map(self, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var<'t> {
        let out = self.tape.node(self.id).value.iter().map(|&x| f(x)).collect();
        self.unary(self.shape(), out, Op::Map { a: self.id, df })
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| out[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (out[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        Ok(self.unary(
            shape,
            out,
            Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "log_softmax")?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| out[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|l| (out[at(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[at(l)] -= lse;
                }
            }
        }
        Ok(self.unary(
            shape,
            out,
            Op::LogSoftmax {
                a: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap_or(&1);
        for p in [gamma, beta] {
            if p.shape() != [cols] {
                return Err(mismatch("layer_norm", &shape, &p.shape()));
            }
        }
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let rows = x.len() / cols.max(1);
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let xh = (row[c] - mean) * s;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * gv[c] + bv[c];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
                cols,
            },
            rg,
            None,
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)` at train
    /// time; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, train: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value();
        let mask: Vec<f64> = x
            .iter()
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
        Ok(self.unary(self.shape(), out, Op::Dropout { a: self.id, mask }))
    }

    /// Selects rows (entries along axis 0); also serves as embedding lookup.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let Some(&rows) = shape.first() else {
            return Err(TensorError::InvalidArgument("gather_rows on a scalar".into()));
        };
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let cols = numel(&shape[1..]);
        let out = {
            let node = self.tape.node(self.id);
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                out.extend_from_slice(&node.value[i * cols..(i + 1) * cols]);
            }
            out
        };
        let mut new_shape = shape.clone();
        new_shape[0] = idx.len();
        Ok(self.unary(
            new_shape,
            out,
            Op::GatherRows {
                table: self.id,
                idx: idx.to_vec(),
                cols,
            },
        ))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(self, mask: &[bool], value: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        if mask.len() != numel(&shape) {
            return Err(mismatch("masked_fill", &shape, &[mask.len()]));
        }
        let out = self
            .value()
            .into_iter()
            .zip(mask)
            .map(|(x, &m)| if m { value } else { x })
            .collect();
        Ok(self.unary(
            shape,
            out,
            Op::MaskedFill {
                a: self.id,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.node(self.id).value.iter().sum();
        self.unary(Vec::new(), vec![s], Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Var<'t> {
        let node = self.tape.node(self.id);
        let s = node.value.iter().sum::<f64>() / node.value.len() as f64;
        drop(node);
        self.unary(Vec::new(), vec![s], Op::Mean { a: self.id })
    }

    /// Averages consecutive blocks of `group` rows of a 2-D tensor.
    pub fn group_mean_rows(self, group: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || group == 0 || !shape[0].is_multiple_of(group) {
            return Err(mismatch("group_mean_rows", &shape, &[group]));
        }
        let cols = shape[1];
        let x = self.value();
        let mut out = vec![0.0; shape[0] / group * cols];
        for (r, row) in x.chunks_exact(cols).enumerate() {
            add_into(&mut out[(r / group) * cols..(r / group + 1) * cols], row);
        }
        let scale = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(self.unary(
            vec![shape[0] / group, cols],
            out,
            Op::GroupMeanRows {
                a: self.id,
                group,
                cols,
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let old = self.shape();
        if numel(&old) != numel(shape) {
            return Err(mismatch("reshape", &old, shape));
        }
        Ok(self.unary(shape.to_vec(), self.value(), Op::Reshape { a: self.id }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(mismatch("transpose", &shape, &[]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        Ok(self.unary(vec![cols, rows], out, Op::Transpose { a: self.id, rows, cols }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || start > end || end > shape[1] {
            return Err(mismatch("slice_cols", &shape, &[start, end]));
        }
        let cols = shape[1];
        let width = end - start;
        let out = self
            .value()
            .chunks_exact(cols.max(1))
            .flat_map(|r| r[start..end].to_vec())
            .collect();
        Ok(self.unary(
            vec![shape[0], width],
            out,
            Op::SliceCols {
                a: self.id,
                start,
                width,
                cols,
            },
        ))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(mismatch("slice_rows", &shape, &[start, end]));
        }
        let cols = numel(&shape[1..]);
        let out = self.value()[start * cols..end * cols].to_vec();
        let mut new_shape = shape;
        new_shape[0] = end - start;
        Ok(self.unary(new_shape, out, Op::SliceRows { a: self.id, start, cols }))
    }

    /// Cross-entropy between row logits `[rows, classes]` and integer
    /// targets; rows with `mask[r] == false` are skipped.
    pub fn cross_entropy(self, targets: &[usize], mask: Option<&[bool]>, reduction: Reduction) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(mismatch("cross_entropy", &shape, &[m.len()]));
            }
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy: target {bad} out of range for {classes} classes"
            )));
        }
        let active = |r: usize| mask.is_none_or(|m| m[r]);
        let count = (0..rows).filter(|&r| active(r)).count();
        if count == 0 {
            return Err(TensorError::InvalidArgument(
                "cross_entropy: every row is masked".into(),
            ));
        }
        let w = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count as f64,
        };
        let weights: Vec<f64> = (0..rows).map(|r| if active(r) { w } else { 0.0 }).collect();
        let z = self.value();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - max).exp() / sum;
            }
            if weights[r] != 0.0 {
                loss += weights[r] * (max + sum.ln() - row[targets[r]]);
            }
        }
        Ok(self.unary(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights,
                probs,
                classes,
            },
        ))
    }
}

/// Concatenates tensors along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return Err(TensorError::InvalidArgument("concat of zero tensors".into()));
    };
    let tape = first.tape;
    let base = first.check_axis(axis, "concat")?;
    let mut lens = Vec::with_capacity(parts.len());
    for p in parts {
        p.same_tape(first);
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(mismatch("concat", &base, &s));
        }
        lens.push(s[axis]);
    }
    let (outer, _, inner) = axis_split(&base, axis);
    let total: usize = lens.iter().sum();
    let mut out = vec![0.0; outer * total * inner];
    {
        let nodes = tape.nodes.borrow();
        let mut offset = 0;
        for (p, &len) in parts.iter().zip(&lens) {
            let v = &nodes[p.id].value;
            for o in 0..outer {
                out[(o * total + offset) * inner..(o * total + offset + len) * inner]
                    .copy_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(
        shape,
        out,
        Op::Concat {
            parts: parts.iter().zip(&lens).map(|(p, &l)| (p.id, l)).collect(),
            outer,
            inner,
        },
        rg,
        None,
    ))
}

/// Masked multi-head scaled dot-product attention.
///
/// `q`, `k`, `v` are `[groups * len, width]`; rows within one group attend to
/// each other under `mask`, and groups never interact. Each head uses a
/// contiguous slice of `width / heads` columns and scores are scaled by
/// `1 / sqrt(width / heads)`. Masked keys are skipped outright, so their
/// values cannot influence the output; a query row with no allowed key
/// yields zeros.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, mask: &AttentionMask) -> Result<Var<'t>> {
    q.same_tape(&k);
    q.same_tape(&v);
    let shape = q.shape();
    if shape.len() != 2 || k.shape() != shape || v.shape() != shape {
        return Err(mismatch("attention", &shape, &k.shape()));
    }
    let (rows, width) = (shape[0], shape[1]);
    if heads == 0 || width % heads != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "attention: width {width} not divisible by {heads} heads"
        )));
    }
    if mask.groups * mask.len != rows {
        return Err(mismatch("attention", &shape, &[mask.groups, mask.len]));
    }
    let (groups, len) = (mask.groups, mask.len);
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * width];
    let mut probs = vec![0.0; groups * heads * len * len];
    {
        let nodes = q.tape.nodes.borrow();
        let (qv, kv, vv) = (&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value);
        let mut scores = vec![0.0; len];
        for g in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..len {
                    let row_i = (g * len + i) * width + col;
                    let qi = &qv[row_i..row_i + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        if !mask.allowed(g, i, j) {
                            continue;
                        }
                        let row_j = (g * len + j) * width + col;
                        let s = qi.iter().zip(&kv[row_j..row_j + dh]).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let prow = &mut probs[((g * heads + h) * len + i) * len..][..len];
                    let mut sum = 0.0;
                    for j in 0..len {
                        if mask.allowed(g, i, j) {
                            let e = (scores[j] - max).exp();
                            prow[j] = e;
                            sum += e;
                        }
                    }
                    let orow = &mut out[row_i..row_i + dh];
                    for j in 0..len {
                        if !mask.allowed(g, i, j) {
                            continue;
                        }
                        prow[j] /= sum;
                        let row_j = (g * len + j) * width + col;
                        for (o, x) in orow.iter_mut().zip(&vv[row_j..row_j + dh]) {
                            *o += prow[j] * x;
                        }
                    }
                }
            }
        }
    }
    let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
    Ok(q.tape.push(
        shape,
        out,
        Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            heads,
            mask: mask.clone(),
            probs,
        },
        rg,
        None,
    ))
}
