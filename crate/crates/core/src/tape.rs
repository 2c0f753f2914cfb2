//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to push gradients back to its inputs. Nodes are stored in
//! creation order, so a reverse sweep over the node list is a valid
//! topological order. A tape is single-writer and not `Send`; build one per
//! training step or per evaluation worker.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Abs(usize),
    Relu(usize),
    Gelu(usize),
    Scale(usize, f64),
    Log(usize),
    Softmax { x: usize },
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    PoolMaxAvg { x: usize, argmax: Vec<usize> },
    MeanRows(usize),
    Sum(usize),
    Gather { table: usize, ids: Vec<usize> },
    Mask { x: usize, mask: Vec<f64> },
    Pick { x: usize, idx: Vec<usize> },
    Cosine { q: usize, s: usize },
    SqDist { q: usize, p: usize },
    Transpose(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Vec<f64>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of recorded operations, leaves excluded.
    pub fn op_count(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Hash of every branch taken by a non-smooth op (relu and abs signs,
    /// max-pool winners). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::hash::DefaultHasher::new();
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    for &v in nodes[*x].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::PoolMaxAvg { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Accumulated gradient of a leaf; zeros when the leaf was unreachable.
    pub fn grad(&self, v: Var<'_>) -> Tensor {
        let shape = v.shape();
        match self.leaf_grads.borrow().get(&v.id) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grads(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = leaf_grads
                    .entry(id)
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (s, gv) in slot.iter_mut().zip(&g) {
                    *s += gv;
                }
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[*a].value.dims2().unwrap();
            let n = nodes[*b].value.cols();
            let bv = nodes[*b].value.data();
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                tensor::matmul_bt_acc(g, bv, ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                tensor::matmul_at_acc(av, g, gb, m, k, n);
            }
        }
        Op::MatMulBt(a, b) => {
            let (m, k) = nodes[*a].value.dims2().unwrap();
            let n = nodes[*b].value.rows();
            let bv = nodes[*b].value.data();
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                tensor::matmul_acc(g, bv, ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                tensor::matmul_at_acc(g, av, gb, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for &x in [a, b] {
                if let Some(gx) = acc(grads, nodes, x) {
                    add_into(gx, g);
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            let n = out.cols();
            if let Some(gb) = acc(grads, nodes, *b) {
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (s, v) in gb.iter_mut().zip(g) {
                    *s -= v;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((s, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                    *s += gv * y;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((s, gv), x) in gb.iter_mut().zip(g).zip(av) {
                    *s += gv * x;
                }
            }
        }
        Op::Abs(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((s, gv), x) in ga.iter_mut().zip(g).zip(av) {
                    *s += gv * sign(*x);
                }
            }
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((s, gv), x) in ga.iter_mut().zip(g).zip(av) {
                    if *x > 0.0 {
                        *s += gv;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((s, gv), x) in ga.iter_mut().zip(g).zip(av) {
                    *s += gv * gelu_grad(*x);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (s, gv) in ga.iter_mut().zip(g) {
                    *s += gv * c;
                }
            }
        }
        Op::Log(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((s, gv), x) in ga.iter_mut().zip(g).zip(av) {
                    *s += gv / x;
                }
            }
        }
        Op::Softmax { x } => {
            let n = out.cols();
            let y = out.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((gr, yr), sr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let inner = tensor::dot(gr, yr);
                    for ((s, gv), yv) in sr.iter_mut().zip(gr).zip(yr) {
                        *s += yv * (gv - inner);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let n = out.cols();
            let y = out.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((gr, yr), sr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((s, gv), yv) in sr.iter_mut().zip(gr).zip(yr) {
                        *s += gv - yv.exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = out.cols();
            let gam = nodes[*gamma].value.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, ((gr, xr), sr)) in g
                    .chunks(n)
                    .zip(xhat.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .enumerate()
                {
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = tensor::dot(&dxhat, xr) / n as f64;
                    for ((s, d), xh) in sr.iter_mut().zip(&dxhat).zip(xr) {
                        *s += inv_std[r] * (d - mean_d - xh * mean_dx);
                    }
                }
            }
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((s, gv), xh) in gg.iter_mut().zip(gr).zip(xr) {
                        *s += gv * xh;
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                for gr in g.chunks(n) {
                    add_into(gb, gr);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = acc(grads, nodes, p) {
                    for r in 0..rows {
                        add_into(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = acc(grads, nodes, p) {
                    add_into(gp, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let c = out.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(&mut gx[start * c..start * c + g.len()], g);
            }
        }
        Op::SliceCols { x, start } => {
            let w = out.cols();
            let c = nodes[*x].value.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, gr) in g.chunks(w).enumerate() {
                    add_into(&mut gx[r * c + start..r * c + start + w], gr);
                }
            }
        }
        Op::PoolMaxAvg { x, argmax } => {
            let (l, d) = nodes[*x].value.dims2().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (c, &r) in argmax.iter().enumerate() {
                    gx[r * d + c] += g[c];
                }
                for r in 0..l {
                    for c in 0..d {
                        gx[r * d + c] += g[d + c] / l as f64;
                    }
                }
            }
        }
        Op::MeanRows(x) => {
            let (l, d) = nodes[*x].value.dims2().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..l {
                    for c in 0..d {
                        gx[r * d + c] += g[c] / l as f64;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for s in gx.iter_mut() {
                    *s += g[0];
                }
            }
        }
        Op::Gather { table, ids } => {
            let d = out.cols();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::Mask { x, mask } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((s, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                    *s += gv * m;
                }
            }
        }
        Op::Pick { x, idx } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (gv, &i) in g.iter().zip(idx) {
                    gx[i] += gv;
                }
            }
        }
        Op::Cosine { q, s } => {
            let qv = nodes[*q].value.data();
            let sv = &nodes[*s].value;
            let d = qv.len();
            let qn = tensor::norm(qv);
            let sims = out.data();
            let mut dq = vec![0.0; d];
            let mut ds = vec![0.0; sv.len()];
            for j in 0..sv.rows() {
                let sj = sv.row(j);
                let sn = tensor::norm(sj);
                if qn == 0.0 || sn == 0.0 {
                    continue;
                }
                let sim = sims[j];
                for c in 0..d {
                    dq[c] += g[j] * (sj[c] / (qn * sn) - sim * qv[c] / (qn * qn));
                    ds[j * d + c] += g[j] * (qv[c] / (qn * sn) - sim * sj[c] / (sn * sn));
                }
            }
            if let Some(gq) = acc(grads, nodes, *q) {
                add_into(gq, &dq);
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                add_into(gs, &ds);
            }
        }
        Op::SqDist { q, p } => {
            let qv = nodes[*q].value.data();
            let pv = &nodes[*p].value;
            let d = qv.len();
            let mut dq = vec![0.0; d];
            let mut dp = vec![0.0; pv.len()];
            for j in 0..pv.rows() {
                let pj = pv.row(j);
                for c in 0..d {
                    let diff = 2.0 * (qv[c] - pj[c]) * g[j];
                    dq[c] += diff;
                    dp[j * d + c] -= diff;
                }
            }
            if let Some(gq) = acc(grads, nodes, *q) {
                add_into(gq, &dq);
            }
            if let Some(gp) = acc(grads, nodes, *p) {
                add_into(gp, &dp);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = out.dims2().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                // gx is c×r, g is r×c
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn softmax_row(row: &[f64], valid: usize, out: &mut [f64]) {
    let max = row[..valid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out[..valid].iter_mut().zip(&row[..valid]) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in &mut out[..valid] {
        *o /= total;
    }
    for o in &mut out[valid..] {
        *o = 0.0;
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.value(self.id).rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.value(self.id).cols()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.value(self.id));
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.unary(op, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
                .expect("elementwise map preserves shape")
        })
    }

    fn same_shape(self, other: Var<'t>, what: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(())
    }

    fn zip(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("zip preserves shape")
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    /// `self[m×k] · other[k×n]`
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(Error::shape(format!("matmul {m}×{k} by {k2}×{n}")));
            }
            let mut out = vec![0.0; m * n];
            tensor::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// `self[m×k] · other[n×k]ᵀ`
    pub fn matmul_bt(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (m, k) = a.dims2()?;
            let (n, k2) = b.dims2()?;
            if k != k2 {
                return Err(Error::shape(format!("matmul_bt {m}×{k} by ({n}×{k2})ᵀ")));
            }
            let mut out = vec![0.0; m * n];
            tensor::matmul_bt_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMulBt(self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        Ok(self.zip(other, Op::Add(self.id, other.id), |a, b| a + b))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        Ok(self.zip(other, Op::Sub(self.id, other.id), |a, b| a - b))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        Ok(self.zip(other, Op::Mul(self.id, other.id), |a, b| a * b))
    }

    /// Adds a row vector (shape `[n]` or `[1, n]`) to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(bias.id);
            let n = a.cols();
            if b.len() != n {
                return Err(Error::shape(format!(
                    "row bias of {} entries for {n} columns",
                    b.len()
                )));
            }
            let data = a
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.tape.needs(&[self.id, bias.id]);
        Ok(self.tape.push(value, Op::AddRow(self.id, bias.id), rg))
    }

    pub fn abs(self) -> Var<'t> {
        self.map(Op::Abs(self.id), f64::abs)
    }

    pub fn relu(self) -> Var<'t> {
        self.map(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn gelu(self) -> Var<'t> {
        self.map(Op::Gelu(self.id), gelu)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, c), move |v| v * c)
    }

    /// Natural log. Inputs must be strictly positive.
    pub fn ln(self) -> Var<'t> {
        self.map(Op::Log(self.id), f64::ln)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let cols = self.with_value(|t| t.dims2().map(|(_, c)| c))?;
        self.masked_softmax_rows(cols)
    }

    /// Row-wise softmax over the first `valid` columns; the rest get weight 0.
    pub fn masked_softmax_rows(self, valid: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (r, c) = a.dims2()?;
            if valid == 0 || valid > c {
                return Err(Error::shape(format!("{valid} valid columns of {c}")));
            }
            let mut out = vec![0.0; r * c];
            for (row, o) in a.data().chunks(c).zip(out.chunks_mut(c)) {
                softmax_row(row, valid, o);
            }
            Tensor::new(vec![r, c], out)?
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Softmax { x: self.id }, rg))
    }

    /// Row-wise log-softmax, computed as `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (r, c) = a.dims2()?;
            let mut out = Vec::with_capacity(r * c);
            for row in a.data().chunks(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::new(vec![r, c], out)?
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::LogSoftmax(self.id), rg))
    }

    /// Per-row normalisation followed by an elementwise affine map.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (value, xhat, inv_std) = {
            let a = self.tape.value(self.id);
            let (r, c) = a.dims2()?;
            let g = self.tape.value(gamma.id);
            let b = self.tape.value(beta.id);
            if g.len() != c || b.len() != c {
                return Err(Error::shape("layer norm affine width mismatch"));
            }
            let mut xhat = Vec::with_capacity(r * c);
            let mut inv_std = Vec::with_capacity(r);
            let mut out = Vec::with_capacity(r * c);
            for row in a.data().chunks(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for (j, v) in row.iter().enumerate() {
                    let xh = (v - mean) * is;
                    xhat.push(xh);
                    out.push(xh * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::new(vec![r, c], out)?, xhat, inv_std)
        };
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (r, c) = a.dims2()?;
            if len == 0 || start + len > r {
                return Err(Error::shape(format!("rows {start}..{} of {r}", start + len)));
            }
            Tensor::new(vec![len, c], a.data()[start * c..(start + len) * c].to_vec())?
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::SliceRows { x: self.id, start }, rg))
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (r, c) = a.dims2()?;
            if width == 0 || start + width > c {
                return Err(Error::shape(format!("cols {start}..{} of {c}", start + width)));
            }
            let data = a
                .data()
                .chunks(c)
                .flat_map(|row| row[start..start + width].iter().copied())
                .collect();
            Tensor::new(vec![r, width], data)?
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::SliceCols { x: self.id, start }, rg))
    }

    /// Column-wise `[max; mean]` over rows: `L×D → 1×2D`. Max ties go to the
    /// lowest row index.
    pub fn pool_max_avg(self) -> Result<Var<'t>> {
        let (value, argmax) = {
            let a = self.tape.value(self.id);
            let (l, d) = a.dims2()?;
            let mut out = vec![0.0; 2 * d];
            let mut argmax = vec![0usize; d];
            for c in 0..d {
                let mut best = a.get(0, c);
                let mut sum = 0.0;
                for r in 0..l {
                    let v = a.get(r, c);
                    if v > best {
                        best = v;
                        argmax[c] = r;
                    }
                    sum += v;
                }
                out[c] = best;
                out[d + c] = sum / l as f64;
            }
            (Tensor::new(vec![1, 2 * d], out)?, argmax)
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::PoolMaxAvg { x: self.id, argmax }, rg))
    }

    /// Column means: `L×D → 1×D`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (l, d) = a.dims2()?;
            let mut out = vec![0.0; d];
            for row in a.data().chunks(d) {
                add_into(&mut out, row);
            }
            for o in &mut out {
                *o /= l as f64;
            }
            Tensor::new(vec![1, d], out)?
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::MeanRows(self.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (r, c) = a.dims2()?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.get(i, j);
                }
            }
            Tensor::new(vec![c, r], out)?
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Transpose(self.id), rg))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.data().iter().sum()))
    }

    /// Picks entries by flat index into a `1×len` row.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if idx.is_empty() || idx.iter().any(|&i| i >= a.len()) {
                return Err(Error::shape("pick index out of range"));
            }
            Tensor::row_vector(idx.iter().map(|&i| a.data()[i]).collect())?
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::Pick {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise multiply by a fixed mask.
    pub fn mask(self, mask: Vec<f64>) -> Var<'t> {
        let value = {
            let a = self.tape.value(self.id);
            assert_eq!(mask.len(), a.len(), "mask length");
            let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            Tensor::new(a.shape().to_vec(), data).expect("mask preserves shape")
        };
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::Mask { x: self.id, mask }, rg)
    }

    /// Cosine similarity between a `1×D` row and each row of `M×D`; a zero-norm
    /// vector gives similarity 0.
    pub fn cosine_rows(self, rows: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let q = self.tape.value(self.id);
            let s = self.tape.value(rows.id);
            let (m, d) = s.dims2()?;
            if q.len() != d {
                return Err(Error::shape(format!("cosine of {} against width {d}", q.len())));
            }
            let qn = tensor::norm(q.data());
            let sims = (0..m)
                .map(|j| {
                    let sj = s.row(j);
                    let sn = tensor::norm(sj);
                    if qn == 0.0 || sn == 0.0 {
                        0.0
                    } else {
                        tensor::dot(q.data(), sj) / (qn * sn)
                    }
                })
                .collect();
            Tensor::row_vector(sims)?
        };
        let rg = self.tape.needs(&[self.id, rows.id]);
        Ok(self.tape.push(
            value,
            Op::Cosine {
                q: self.id,
                s: rows.id,
            },
            rg,
        ))
    }

    /// Squared euclidean distance from a `1×D` row to each row of `M×D`.
    pub fn sq_dist_rows(self, rows: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let q = self.tape.value(self.id);
            let p = self.tape.value(rows.id);
            let (m, d) = p.dims2()?;
            if q.len() != d {
                return Err(Error::shape(format!("distance of {} against width {d}", q.len())));
            }
            let dists = (0..m)
                .map(|j| {
                    q.data()
                        .iter()
                        .zip(p.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            Tensor::row_vector(dists)?
        };
        let rg = self.tape.needs(&[self.id, rows.id]);
        Ok(self.tape.push(
            value,
            Op::SqDist {
                q: self.id,
                p: rows.id,
            },
            rg,
        ))
    }

    /// Inverted dropout: zero each element with probability `rate`, scale the
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.with_value(Tensor::len);
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Ok(self.mask(mask))
    }
}

/// Row-wise table lookup: `ids.len() × D`.
pub fn gather<'t>(table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    let tape = table.tape;
    let value = {
        let t = tape.value(table.id);
        let (v, d) = t.dims2()?;
        if ids.is_empty() {
            return Err(Error::shape("gather with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Data(format!("id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        Tensor::new(vec![ids.len(), d], out)?
    };
    let rg = tape.needs(&[table.id]);
    Ok(tape.push(
        value,
        Op::Gather {
            table: table.id,
            ids: ids.to_vec(),
        },
        rg,
    ))
}

pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
    if parts.len() == 1 {
        return Ok(*first);
    }
    let tape = first.tape;
    let value = {
        let vals: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
        let r = vals[0].dims2()?.0;
        for v in &vals {
            if v.dims2()?.0 != r {
                return Err(Error::shape("concat_cols row mismatch"));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for v in &vals {
                out.extend_from_slice(v.row(row));
            }
        }
        Tensor::new(vec![r, total], out)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    Ok(tape.push(value, Op::ConcatCols(ids), rg))
}

pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
    if parts.len() == 1 {
        return Ok(*first);
    }
    let tape = first.tape;
    let value = {
        let vals: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
        let c = vals[0].dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for v in &vals {
            let (r, c2) = v.dims2()?;
            if c2 != c {
                return Err(Error::shape("concat_rows column mismatch"));
            }
            rows += r;
            out.extend_from_slice(v.data());
        }
        Tensor::new(vec![rows, c], out)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    Ok(tape.push(value, Op::ConcatRows(ids), rg))
}
