use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, axis_split, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Probability floor used by the negative log-likelihood op.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    BroadcastRows(Var),
    CausalConv { x: Var, kernel: Var, bias: Var },
    Glu(Var),
    Softmax { x: Var, axis: usize },
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    WeightNorm { v: Var, g: Var, norms: Vec<f64> },
    Sum(Var),
    Nll { probs: Var, targets: Vec<usize>, weight: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// An append-only record of executed operations.
///
/// Nodes are stored in execution order, so the node vector is already a
/// topological order and backward simply walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamp_events: usize,
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of times the NLL op had to floor a target probability.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Accumulated gradient of a node, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies a node out as a [`Tensor`], including its gradient if any.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone())
            .expect("graph nodes always hold consistent shapes");
        t.set_requires_grad(node.requires_grad);
        if let Some(g) = &node.grad {
            t.set_grad(g.clone()).expect("gradient matches value");
        }
        t
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (k2, n) = rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a vector of length `cols(x)` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).len() != cols {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(r, b)| r + b))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg)
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (r0, c0) = rank2("concat", self.shape(first))?;
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = rank2("concat", self.shape(p))?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok || axis > 1 {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            cols += c;
        }
        let (shape, out) = if axis == 0 {
            let out = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
            (vec![rows, c0], out)
        } else {
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                }
            }
            (vec![r0, cols], out)
        };
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` rows (axis 0) or columns (axis 1) of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rank2("slice", self.shape(x))?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::Dimension {
                op: "slice",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let v = self.value(x);
        let (shape, out) = if axis == 0 {
            (vec![len, c], v[start * c..(start + len) * c].to_vec())
        } else {
            let out = (0..r)
                .flat_map(|i| v[i * c + start..i * c + start + len].iter().copied())
                .collect();
            (vec![r, len], out)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Repeats a tensor, viewed as one row, `rows` times into `[rows × numel]`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let v = self.value(x);
        let n = v.len();
        let out = (0..rows).flat_map(|_| v.iter().copied()).collect();
        let rg = self.rg(&[x]);
        self.push(vec![rows, n], out, Op::BroadcastRows(x), rg)
    }

    /// Masked 1-d convolution over time. `x` is `[T×Cin]`, `kernel` is
    /// `[K×Cin×Cout]`; output row t only sees input rows `t-K+1 ..= t`,
    /// with rows before the start treated as zero.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (t_len, cin) = rank2("causal_conv1d", self.shape(x))?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[1] != cin || self.value(bias).len() != ks[2] {
            return Err(Error::Dimension {
                op: "causal_conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: ks,
            });
        }
        let (k_w, cout) = (ks[0], ks[2]);
        let xv = self.value(x);
        let kv = self.value(kernel);
        let bv = self.value(bias);
        let mut out = Vec::with_capacity(t_len * cout);
        for _ in 0..t_len {
            out.extend_from_slice(bv);
        }
        for t in 0..t_len {
            for k in 0..k_w {
                // input row feeding tap k of output row t
                let Some(src) = (t + k).checked_sub(k_w - 1) else {
                    continue;
                };
                gemm_nn(
                    &xv[src * cin..(src + 1) * cin],
                    &kv[k * cin * cout..(k + 1) * cin * cout],
                    &mut out[t * cout..(t + 1) * cout],
                    1,
                    cin,
                    cout,
                );
            }
        }
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            vec![t_len, cout],
            out,
            Op::CausalConv { x, kernel, bias },
            rg,
        ))
    }

    /// Gated linear unit over the last axis: first half ⊙ sigmoid(second half).
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c2 = *shape.last().unwrap_or(&0);
        if !c2.is_multiple_of(2) {
            return Err(Error::Dimension {
                op: "glu",
                lhs: shape,
                rhs: vec![c2 / 2, c2 / 2],
            });
        }
        let c = c2 / 2;
        let out = self
            .value(x)
            .chunks(c2)
            .flat_map(|row| {
                let (a, b) = row.split_at(c);
                a.iter()
                    .zip(b)
                    .map(|(a, b)| a * kernels::sigmoid(*b))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = c;
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, Op::Glu(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let out = kernels::softmax_axis(self.value(x), &shape, axis);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Inverted dropout. In eval mode (or with `p == 0`) returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), p, seed);
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg))
    }

    /// Gathers rows of a `[V×D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = rank2("embedding", self.shape(table))?;
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::OutOfVocabulary { id, size: vocab });
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding of no ids".into()));
        }
        let t = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&id| t[id * dim..(id + 1) * dim].iter().copied())
            .collect();
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `w = g · v / ‖v‖`, with the norm taken per output channel (last axis).
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        let cout = *shape.last().unwrap_or(&0);
        if self.value(g).len() != cout {
            return Err(Error::Dimension {
                op: "weight_norm",
                lhs: shape,
                rhs: self.shape(g).to_vec(),
            });
        }
        let vv = self.value(v);
        let mut norms = vec![0.0; cout];
        for row in vv.chunks(cout) {
            for (n, x) in norms.iter_mut().zip(row) {
                *n += x * x;
            }
        }
        for (channel, n) in norms.iter_mut().enumerate() {
            *n = n.sqrt();
            if *n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateDirection { channel });
            }
        }
        let gv = self.value(g);
        let out = vv
            .chunks(cout)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(o, x)| gv[o] * x / norms[o])
                    .collect::<Vec<_>>()
            })
            .collect();
        let rg = self.rg(&[v, g]);
        Ok(self.push(shape, out, Op::WeightNorm { v, g, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// `-weight · Σ_i ln probs[i, targets[i]]` over the first `targets.len()`
    /// rows. Probabilities below [`PROB_FLOOR`] are floored and counted.
    pub fn nll(&mut self, probs: Var, targets: &[usize], weight: f64) -> Result<Var> {
        let (rows, vocab) = rank2("nll", self.shape(probs))?;
        if targets.len() > rows {
            return Err(Error::Dimension {
                op: "nll",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::OutOfVocabulary { id, size: vocab });
        }
        let pv = self.value(probs);
        let mut total = 0.0;
        let mut clamped = 0;
        for (i, &t) in targets.iter().enumerate() {
            let p = pv[i * vocab + t];
            if p < PROB_FLOOR {
                clamped += 1;
            }
            total -= p.max(PROB_FLOOR).ln();
        }
        if clamped > 0 {
            log::warn!("nll: {clamped} target probabilities floored at {PROB_FLOOR:e}");
        }
        self.clamp_events += clamped;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            vec![1],
            vec![weight * total],
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                weight,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. Gradients accumulate into every reached
    /// node that requires them; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &d, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(g) => g.iter_mut().zip(&d).for_each(|(g, d)| *g += d),
                None => node.grad = Some(d),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, d: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if let Some(da) = slot(nodes, adj, *a) {
                    gemm_nt(d, &nodes[b.0].value, da, m, n, k);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    gemm_tn(&nodes[a.0].value, d, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(dv) = slot(nodes, adj, *v) {
                        dv.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    dx.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                }
                if let Some(db) = slot(nodes, adj, *bias) {
                    let cols = db.len();
                    for row in d.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = slot(nodes, adj, *a) {
                    for j in 0..d.len() {
                        da[j] += d[j] * bv[j];
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for j in 0..d.len() {
                        db[j] += d[j] * av[j];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    dx.iter_mut().zip(d).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(dx) = slot(nodes, adj, *x) {
                    for j in 0..d.len() {
                        if xv[j] > 0.0 {
                            dx[j] += d[j];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(dx) = slot(nodes, adj, *x) {
                    for j in 0..d.len() {
                        dx[j] += d[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                if let Some(dx) = slot(nodes, adj, *x) {
                    for j in 0..d.len() {
                        dx[j] += d[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let (r, c) = (nodes[p.0].shape[0], nodes[p.0].shape[1]);
                    if let Some(dp) = slot(nodes, adj, *p) {
                        if *axis == 0 {
                            let src = &d[offset * c..(offset + r) * c];
                            dp.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        } else {
                            for row in 0..r {
                                let src = &d[row * total_cols + offset..row * total_cols + offset + c];
                                dp[row * c..(row + 1) * c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, y)| *x += y);
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { x, axis, start } => {
                let c = nodes[x.0].shape[1];
                if let Some(dx) = slot(nodes, adj, *x) {
                    if *axis == 0 {
                        dx[start * c..start * c + d.len()]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(x, y)| *x += y);
                    } else {
                        let len = node.shape[1];
                        for (row, src) in d.chunks(len).enumerate() {
                            dx[row * c + start..row * c + start + len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::BroadcastRows(x) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    let n = dx.len();
                    for row in d.chunks(n) {
                        dx.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::CausalConv { x, kernel, bias } => {
                let (t_len, cin) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let (k_w, cout) = (nodes[kernel.0].shape[0], nodes[kernel.0].shape[2]);
                let xv = &nodes[x.0].value;
                let kv = &nodes[kernel.0].value;
                if let Some(dx) = slot(nodes, adj, *x) {
                    for t in 0..t_len {
                        for k in 0..k_w {
                            let Some(src) = (t + k).checked_sub(k_w - 1) else {
                                continue;
                            };
                            gemm_nt(
                                &d[t * cout..(t + 1) * cout],
                                &kv[k * cin * cout..(k + 1) * cin * cout],
                                &mut dx[src * cin..(src + 1) * cin],
                                1,
                                cout,
                                cin,
                            );
                        }
                    }
                }
                if let Some(dk) = slot(nodes, adj, *kernel) {
                    for t in 0..t_len {
                        for k in 0..k_w {
                            let Some(src) = (t + k).checked_sub(k_w - 1) else {
                                continue;
                            };
                            gemm_tn(
                                &xv[src * cin..(src + 1) * cin],
                                &d[t * cout..(t + 1) * cout],
                                &mut dk[k * cin * cout..(k + 1) * cin * cout],
                                1,
                                cin,
                                cout,
                            );
                        }
                    }
                }
                if let Some(db) = slot(nodes, adj, *bias) {
                    for row in d.chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Glu(x) => {
                let xv = &nodes[x.0].value;
                let c = *node.shape.last().unwrap();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (r, dr) in d.chunks(c).enumerate() {
                        let row = &xv[r * 2 * c..(r + 1) * 2 * c];
                        let drow = &mut dx[r * 2 * c..(r + 1) * 2 * c];
                        for j in 0..c {
                            let s = kernels::sigmoid(row[c + j]);
                            drow[j] += dr[j] * s;
                            drow[c + j] += dr[j] * row[j] * s * (1.0 - s);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                if let Some(dx) = slot(nodes, adj, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| d[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                dx[idx(j)] += y[idx(j)] * (d[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for j in 0..d.len() {
                        dx[j] += d[j] * mask[j];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].shape[1];
                if let Some(dt) = slot(nodes, adj, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&d[r * dim..(r + 1) * dim])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::WeightNorm { v, g, norms } => {
                let cout = norms.len();
                let vv = &nodes[v.0].value;
                let gv = &nodes[g.0].value;
                // per channel: Σ_r dw·v
                let mut proj = vec![0.0; cout];
                for (row, drow) in vv.chunks(cout).zip(d.chunks(cout)) {
                    for o in 0..cout {
                        proj[o] += drow[o] * row[o];
                    }
                }
                if let Some(dg) = slot(nodes, adj, *g) {
                    for o in 0..cout {
                        dg[o] += proj[o] / norms[o];
                    }
                }
                if let Some(dv) = slot(nodes, adj, *v) {
                    for (r, (row, drow)) in vv.chunks(cout).zip(d.chunks(cout)).enumerate() {
                        for o in 0..cout {
                            let n = norms[o];
                            dv[r * cout + o] +=
                                gv[o] / n * (drow[o] - proj[o] * row[o] / (n * n));
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    dx.iter_mut().for_each(|v| *v += d[0]);
                }
            }
            Op::Nll {
                probs,
                targets,
                weight,
            } => {
                let vocab = nodes[probs.0].shape[1];
                let pv = &nodes[probs.0].value;
                if let Some(dp) = slot(nodes, adj, *probs) {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = pv[r * vocab + t];
                        if p >= PROB_FLOOR {
                            dp[r * vocab + t] -= d[0] * weight / p;
                        }
                    }
                }
            }
        }
    }
}

// Lazily materialised adjoint buffer for an operand, or None when the operand
// does not need gradients.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

/// Keep-mask for inverted dropout: each entry is 0 with probability `p`,
/// otherwise `1 / (1 - p)`.
pub fn dropout_mask(len: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}
