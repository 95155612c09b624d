//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{ensure, Error, Result};
use crate::loss::{self, log_softmax_into};
use crate::tensor::{self, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    /// Stores softmax probabilities of the logits.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Stores log-softmax of both arguments.
    KlDiv {
        p: Var,
        q: Var,
        log_p: Vec<f64>,
        log_q: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<Var>,
    adjoints: Vec<Option<Vec<f64>>>,
}

/// Gradients of a scalar with respect to every parameter leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Var>,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.params
            .iter()
            .position(|&p| p == var)
            .map(|i| self.grads[i].as_slice())
    }

    /// Gradients in parameter registration order.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &[f64])> {
        self.params.iter().copied().zip(self.grads.iter().map(Vec::as_slice))
    }

    /// All parameter gradients concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.concat()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, var: Var) -> Result<&Node> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {var:?} was not recorded on this tape"
            )));
        }
        Ok(&self.nodes[var.index])
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let var = Var {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        var
    }

    fn push_checked(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        Ok(self.push(value, op, requires_grad))
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        let var = self.push(value, Op::Leaf, true);
        self.params.push(var);
        var
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.check(var)?.value)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        ensure!(
            ta.is_matrix() && tb.is_matrix() && ta.cols() == tb.rows(),
            Input,
            "matmul shape mismatch {:?} · {:?}",
            ta.shape(),
            tb.shape()
        );
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let out = tensor::matmul(ta.values(), tb.values(), n, k, m);
        let rg = self.requires(&[a, b]);
        self.push_checked(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg, "matmul")
    }

    /// `x (N×K) + bias (K)` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.check(x)?.value, &self.check(bias)?.value);
        ensure!(
            tx.is_matrix() && tb.len() == tx.cols(),
            Input,
            "add_bias shape mismatch {:?} + {:?}",
            tx.shape(),
            tb.shape()
        );
        let k = tx.cols();
        let b = tb.values();
        let out: Vec<f64> = tx
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % k])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(&[x, bias]);
        self.push_checked(Tensor::from_parts(shape, out), Op::AddBias(x, bias), rg, "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let out = tx.values().iter().map(|&v| v.max(0.0)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Relu(x), rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        ensure!(
            ta.shape() == tb.shape(),
            Input,
            "{what} shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        Ok((t, self.requires(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise(a, b, "add", |x, y| x + y)?;
        self.push_checked(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        self.push_checked(t, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        self.push_checked(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        ensure!(factor.is_finite(), Numeric, "scale factor must be finite");
        let tx = &self.check(x)?.value;
        let out = tx.values().iter().map(|v| v * factor).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(&[x]);
        self.push_checked(Tensor::from_parts(shape, out), Op::Scale(x, factor), rg, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.value.values().iter().sum();
        let rg = self.requires(&[x]);
        self.push_checked(Tensor::from_parts(vec![1], vec![s]), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = loss::mean(self.check(x)?.value.values());
        let rg = self.requires(&[x]);
        self.push_checked(Tensor::from_parts(vec![1], vec![m]), Op::Mean(x), rg, "mean")
    }

    /// Population variance over all entries (the DeMem penalty `Ψ`).
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        let v = loss::batch_variance(self.check(x)?.value.values())?;
        let rg = self.requires(&[x]);
        self.push_checked(Tensor::from_parts(vec![1], vec![v]), Op::Variance(x), rg, "variance")
    }

    /// Per-sample softmax cross-entropy, shape `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.check(logits)?.value;
        let (n, k) = loss::check_logits(t, "softmax_cross_entropy")?;
        loss::check_labels(labels, n, k)?;
        let mut probs = vec![0.0; n * k];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mut probs[i * k..(i + 1) * k];
            log_softmax_into(t.row(i), row);
            out.push((-row[labels[i]]).max(0.0));
            row.iter_mut().for_each(|v| *v = v.exp());
        }
        let rg = self.requires(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push_checked(Tensor::from_parts(vec![n], out), op, rg, "softmax_cross_entropy")
    }

    /// Per-sample `KL(softmax(p_i) ‖ softmax(q_i))`, shape `[N]`.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (&self.check(p)?.value, &self.check(q)?.value);
        let (n, k) = loss::check_logits(tp, "kl_divergence")?;
        ensure!(
            tp.shape() == tq.shape(),
            Input,
            "kl_divergence: shape mismatch {:?} vs {:?}",
            tp.shape(),
            tq.shape()
        );
        tq.check_finite("kl_divergence")?;
        let mut log_p = vec![0.0; n * k];
        let mut log_q = vec![0.0; n * k];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (lp, lq) = (&mut log_p[i * k..(i + 1) * k], &mut log_q[i * k..(i + 1) * k]);
            log_softmax_into(tp.row(i), lp);
            log_softmax_into(tq.row(i), lq);
            out.push(loss::kl_row(lp, lq));
        }
        let rg = self.requires(&[p, q]);
        let op = Op::KlDiv { p, q, log_p, log_q };
        self.push_checked(Tensor::from_parts(vec![n], out), op, rg, "kl_divergence")
    }

    /// Reverse sweep from a scalar; fills the grad slot of every parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        ensure!(
            node.value.is_scalar(),
            Usage,
            "backward needs a scalar loss, got shape {:?}",
            node.value.shape()
        );
        self.backward_with_seed(loss, vec![1.0])
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_with_seed(&mut self, output: Var, seed: Vec<f64>) -> Result<Gradients> {
        let len = self.check(output)?.value.len();
        ensure!(
            seed.len() == len,
            Input,
            "seed length {} does not match output length {len}",
            seed.len()
        );
        self.sweep(output, seed);
        let grads: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|p| {
                self.adjoints[p.index]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.nodes[p.index].value.len()])
            })
            .collect();
        for (p, g) in self.params.iter().zip(&grads) {
            self.nodes[p.index].value.set_grad(g.clone());
        }
        if let Some(pos) = grads.iter().flatten().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at flat parameter index {pos}"
            )));
        }
        Ok(Gradients {
            params: self.params.clone(),
            grads,
        })
    }

    /// Per-sample gradients of `Σ_i weights[i] · losses[i]` with respect to
    /// `params`, one flat vector (params concatenated) per sample.
    ///
    /// Row `i` of every intermediate must depend only on row `i` of the
    /// inputs, which holds for the MLP forward pass. Each parameter may only
    /// appear as the right operand of `matmul` or as the bias of `add_bias`.
    pub fn per_sample_grads(&mut self, losses: Var, weights: &[f64], params: &[Var]) -> Result<Vec<Vec<f64>>> {
        let n = self.check(losses)?.value.len();
        ensure!(
            weights.len() == n,
            Input,
            "expected {n} per-sample weights, got {}",
            weights.len()
        );
        let mut offsets = Vec::with_capacity(params.len());
        let mut total = 0;
        for &p in params {
            let node = self.check(p)?;
            ensure!(
                matches!(node.op, Op::Leaf) && node.requires_grad,
                Usage,
                "per_sample_grads: {p:?} is not a parameter leaf"
            );
            offsets.push(total);
            total += node.value.len();
        }
        self.sweep(losses, weights.to_vec());

        let mut out = vec![vec![0.0; total]; n];
        for node_index in 0..=losses.index {
            let Some(adj) = self.adjoints[node_index].as_ref() else {
                continue;
            };
            match self.nodes[node_index].op {
                Op::MatMul(a, b) => {
                    let Some(slot) = params.iter().position(|&p| p == b) else {
                        continue;
                    };
                    let ta = &self.nodes[a.index].value;
                    let (rows, k, m) = (ta.rows(), ta.cols(), self.nodes[node_index].value.cols());
                    ensure!(rows == n, Usage, "per_sample_grads: matmul has {rows} rows, expected {n}");
                    for (i, g) in out.iter_mut().enumerate() {
                        let a_row = ta.row(i);
                        let d_row = &adj[i * m..(i + 1) * m];
                        let dst = &mut g[offsets[slot]..offsets[slot] + k * m];
                        for (p, &av) in a_row.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &dv) in dst[p * m..(p + 1) * m].iter_mut().zip(d_row) {
                                *o += av * dv;
                            }
                        }
                    }
                }
                Op::AddBias(_, b) => {
                    let Some(slot) = params.iter().position(|&p| p == b) else {
                        continue;
                    };
                    let m = self.nodes[node_index].value.cols();
                    ensure!(
                        self.nodes[node_index].value.rows() == n,
                        Usage,
                        "per_sample_grads: add_bias row count differs from batch size"
                    );
                    for (i, g) in out.iter_mut().enumerate() {
                        let dst = &mut g[offsets[slot]..offsets[slot] + m];
                        for (o, &dv) in dst.iter_mut().zip(&adj[i * m..(i + 1) * m]) {
                            *o += dv;
                        }
                    }
                }
                _ => {}
            }
        }
        // Any other use of a parameter would be silently dropped above.
        for node in &self.nodes[..=losses.index] {
            let inputs: &[Var] = match &node.op {
                Op::MatMul(a, _) | Op::AddBias(a, _) => std::slice::from_ref(a),
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => &[*a, *b],
                Op::Relu(x) | Op::Scale(x, _) | Op::Sum(x) | Op::Mean(x) | Op::Variance(x) => {
                    std::slice::from_ref(x)
                }
                Op::CrossEntropy { logits, .. } => std::slice::from_ref(logits),
                Op::KlDiv { p, q, .. } => &[*p, *q],
                Op::Leaf => &[],
            };
            ensure!(
                !inputs.iter().any(|v| params.contains(v)),
                Usage,
                "per_sample_grads: parameter used outside matmul/add_bias"
            );
        }
        Ok(out)
    }

    fn accumulate(adjoints: &mut [Option<Vec<f64>>], var: Var, grad: Vec<f64>) {
        match &mut adjoints[var.index] {
            Some(existing) => existing.iter_mut().zip(grad).for_each(|(e, g)| *e += g),
            slot @ None => *slot = Some(grad),
        }
    }

    fn sweep(&mut self, output: Var, seed: Vec<f64>) {
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[output.index] = Some(seed);
        for idx in (0..=output.index).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(d) = adjoints[idx].take() else {
                continue;
            };
            let nodes = &self.nodes;
            let rg = |v: &Var| nodes[v.index].requires_grad;
            let val = |v: &Var| &nodes[v.index].value;
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    if rg(a) {
                        Self::accumulate(&mut adjoints, *a, tensor::matmul_bt(&d, tb.values(), n, m, k));
                    }
                    if rg(b) {
                        Self::accumulate(&mut adjoints, *b, tensor::matmul_at(ta.values(), &d, n, k, m));
                    }
                }
                Op::AddBias(x, b) => {
                    if rg(b) {
                        let k = val(b).len();
                        let mut db = vec![0.0; k];
                        for (i, v) in d.iter().enumerate() {
                            db[i % k] += v;
                        }
                        Self::accumulate(&mut adjoints, *b, db);
                    }
                    if rg(x) {
                        Self::accumulate(&mut adjoints, *x, d.clone());
                    }
                }
                Op::Relu(x) => {
                    let g = d
                        .iter()
                        .zip(val(x).values())
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    Self::accumulate(&mut adjoints, *x, g);
                }
                Op::Add(a, b) => {
                    if rg(a) {
                        Self::accumulate(&mut adjoints, *a, d.clone());
                    }
                    if rg(b) {
                        Self::accumulate(&mut adjoints, *b, d.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if rg(a) {
                        Self::accumulate(&mut adjoints, *a, d.clone());
                    }
                    if rg(b) {
                        Self::accumulate(&mut adjoints, *b, d.iter().map(|g| -g).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        let g = d.iter().zip(val(b).values()).map(|(g, y)| g * y).collect();
                        Self::accumulate(&mut adjoints, *a, g);
                    }
                    if rg(b) {
                        let g = d.iter().zip(val(a).values()).map(|(g, x)| g * x).collect();
                        Self::accumulate(&mut adjoints, *b, g);
                    }
                }
                Op::Scale(x, c) => {
                    Self::accumulate(&mut adjoints, *x, d.iter().map(|g| g * c).collect());
                }
                Op::Sum(x) => {
                    Self::accumulate(&mut adjoints, *x, vec![d[0]; val(x).len()]);
                }
                Op::Mean(x) => {
                    let n = val(x).len();
                    Self::accumulate(&mut adjoints, *x, vec![d[0] / n as f64; n]);
                }
                Op::Variance(x) => {
                    let g = loss::batch_variance_grad(val(x).values())
                        .expect("variance input is non-empty")
                        .into_iter()
                        .map(|g| g * d[0])
                        .collect();
                    Self::accumulate(&mut adjoints, *x, g);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = val(logits).cols();
                    let mut g = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        g[i * k + y] -= 1.0;
                        g[i * k..(i + 1) * k].iter_mut().for_each(|v| *v *= d[i]);
                    }
                    Self::accumulate(&mut adjoints, *logits, g);
                }
                Op::KlDiv { p, q, log_p, log_q } => {
                    let k = val(p).cols();
                    if rg(p) {
                        // ∂KL/∂a_j = p_j (log p_j − log q_j − KL)
                        let mut g = vec![0.0; log_p.len()];
                        for (i, &di) in d.iter().enumerate() {
                            let r = i * k..(i + 1) * k;
                            let kl: f64 = log_p[r.clone()]
                                .iter()
                                .zip(&log_q[r.clone()])
                                .map(|(&lp, &lq)| lp.exp() * (lp - lq))
                                .sum();
                            for j in r {
                                g[j] = di * log_p[j].exp() * (log_p[j] - log_q[j] - kl);
                            }
                        }
                        Self::accumulate(&mut adjoints, *p, g);
                    }
                    if rg(q) {
                        // ∂KL/∂b_j = q_j − p_j
                        let g = (0..log_p.len())
                            .map(|j| d[j / k] * (log_q[j].exp() - log_p[j].exp()))
                            .collect();
                        Self::accumulate(&mut adjoints, *q, g);
                    }
                }
            }
            adjoints[idx] = Some(d);
        }
        self.adjoints = adjoints;
    }
}
