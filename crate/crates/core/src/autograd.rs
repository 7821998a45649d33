//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed through it in creation order,
//! which is also a topological order. [`Graph::backward`] walks the record in
//! reverse, visiting each node once and accumulating adjoints additively, so
//! a value consumed several times receives the sum of its adjoints.
//!
//! The graph is rebuilt for every forward pass and is confined to one thread.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, dims2, gemm, gemm_nn, gemm_nt, gemm_tn, softmax_strided, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row reference used by [`Graph::gather_rows`]: `(source, row)` or a zero row.
pub type RowRef = Option<(usize, usize)>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        sources: Vec<Var>,
        index: Vec<RowRef>,
    },
    MaskedMeanPool {
        x: Var,
        weights: Vec<f64>,
        seq: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        logits: Var,
        labels: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and the
    /// loss depends on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a constant leaf built from a raw buffer.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies a recorded value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded values are consistent")
    }

    /// Attention probabilities `[batch, heads, seq, seq]` saved by an
    /// [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        dims2(op, &self.nodes[v.0].shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: [{m}×{k}] × [{k2}×{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("row widths differ: [{m}×{k}] vs [{n}×{k2}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a), self.value(b), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
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
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    /// Broadcasts `bias: [n]` over the rows of `x: [m×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix("add_row", x)?;
        if self.value(bias).len() != n {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} for rows of {n}", self.value(bias).len()),
            ));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_split("softmax", self.shape(x), axis)?;
        let mut out = self.value(x).to_vec();
        softmax_strided(&mut out, outer, n, inner);
        let rg = self.rg(x);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    /// Normalises every length-`d` row to zero mean and unit (biased)
    /// variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(gamma).len();
        if self.value(beta).len() != d || self.shape(x).last() != Some(&d) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?} with gamma {} and beta {}",
                    self.shape(x),
                    d,
                    self.value(beta).len()
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over `batch` independent
    /// sequences of `seq` positions stacked row-wise in `q`, `k`, `v`
    /// (`[batch·seq × d]`).
    ///
    /// Positions with `mask == false` are never attended to, and their own
    /// rows attend to nothing (zero output). A row with no visible key also
    /// yields zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix("attention", q)?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::shape("attention", "q, k, v shapes differ"));
        }
        if rows != batch * seq || mask.len() != rows {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows, mask {} for batch {batch} × seq {seq}", mask.len()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            let m = &mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    &qv[off..],
                    d as isize,
                    1,
                    &kv[off..],
                    1,
                    d as isize,
                    p,
                    seq as isize,
                    1,
                    false,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    if !m[i] {
                        row.fill(0.0);
                        continue;
                    }
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if m[j] {
                            max = max.max(row[j] * scale);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.fill(0.0);
                        continue;
                    }
                    let mut sum = 0.0;
                    for j in 0..seq {
                        if m[j] {
                            let e = (row[j] * scale - max).exp();
                            row[j] = e;
                            sum += e;
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    for val in row.iter_mut() {
                        *val /= sum;
                    }
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    p,
                    seq as isize,
                    1,
                    &vv[off..],
                    d as isize,
                    1,
                    &mut out[off..],
                    d as isize,
                    1,
                    false,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Builds a matrix whose row `i` is `sources[s][r]` for `index[i] =
    /// Some((s, r))`, or zeros for `None`. All sources share one width.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[RowRef]) -> Result<Var> {
        let width = match sources.first() {
            Some(&s) => self.matrix("gather_rows", s)?.1,
            None => return Err(Error::invalid("gather_rows needs at least one source")),
        };
        for &s in sources {
            let (_, w) = self.matrix("gather_rows", s)?;
            if w != width {
                return Err(Error::shape(
                    "gather_rows",
                    format!("source widths {width} and {w} differ"),
                ));
            }
        }
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "no rows requested"));
        }
        let mut out = vec![0.0; index.len() * width];
        for (i, r) in index.iter().enumerate() {
            if let Some((s, row)) = *r {
                let src = sources
                    .get(s)
                    .ok_or_else(|| Error::invalid(format!("gather source {s} out of range")))?;
                let rows = self.shape(*src)[0];
                if row >= rows {
                    return Err(Error::invalid(format!(
                        "gather row {row} out of range for {rows} rows"
                    )));
                }
                out[i * width..(i + 1) * width]
                    .copy_from_slice(&self.value(*src)[row * width..(row + 1) * width]);
            }
        }
        let rg = sources.iter().any(|&s| self.rg(s));
        Ok(self.push(
            vec![index.len(), width],
            out,
            Op::Gather {
                sources: sources.to_vec(),
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of the unmasked rows of each of `batch` blocks of `seq` rows.
    /// A block with no unmasked row pools to the zero vector.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool], batch: usize, seq: usize) -> Result<Var> {
        let (rows, d) = self.matrix("masked_mean_pool", x)?;
        if rows != batch * seq || mask.len() != rows {
            return Err(Error::shape(
                "masked_mean_pool",
                format!("{rows} rows, mask {} for batch {batch} × seq {seq}", mask.len()),
            ));
        }
        let mut weights = vec![0.0; rows];
        for b in 0..batch {
            let count = mask[b * seq..(b + 1) * seq].iter().filter(|&&m| m).count();
            if count > 0 {
                for r in b * seq..(b + 1) * seq {
                    if mask[r] {
                        weights[r] = 1.0 / count as f64;
                    }
                }
            }
        }
        let xs = self.value(x);
        let mut out = vec![0.0; batch * d];
        for r in 0..rows {
            if weights[r] != 0.0 {
                let b = r / seq;
                for j in 0..d {
                    out[b * d + j] += weights[r] * xs[r * d + j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch, d],
            out,
            Op::MaskedMeanPool { x, weights, seq },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.matrix("l2_normalize_rows", x)?;
        let xs = self.value(x);
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm > 0.0 {
                for j in 0..d {
                    out[r * d + j] = row[j] / norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, d], out, Op::L2Normalize { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy between every logit and its 0/1 label,
    /// evaluated in the log domain.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits for {} labels", z.len(), labels.len()),
            ));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("bce labels must be 0 or 1"));
        }
        let total: f64 = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / z.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::Bce {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over the rows of `logits`
    /// (`[n×V]`) whose `keep` flag is set. With no kept row the loss is 0 and
    /// contributes no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
        let (n, vocab) = self.matrix("cross_entropy", logits)?;
        if targets.len() != n || keep.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows, {} targets, {} keep flags", targets.len(), keep.len()),
            ));
        }
        let mut rows = Vec::new();
        let mut kept_targets = Vec::new();
        for r in 0..n {
            if keep[r] {
                if targets[r] >= vocab {
                    return Err(Error::invalid(format!(
                        "target {} out of range for {vocab} classes",
                        targets[r]
                    )));
                }
                rows.push(r);
                kept_targets.push(targets[r]);
            }
        }
        let zs = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(&kept_targets) {
            let row = &zs[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[t];
            probs.extend(row.iter().map(|z| (z - log_z).exp()));
        }
        let loss = if rows.is_empty() {
            0.0
        } else {
            total / rows.len() as f64
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                rows,
                targets: kept_targets,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:expr) => {
                if let Some($g) = grad_slot(nodes, grads, $v) {
                    $body;
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                with_grad!(*a, |ga| gemm_nt(m, n, k, gout, &nodes[b.0].value, ga, true));
                with_grad!(*b, |gb| gemm_tn(k, m, n, &nodes[a.0].value, gout, gb, true));
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                with_grad!(*a, |ga| gemm_nn(m, n, k, gout, &nodes[b.0].value, ga, true));
                with_grad!(*b, |gb| gemm_tn(n, m, k, gout, &nodes[a.0].value, gb, true));
            }
            Op::Add { a, b } => {
                with_grad!(*a, |ga| axpy(ga, gout, 1.0));
                with_grad!(*b, |gb| axpy(gb, gout, 1.0));
            }
            Op::AddRow { x, bias } => {
                with_grad!(*x, |gx| axpy(gx, gout, 1.0));
                with_grad!(*bias, |gb| {
                    let n = gb.len();
                    for row in gout.chunks_exact(n) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::Mul { a, b } => {
                with_grad!(*a, |ga| {
                    for ((g, &go), &bv) in ga.iter_mut().zip(gout).zip(&nodes[b.0].value) {
                        *g += go * bv;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((g, &go), &av) in gb.iter_mut().zip(gout).zip(&nodes[a.0].value) {
                        *g += go * av;
                    }
                });
            }
            Op::Scale { x, factor } => {
                with_grad!(*x, |gx| axpy(gx, gout, *factor));
            }
            Op::Relu(x) => {
                with_grad!(*x, |gx| {
                    for ((g, &go), &xv) in gx.iter_mut().zip(gout).zip(&nodes[x.0].value) {
                        if xv > 0.0 {
                            *g += go;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                with_grad!(*x, |gx| {
                    for ((g, &go), &v) in gx.iter_mut().zip(gout).zip(&nodes[x.0].value) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *g += go * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            } => {
                let y = &node.value;
                with_grad!(*x, |gx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..*n)
                                .map(|j| y[base + j * inner] * gout[base + j * inner])
                                .sum();
                            for j in 0..*n {
                                let idx = base + j * inner;
                                gx[idx] += y[idx] * (gout[idx] - dot);
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
            } => {
                let d = nodes[gamma.0].value.len();
                let g = &nodes[gamma.0].value;
                with_grad!(*gamma, |gg| {
                    for (go, xh) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for go in gout.chunks_exact(d) {
                        axpy(gb, go, 1.0);
                    }
                });
                with_grad!(*x, |gx| {
                    let inv_d = 1.0 / d as f64;
                    for (r, rs) in rstd.iter().enumerate() {
                        let go = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = go[j] * g[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        for j in 0..d {
                            let dxh = go[j] * g[j];
                            gx[r * d + j] +=
                                rs * (dxh - inv_d * sum_dxh - inv_d * xh[j] * sum_dxh_xh);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(gout, grads, *q, *k, *v, *batch, *seq, *heads, probs),
            Op::Gather { sources, index } => {
                let width = node.shape[1];
                for (s, &src) in sources.iter().enumerate() {
                    with_grad!(src, |gs| {
                        for (i, r) in index.iter().enumerate() {
                            if let Some((si, row)) = *r {
                                if si == s {
                                    axpy(
                                        &mut gs[row * width..(row + 1) * width],
                                        &gout[i * width..(i + 1) * width],
                                        1.0,
                                    );
                                }
                            }
                        }
                    });
                }
            }
            Op::MaskedMeanPool { x, weights, seq } => {
                let d = node.shape[1];
                with_grad!(*x, |gx| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            let b = r / seq;
                            axpy(&mut gx[r * d..(r + 1) * d], &gout[b * d..(b + 1) * d], w);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = node.shape[1];
                let y = &node.value;
                with_grad!(*x, |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm > 0.0 {
                            let yr = &y[r * d..(r + 1) * d];
                            let gr = &gout[r * d..(r + 1) * d];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                gx[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| gx.iter_mut().for_each(|g| *g += gout[0]));
            }
            Op::Mean(x) => {
                with_grad!(*x, |gx| {
                    let s = gout[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|g| *g += s);
                });
            }
            Op::Bce { logits, labels } => {
                let z = &nodes[logits.0].value;
                let s = gout[0] / z.len() as f64;
                with_grad!(*logits, |gz| {
                    for ((g, &zv), &y) in gz.iter_mut().zip(z).zip(labels) {
                        *g += s * (sigmoid(zv) - y);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                if !rows.is_empty() {
                    let vocab = nodes[logits.0].shape[1];
                    let s = gout[0] / rows.len() as f64;
                    with_grad!(*logits, |gz| {
                        for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                            let p = &probs[i * vocab..(i + 1) * vocab];
                            let gr = &mut gz[r * vocab..(r + 1) * vocab];
                            axpy(gr, p, s);
                            gr[t] -= s;
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
    ) {
        let d = self.nodes[q.0].shape[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let rows = batch * seq;
        let mut dq = vec![0.0; if self.rg(q) { rows * d } else { 0 }];
        let mut dk = vec![0.0; if self.rg(k) { rows * d } else { 0 }];
        let mut dv = vec![0.0; if self.rg(v) { rows * d } else { 0 }];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                if !dv.is_empty() {
                    // dV += Pᵀ · dO
                    gemm(
                        seq, seq, dh, p, 1, seq as isize, &gout[off..], d as isize, 1,
                        &mut dv[off..], d as isize, 1, true,
                    );
                }
                if dq.is_empty() && dk.is_empty() {
                    continue;
                }
                // dP = dO · Vᵀ
                gemm(
                    seq, dh, seq, &gout[off..], d as isize, 1, &vv[off..], 1, d as isize,
                    &mut dp, seq as isize, 1, false,
                );
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale.
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if !dq.is_empty() {
                    gemm(
                        seq, seq, dh, &dp, seq as isize, 1, &kv[off..], d as isize, 1,
                        &mut dq[off..], d as isize, 1, true,
                    );
                }
                if !dk.is_empty() {
                    gemm(
                        seq, seq, dh, &dp, 1, seq as isize, &qv[off..], d as isize, 1,
                        &mut dk[off..], d as isize, 1, true,
                    );
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if !g.is_empty() {
                let len = self.nodes[var.0].value.len();
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
                axpy(slot, &g, 1.0);
            }
        }
    }
}

fn grad_slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
