//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends one node holding its inputs and forward value;
//! [`Tape::backward`] walks the list in reverse, applying each primitive's
//! exact adjoint rule. Gradient accumulation order is fixed by node order, so
//! results are bit-identical across runs given identical inputs.

use rand::Rng;

use super::array::DiffArray;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded primitive: which rule to replay in backward, plus whatever
/// context that rule needs beyond the stored forward values.
#[derive(Debug, Clone)]
enum Step {
    Leaf,
    /// `a[m×k] · b[k×n]`.
    Matmul { a: NodeId, b: NodeId },
    /// `a[m×k] · b[n×k]ᵀ` — right operand used transposed.
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Broadcast-add of a width-n row vector to every row of `a[..×n]`.
    AddRow { a: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddConst { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    /// Saved per-row statistics let backward rebuild the normalized values.
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        shift: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// The bias is a constant (mask), so only the logits receive gradient.
    SoftmaxBias { a: NodeId },
    CrossEntropy { probs: NodeId, targets: Vec<usize> },
    Sum { a: NodeId },
    GatherRows { table: NodeId, indices: Vec<usize> },
    ConcatCols { a: NodeId, b: NodeId },
    /// Mask entries are 0 or 1/(1−rate) (inverted-dropout convention).
    Dropout { a: NodeId, mask: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    step: Step,
    value: DiffArray,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
///
/// Nodes the loss does not depend on have no entry; [`Gradients::get`]
/// returns `None` for them (their gradient is zero).
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DiffArray>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DiffArray> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out, leaving `None` behind.
    pub fn take(&mut self, id: NodeId) -> Option<DiffArray> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// The gradient for `id`, or zeros of the given shape when the loss does
    /// not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> DiffArray {
        match self.get(id) {
            Some(g) => g.clone(),
            None => DiffArray::zeros(shape.to_vec()),
        }
    }
}

/// Records a forward computation and differentiates it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ce_clamp_warnings: u64,
}

/// Largest f64 strictly below 1; used to keep sigmoid/tanh outputs inside
/// their open ranges even when the exact value would round to ±1.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// A row whose max biased logit falls below this is fully masked.
const MASKED_ROW_CEILING: f64 = -1e8;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many times `cross_entropy` met a target probability of (near) zero
    /// and clamped it instead of producing −∞.
    pub fn ce_clamp_warnings(&self) -> u64 {
        self.ce_clamp_warnings
    }

    /// Registers an input or parameter value.
    pub fn leaf(&mut self, value: DiffArray) -> NodeId {
        self.push_node(Step::Leaf, value)
    }

    /// The forward value stored at `id`.
    pub fn value(&self, id: NodeId) -> &DiffArray {
        &self.nodes[id.0].value
    }

    fn push_node(&mut self, step: Step, value: DiffArray) -> NodeId {
        self.nodes.push(Node { step, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: &str, step: Step, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        let value =
            DiffArray::new(shape, values).map_err(|e| Error::Numerical(format!("{op}: {e}")))?;
        Ok(self.push_node(step, value))
    }

    fn dims2(&self, op: &str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("{op}: expected rank-2 array, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions differ ({m}x{ka} vs {kb}x{n})"
            )));
        }
        let out = mm_nn(self.value(a).values(), self.value(b).values(), m, ka, n);
        self.push_checked("matmul", Step::Matmul { a, b }, vec![m, n], out)
    }

    /// `a[m×k] · b[n×k]ᵀ -> [m×n]` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2("matmul_nt", a)?;
        let (n, kb) = self.dims2("matmul_nt", b)?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_nt: inner dimensions differ ({m}x{ka} vs {n}x{kb})"
            )));
        }
        let out = mm_nt(self.value(a).values(), self.value(b).values(), m, ka, n);
        self.push_checked("matmul_nt", Step::MatmulNt { a, b }, vec![m, n], out)
    }

    /// Elementwise sum of two same-shape arrays.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: shapes differ ({:?} vs {:?})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("add", Step::Add { a, b }, shape, out)
    }

    /// Adds a width-n row vector to every row of `a[..×n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, cols) = self.value(a).rows_cols();
        let rs = self.value(row).shape();
        if rs.len() != 1 || rs[0] != cols {
            return Err(Error::Shape(format!(
                "add_row: row shape {rs:?} does not match width {cols}"
            )));
        }
        let rowv = self.value(row).values().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rowv[i % cols])
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("add_row", Step::AddRow { a, row }, shape, out)
    }

    /// Elementwise product of two same-shape arrays.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul: shapes differ ({:?} vs {:?})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("mul", Step::Mul { a, b }, shape, out)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::Numerical(format!("scale: non-finite factor {factor}")));
        }
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("scale", Step::Scale { a, factor }, shape, out)
    }

    /// Adds a constant to every element.
    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::Numerical(format!("add_const: non-finite constant {c}")));
        }
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("add_const", Step::AddConst { a }, shape, out)
    }

    /// Elementwise logistic function; outputs stay strictly inside (0,1)
    /// even where the exact value would round to 0 or 1.
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .map(|x| (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, ONE_BELOW))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("sigmoid", Step::Sigmoid { a }, shape, out)
    }

    /// Elementwise hyperbolic tangent; outputs stay strictly inside (−1,1).
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .map(|x| x.tanh().clamp(-ONE_BELOW, ONE_BELOW))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("tanh", Step::Tanh { a }, shape, out)
    }

    /// Elementwise max(x, 0).
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("relu", Step::Relu { a }, shape, out)
    }

    /// Normalizes each row of `a[..×h]` to zero mean and unit variance, then
    /// applies the learned elementwise affine `gain`/`shift` (both `[h]`).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let (rows, h) = self.value(a).rows_cols();
        for (name, id) in [("gain", gain), ("shift", shift)] {
            let s = self.value(id).shape();
            if s.len() != 1 || s[0] != h {
                return Err(Error::Shape(format!(
                    "layer_norm: {name} shape {s:?} does not match width {h}"
                )));
            }
        }
        let x = self.value(a).values();
        let g = self.value(gain).values();
        let b = self.value(shift).values();
        let mut out = vec![0.0; x.len()];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * h..(r + 1) * h];
            let mu = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = is;
            for j in 0..h {
                out[r * h + j] = (row[j] - mu) * is * g[j] + b[j];
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push_checked(
            "layer_norm",
            Step::LayerNorm { a, gain, shift, mean, inv_std },
            shape,
            out,
        )
    }

    /// Softmax over the last axis of `logits + bias`, where `bias` is a
    /// constant mask of 0 (allowed) and large-negative (disallowed) entries.
    ///
    /// `bias` must either match the logits shape or be a rank-2 mask repeated
    /// over leading batch axes. A row with every position disallowed is an
    /// "empty attention row" error — it is never silently renormalized.
    pub fn softmax_bias(&mut self, logits: NodeId, bias: &DiffArray) -> Result<NodeId> {
        let (rows, n) = self.value(logits).rows_cols();
        let (brows, bn) = bias.rows_cols();
        if bn != n || brows == 0 || rows % brows != 0 {
            return Err(Error::Shape(format!(
                "softmax_bias: bias shape {:?} incompatible with logits shape {:?}",
                bias.shape(),
                self.value(logits).shape()
            )));
        }
        let x = self.value(logits).values();
        let bv = bias.values();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let brow = &bv[(r % brows) * n..(r % brows + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(row[j] + brow[j]);
            }
            if mx < MASKED_ROW_CEILING {
                return Err(Error::Numerical(format!(
                    "empty attention row: every position of row {r} is masked"
                )));
            }
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] + brow[j] - mx).exp();
                out[r * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[r * n + j] /= sum;
            }
        }
        let shape = self.value(logits).shape().to_vec();
        self.push_checked("softmax_bias", Step::SoftmaxBias { a: logits }, shape, out)
    }

    /// Mean negative log-likelihood of `targets` under probability rows
    /// `probs[L×v]`. Target probabilities of (near) zero are clamped at 1e-12
    /// and counted in [`Tape::ce_clamp_warnings`] instead of yielding −∞.
    pub fn cross_entropy(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, v) = self.dims2("cross_entropy", probs)?;
        if rows == 0 || rows != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {} probability rows vs {} targets",
                rows,
                targets.len()
            )));
        }
        let p = self.value(probs).values();
        for r in 0..rows {
            if targets[r] >= v {
                return Err(Error::Shape(format!(
                    "cross_entropy: target {} out of range for {} classes",
                    targets[r], v
                )));
            }
            let sum: f64 = p[r * v..(r + 1) * v].iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numerical(format!(
                    "cross_entropy: probability row {r} sums to {sum}, not 1"
                )));
            }
        }
        let mut total = 0.0;
        let mut clamps = 0u64;
        for (r, &t) in targets.iter().enumerate() {
            let mut pt = p[r * v + t];
            if pt < 1e-12 {
                pt = 1e-12;
                clamps += 1;
            }
            total -= pt.ln();
        }
        self.ce_clamp_warnings += clamps;
        let loss = total / rows as f64;
        self.push_checked(
            "cross_entropy",
            Step::CrossEntropy { probs, targets: targets.to_vec() },
            vec![1],
            vec![loss],
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).values().iter().sum();
        self.push_checked("sum", Step::Sum { a }, vec![1], vec![s])
    }

    /// Selects rows of `table[R×h]` by index, producing `[indices.len()×h]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, h) = self.dims2("gather_rows", table)?;
        let t = self.value(table).values();
        let mut out = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            if i >= rows {
                return Err(Error::Shape(format!(
                    "gather_rows: index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&t[i * h..(i + 1) * h]);
        }
        self.push_checked(
            "gather_rows",
            Step::GatherRows { table, indices: indices.to_vec() },
            vec![indices.len(), h],
            out,
        )
    }

    /// Concatenates two matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims2("concat_cols", a)?;
        let (rb, cb) = self.dims2("concat_cols", b)?;
        if ra != rb {
            return Err(Error::Shape(format!(
                "concat_cols: row counts differ ({ra} vs {rb})"
            )));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        self.push_checked(
            "concat_cols",
            Step::ConcatCols { a, b },
            vec![ra, ca + cb],
            out,
        )
    }

    /// Inverted dropout: keeps each element with probability 1−rate, scaled
    /// by 1/(1−rate), so inference needs no rescaling. `rate = 0` is the
    /// identity and records nothing.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout: rate must be in [0,1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("dropout", Step::Dropout { a, mask }, shape, out)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per reachable
    /// node; unreachable nodes (loss does not depend on them) have none.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Shape("backward: loss node not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.step_backward(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (idx, slot) in grads.into_iter().enumerate() {
            match slot {
                None => out.push(None),
                Some(values) => {
                    let shape = self.nodes[idx].value.shape().to_vec();
                    let arr = DiffArray::new(shape, values)
                        .map_err(|e| Error::Numerical(format!("backward: {e}")))?;
                    out.push(Some(arr));
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Applies the adjoint rule of node `idx`, accumulating into its inputs.
    fn step_backward(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.step {
            Step::Leaf => {}
            Step::Matmul { a, b } => {
                let s = self.value(*a).shape();
                let (m, k) = (s[0], s[1]);
                let n = self.value(*b).shape()[1];
                let da = mm_nt(g, self.value(*b).values(), m, n, k);
                let db = mm_tn(self.value(*a).values(), g, m, k, n);
                axpy_into(acc(grads, *a, m * k), &da);
                axpy_into(acc(grads, *b, k * n), &db);
            }
            Step::MatmulNt { a, b } => {
                let s = self.value(*a).shape();
                let (m, k) = (s[0], s[1]);
                let n = self.value(*b).shape()[0];
                let da = mm_nn(g, self.value(*b).values(), m, n, k);
                let db = mm_tn(g, self.value(*a).values(), m, n, k);
                axpy_into(acc(grads, *a, m * k), &da);
                axpy_into(acc(grads, *b, n * k), &db);
            }
            Step::Add { a, b } => {
                axpy_into(acc(grads, *a, g.len()), g);
                axpy_into(acc(grads, *b, g.len()), g);
            }
            Step::AddRow { a, row } => {
                axpy_into(acc(grads, *a, g.len()), g);
                let cols = self.value(*row).len();
                let dr = acc(grads, *row, cols);
                for (i, gv) in g.iter().enumerate() {
                    dr[i % cols] += gv;
                }
            }
            Step::Mul { a, b } => {
                let av = self.value(*a).values().to_vec();
                let bv = self.value(*b).values().to_vec();
                let da = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
                let db = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
            Step::Scale { a, factor } => {
                let factor = *factor;
                let da = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * factor;
                }
            }
            Step::AddConst { a } => {
                axpy_into(acc(grads, *a, g.len()), g);
            }
            Step::Sigmoid { a } => {
                let s = node.value.values();
                let da = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * s[i] * (1.0 - s[i]);
                }
            }
            Step::Tanh { a } => {
                let t = node.value.values();
                let da = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * (1.0 - t[i] * t[i]);
                }
            }
            Step::Relu { a } => {
                let x = self.value(*a).values();
                let mut da_buf = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        da_buf[i] = g[i];
                    }
                }
                axpy_into(acc(grads, *a, g.len()), &da_buf);
            }
            Step::LayerNorm { a, gain, shift, mean, inv_std } => {
                let (rows, h) = self.value(*a).rows_cols();
                let x = self.value(*a).values();
                let gv = self.value(*gain).values();
                let mut da_buf = vec![0.0; rows * h];
                let mut dgain_buf = vec![0.0; h];
                let mut dshift_buf = vec![0.0; h];
                for r in 0..rows {
                    let grow = &g[r * h..(r + 1) * h];
                    let xrow = &x[r * h..(r + 1) * h];
                    let is = inv_std[r];
                    let mu = mean[r];
                    // Recover normalized values, then the standard layer-norm
                    // adjoint: dx = is·(dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat)).
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..h {
                        let xh = (xrow[j] - mu) * is;
                        let dxh = grow[j] * gv[j];
                        dgain_buf[j] += grow[j] * xh;
                        dshift_buf[j] += grow[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh /= h as f64;
                    mean_dxh_xh /= h as f64;
                    for j in 0..h {
                        let xh = (xrow[j] - mu) * is;
                        let dxh = grow[j] * gv[j];
                        da_buf[r * h + j] = is * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                axpy_into(acc(grads, *a, rows * h), &da_buf);
                axpy_into(acc(grads, *gain, h), &dgain_buf);
                axpy_into(acc(grads, *shift, h), &dshift_buf);
            }
            Step::SoftmaxBias { a } => {
                let p = node.value.values();
                let (rows, n) = node.value.rows_cols();
                let mut da_buf = vec![0.0; rows * n];
                for r in 0..rows {
                    let prow = &p[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let dot: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                    for j in 0..n {
                        da_buf[r * n + j] = prow[j] * (grow[j] - dot);
                    }
                }
                axpy_into(acc(grads, *a, rows * n), &da_buf);
            }
            Step::CrossEntropy { probs, targets } => {
                let (rows, v) = self.value(*probs).rows_cols();
                let p = self.value(*probs).values().to_vec();
                let gscalar = g[0];
                let dp = acc(grads, *probs, rows * v);
                for (r, &t) in targets.iter().enumerate() {
                    let pt = p[r * v + t].max(1e-12);
                    dp[r * v + t] -= gscalar / (rows as f64 * pt);
                }
            }
            Step::Sum { a } => {
                let len = self.value(*a).len();
                let da = acc(grads, *a, len);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
            Step::GatherRows { table, indices } => {
                let (_, h) = self.value(*table).rows_cols();
                let len = self.value(*table).len();
                let dt = acc(grads, *table, len);
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..h {
                        dt[i * h + j] += g[r * h + j];
                    }
                }
            }
            Step::ConcatCols { a, b } => {
                let (ra, ca) = self.value(*a).rows_cols();
                let (_, cb) = self.value(*b).rows_cols();
                let mut da_buf = vec![0.0; ra * ca];
                let mut db_buf = vec![0.0; ra * cb];
                for r in 0..ra {
                    let grow = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                    da_buf[r * ca..(r + 1) * ca].copy_from_slice(&grow[..ca]);
                    db_buf[r * cb..(r + 1) * cb].copy_from_slice(&grow[ca..]);
                }
                axpy_into(acc(grads, *a, ra * ca), &da_buf);
                axpy_into(acc(grads, *b, ra * cb), &db_buf);
            }
            Step::Dropout { a, mask } => {
                let da = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * mask[i];
                }
            }
        }
        Ok(())
    }
}

/// The gradient buffer for `id`, created zero-filled on first touch.
fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `a[m×k] · b[k×n]`, accumulating along rows of `b` for cache locality.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ` — row-by-row dot products.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for l in 0..k {
                s += arow[l] * brow[l];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a[p×m]ᵀ · b[p×n]`, accumulating outer products row by row.
fn mm_tn(a: &[f64], b: &[f64], p: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for l in 0..p {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av != 0.0 {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences: the oracle for every gradient assertion
    /// here. Rebuilds the forward pass from scratch for each perturbation, so
    /// it shares no code with `backward`.
    fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    /// Relative error with an absolute floor so near-zero gradients compare
    /// at finite-difference noise level rather than blowing up.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
        for i in 0..analytic.len() {
            let e = rel_err(analytic[i], numeric[i]);
            assert!(
                e < tol,
                "{what}: grad[{i}] analytic {} vs numeric {} (rel err {e})",
                analytic[i],
                numeric[i]
            );
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(DiffArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = t.leaf(DiffArray::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let o = t.matmul(a, i).unwrap();
        assert_eq!(t.value(o).values(), &[1.0, 2.0, 3.0, 4.0]);

        let x = t.leaf(DiffArray::new(vec![1, 1], vec![2.0]).unwrap());
        let y = t.leaf(DiffArray::new(vec![1, 1], vec![3.0]).unwrap());
        let z = t.matmul(x, y).unwrap();
        assert_eq!(t.value(z).values(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut t = Tape::new();
        let a = t.leaf(DiffArray::zeros(vec![2, 3]));
        let b = t.leaf(DiffArray::zeros(vec![2, 3]));
        assert!(matches!(t.matmul(a, b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (3, 4, 2);
        let av = rand_vec(&mut rng, m * k);
        let bv = rand_vec(&mut rng, k * n);

        let loss = |a_vals: &[f64], b_vals: &[f64]| -> f64 {
            let mut t = Tape::new();
            let a = t.leaf(DiffArray::new(vec![m, k], a_vals.to_vec()).unwrap());
            let b = t.leaf(DiffArray::new(vec![k, n], b_vals.to_vec()).unwrap());
            let o = t.matmul(a, b).unwrap();
            let s = t.sum(o).unwrap();
            t.value(s).item().unwrap()
        };

        let mut t = Tape::new();
        let a = t.leaf(DiffArray::new(vec![m, k], av.clone()).unwrap());
        let b = t.leaf(DiffArray::new(vec![k, n], bv.clone()).unwrap());
        let o = t.matmul(a, b).unwrap();
        let s = t.sum(o).unwrap();
        let g = t.backward(s).unwrap();

        let na = numeric_grad(|x| loss(x, &bv), &av, 1e-5);
        let nb = numeric_grad(|x| loss(&av, x), &bv, 1e-5);
        assert_close(g.get(a).unwrap().values(), &na, 1e-6, "matmul dA");
        assert_close(g.get(b).unwrap().values(), &nb, 1e-6, "matmul dB");
    }

    #[test]
    fn matmul_nt_equals_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (4, 3, 5);
        let av = rand_vec(&mut rng, m * k);
        let bv = rand_vec(&mut rng, n * k);
        // Oracle: materialize bᵀ and use the plain matmul path.
        let mut bt = vec![0.0; k * n];
        for r in 0..n {
            for c in 0..k {
                bt[c * n + r] = bv[r * k + c];
            }
        }
        let mut t = Tape::new();
        let a = t.leaf(DiffArray::new(vec![m, k], av.clone()).unwrap());
        let b = t.leaf(DiffArray::new(vec![n, k], bv.clone()).unwrap());
        let btn = t.leaf(DiffArray::new(vec![k, n], bt).unwrap());
        let o1 = t.matmul_nt(a, b).unwrap();
        let o2 = t.matmul(a, btn).unwrap();
        assert_eq!(t.value(o1).values(), t.value(o2).values());
    }

    #[test]
    fn softmax_bias_basic_cases() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let zero_bias = DiffArray::zeros(vec![1, 2]);
        let o = t.softmax_bias(x, &zero_bias).unwrap();
        assert_eq!(t.value(o).values(), &[0.5, 0.5]);

        let masked = DiffArray::new(vec![1, 2], vec![0.0, -1e9]).unwrap();
        let o2 = t.softmax_bias(x, &masked).unwrap();
        let v = t.value(o2).values();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1] < 1e-30, "masked weight should vanish, got {}", v[1]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals = rand_vec(&mut rng, 15);
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::new(vec![3, 5], vals).unwrap());
        let bias = DiffArray::zeros(vec![3, 5]);
        let o = t.softmax_bias(x, &bias).unwrap();
        for r in 0..3 {
            let s: f64 = t.value(o).values()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn softmax_empty_row_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::zeros(vec![2, 3]));
        let bias = DiffArray::new(
            vec![2, 3],
            vec![0.0, 0.0, 0.0, -1e9, -1e9, -1e9],
        )
        .unwrap();
        let err = t.softmax_bias(x, &bias).unwrap_err();
        assert!(err.to_string().contains("empty attention row"), "{err}");
    }

    #[test]
    fn softmax_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = rand_vec(&mut rng, 6);
        let bias_v = vec![0.0, -1e9, 0.0, 0.0, -1e9, 0.0];
        let perm = [3usize, 0, 5, 1, 4, 2];

        let run = |lv: &[f64], bv: &[f64]| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.leaf(DiffArray::new(vec![1, 6], lv.to_vec()).unwrap());
            let b = DiffArray::new(vec![1, 6], bv.to_vec()).unwrap();
            let o = t.softmax_bias(x, &b).unwrap();
            t.value(o).values().to_vec()
        };

        let base = run(&logits, &bias_v);
        let lp: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
        let bp: Vec<f64> = perm.iter().map(|&i| bias_v[i]).collect();
        let permuted = run(&lp, &bp);
        for (j, &src) in perm.iter().enumerate() {
            assert_eq!(permuted[j], base[src], "position {j}");
        }
    }

    #[test]
    fn sigmoid_values_and_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::new(vec![3], vec![0.0, 100.0, -1000.0]).unwrap());
        let s = t.sigmoid(x).unwrap();
        let v = t.value(s).values();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 1.0 - 1e-12 && v[1] < 1.0, "saturated high: {}", v[1]);
        assert!(v[2] > 0.0, "saturated low must stay positive: {}", v[2]);

        // Derivative at 0 is exactly 0.25.
        let mut t2 = Tape::new();
        let x0 = t2.leaf(DiffArray::new(vec![1], vec![0.0]).unwrap());
        let s0 = t2.sigmoid(x0).unwrap();
        let l = t2.sum(s0).unwrap();
        let g = t2.backward(l).unwrap();
        assert_eq!(g.get(x0).unwrap().values(), &[0.25]);
    }

    #[test]
    fn layer_norm_degenerate_cases() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::new(vec![1, 4], vec![3.0; 4]).unwrap());
        let gain = t.leaf(DiffArray::new(vec![4], vec![1.0; 4]).unwrap());
        let shift = t.leaf(DiffArray::zeros(vec![4]));
        let o = t.layer_norm(x, gain, shift, 1e-5).unwrap();
        for v in t.value(o).values() {
            assert!(v.abs() < 1e-9, "constant row should normalize to 0, got {v}");
        }

        let zero_gain = t.leaf(DiffArray::zeros(vec![4]));
        let sh = t.leaf(DiffArray::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let x2 = t.leaf(DiffArray::new(vec![2, 4], (0..8).map(|i| i as f64).collect()).unwrap());
        let o2 = t.layer_norm(x2, zero_gain, sh, 1e-5).unwrap();
        assert_eq!(
            t.value(o2).values(),
            &[0.5, -1.0, 2.0, 0.0, 0.5, -1.0, 2.0, 0.0]
        );
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (rows, h) = (2, 8);
        let xv = rand_vec(&mut rng, rows * h);
        let gv = rand_vec(&mut rng, h);
        let bv = rand_vec(&mut rng, h);

        let loss = |x: &[f64], g: &[f64], b: &[f64]| -> f64 {
            let mut t = Tape::new();
            let xn = t.leaf(DiffArray::new(vec![rows, h], x.to_vec()).unwrap());
            let gn = t.leaf(DiffArray::new(vec![h], g.to_vec()).unwrap());
            let bn = t.leaf(DiffArray::new(vec![h], b.to_vec()).unwrap());
            let o = t.layer_norm(xn, gn, bn, 1e-5).unwrap();
            // Square the outputs so every position contributes asymmetrically.
            let sq = t.mul(o, o).unwrap();
            let s = t.sum(sq).unwrap();
            t.value(s).item().unwrap()
        };

        let mut t = Tape::new();
        let xn = t.leaf(DiffArray::new(vec![rows, h], xv.clone()).unwrap());
        let gn = t.leaf(DiffArray::new(vec![h], gv.clone()).unwrap());
        let bn = t.leaf(DiffArray::new(vec![h], bv.clone()).unwrap());
        let o = t.layer_norm(xn, gn, bn, 1e-5).unwrap();
        let sq = t.mul(o, o).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();

        assert_close(
            g.get(xn).unwrap().values(),
            &numeric_grad(|x| loss(x, &gv, &bv), &xv, 1e-5),
            1e-5,
            "layer_norm dx",
        );
        assert_close(
            g.get(gn).unwrap().values(),
            &numeric_grad(|x| loss(&xv, x, &bv), &gv, 1e-5),
            1e-5,
            "layer_norm dgain",
        );
        assert_close(
            g.get(bn).unwrap().values(),
            &numeric_grad(|x| loss(&xv, &gv, x), &bv, 1e-5),
            1e-5,
            "layer_norm dshift",
        );
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        // Perfect prediction: zero loss.
        let mut t = Tape::new();
        let p = t.leaf(DiffArray::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let l = t.cross_entropy(p, &[0, 1]).unwrap();
        assert!(t.value(l).item().unwrap().abs() < 1e-12);

        // Uniform over 28 classes: ln 28.
        let mut t2 = Tape::new();
        let row = vec![1.0 / 28.0; 28];
        let p2 = t2.leaf(DiffArray::new(vec![1, 28], row).unwrap());
        let l2 = t2.cross_entropy(p2, &[17]).unwrap();
        let v = t2.value(l2).item().unwrap();
        assert!((v - 28f64.ln()).abs() < 1e-12);
        assert!((v - 3.3322).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_clamps_zero_target_and_counts_it() {
        let mut t = Tape::new();
        let p = t.leaf(DiffArray::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let l = t.cross_entropy(p, &[0]).unwrap();
        assert_eq!(t.ce_clamp_warnings(), 1);
        let v = t.value(l).item().unwrap();
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-9, "clamped loss {v}");
    }

    #[test]
    fn cross_entropy_rejects_unnormalized_rows() {
        let mut t = Tape::new();
        let p = t.leaf(DiffArray::new(vec![1, 2], vec![0.6, 0.6]).unwrap());
        assert!(matches!(
            t.cross_entropy(p, &[0]),
            Err(crate::Error::Numerical(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_neg_inverse_prob() {
        // Independent hand formula: d/dp_[r,t] mean(−ln p_[r,t]) = −1/(L·p).
        let mut t = Tape::new();
        let vals = vec![0.2, 0.3, 0.5, 0.25, 0.25, 0.5];
        let p = t.leaf(DiffArray::new(vec![2, 3], vals.clone()).unwrap());
        let l = t.cross_entropy(p, &[2, 0]).unwrap();
        let g = t.backward(l).unwrap();
        let gp = g.get(p).unwrap().values();
        let expect = [
            0.0,
            0.0,
            -1.0 / (2.0 * 0.5),
            -1.0 / (2.0 * 0.25),
            0.0,
            0.0,
        ];
        for (a, e) in gp.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn softmax_then_cross_entropy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (rows, v) = (3, 7);
        let lv = rand_vec(&mut rng, rows * v);
        let targets = [2usize, 0, 6];

        let loss = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let xn = t.leaf(DiffArray::new(vec![rows, v], x.to_vec()).unwrap());
            let bias = DiffArray::zeros(vec![rows, v]);
            let p = t.softmax_bias(xn, &bias).unwrap();
            let l = t.cross_entropy(p, &targets).unwrap();
            t.value(l).item().unwrap()
        };

        let mut t = Tape::new();
        let xn = t.leaf(DiffArray::new(vec![rows, v], lv.clone()).unwrap());
        let bias = DiffArray::zeros(vec![rows, v]);
        let p = t.softmax_bias(xn, &bias).unwrap();
        let l = t.cross_entropy(p, &targets).unwrap();
        let g = t.backward(l).unwrap();

        assert_close(
            g.get(xn).unwrap().values(),
            &numeric_grad(loss, &lv, 1e-5),
            1e-5,
            "softmax+ce dlogits",
        );
    }

    #[test]
    fn backward_sum_is_all_ones_and_unreachable_is_none() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let unused = t.leaf(DiffArray::zeros(vec![3]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused, &[3]).values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::zeros(vec![2, 2]));
        assert!(matches!(t.backward(x), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn dropout_mask_is_zero_or_scaled_and_grad_matches_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::new(vec![20], vec![1.0; 20]).unwrap());
        let d = t.dropout(x, 0.5, &mut rng).unwrap();
        let keep = 2.0;
        for v in t.value(d).values() {
            assert!(*v == 0.0 || *v == keep, "unexpected dropout value {v}");
        }
        let s = t.sum(d).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().values(), t.value(d).values());

        // Rate 0 records nothing and returns the same node.
        let mut t2 = Tape::new();
        let x2 = t2.leaf(DiffArray::new(vec![4], vec![1.0; 4]).unwrap());
        let d2 = t2.dropout(x2, 0.0, &mut rng).unwrap();
        assert_eq!(x2, d2);
    }

    #[test]
    fn dropout_is_deterministic_given_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut t = Tape::new();
            let x = t.leaf(DiffArray::new(vec![50], vec![1.0; 50]).unwrap());
            let d = t.dropout(x, 0.1, &mut rng).unwrap();
            t.value(d).values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_concat_addrow_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let table = rand_vec(&mut rng, 5 * 3);
        let other = rand_vec(&mut rng, 4 * 2);
        let row = rand_vec(&mut rng, 5);
        let idx = [4usize, 0, 0, 2];

        let loss = |tv: &[f64], ov: &[f64], rv: &[f64]| -> f64 {
            let mut t = Tape::new();
            let tab = t.leaf(DiffArray::new(vec![5, 3], tv.to_vec()).unwrap());
            let oth = t.leaf(DiffArray::new(vec![4, 2], ov.to_vec()).unwrap());
            let rw = t.leaf(DiffArray::new(vec![5], rv.to_vec()).unwrap());
            let gat = t.gather_rows(tab, &idx).unwrap();
            let cat = t.concat_cols(gat, oth).unwrap();
            let ar = t.add_row(cat, rw).unwrap();
            let sq = t.mul(ar, ar).unwrap();
            let s = t.sum(sq).unwrap();
            t.value(s).item().unwrap()
        };

        let mut t = Tape::new();
        let tab = t.leaf(DiffArray::new(vec![5, 3], table.clone()).unwrap());
        let oth = t.leaf(DiffArray::new(vec![4, 2], other.clone()).unwrap());
        let rw = t.leaf(DiffArray::new(vec![5], row.clone()).unwrap());
        let gat = t.gather_rows(tab, &idx).unwrap();
        let cat = t.concat_cols(gat, oth).unwrap();
        let ar = t.add_row(cat, rw).unwrap();
        let sq = t.mul(ar, ar).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();

        assert_close(
            g.get(tab).unwrap().values(),
            &numeric_grad(|x| loss(x, &other, &row), &table, 1e-5),
            1e-6,
            "gather dtable",
        );
        assert_close(
            g.get(oth).unwrap().values(),
            &numeric_grad(|x| loss(&table, x, &row), &other, 1e-5),
            1e-6,
            "concat dother",
        );
        assert_close(
            g.get(rw).unwrap().values(),
            &numeric_grad(|x| loss(&table, &other, x), &row, 1e-5),
            1e-6,
            "add_row drow",
        );
    }

    /// One randomized finite-difference check per iteration, cycling through
    /// every differentiable primitive, with all axis sizes drawn in 1..=16.
    #[test]
    fn randomized_shapes_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for iter in 0..100 {
            let op = iter % 10;
            match op {
                0 => {
                    // matmul chain: a[m×k]·b[k×n]
                    let (m, k, n) = (
                        rng.gen_range(1..=16),
                        rng.gen_range(1..=16),
                        rng.gen_range(1..=16),
                    );
                    let av = rand_vec(&mut rng, m * k);
                    let bv = rand_vec(&mut rng, k * n);
                    let f = |x: &[f64]| {
                        let mut t = Tape::new();
                        let a = t.leaf(DiffArray::new(vec![m, k], x.to_vec()).unwrap());
                        let b = t.leaf(DiffArray::new(vec![k, n], bv.clone()).unwrap());
                        let o = t.matmul(a, b).unwrap();
                        let sq = t.mul(o, o).unwrap();
                        let s = t.sum(sq).unwrap();
                        t.value(s).item().unwrap()
                    };
                    let mut t = Tape::new();
                    let a = t.leaf(DiffArray::new(vec![m, k], av.clone()).unwrap());
                    let b = t.leaf(DiffArray::new(vec![k, n], bv.clone()).unwrap());
                    let o = t.matmul(a, b).unwrap();
                    let sq = t.mul(o, o).unwrap();
                    let s = t.sum(sq).unwrap();
                    let g = t.backward(s).unwrap();
                    assert_close(
                        g.get(a).unwrap().values(),
                        &numeric_grad(f, &av, 1e-5),
                        1e-5,
                        &format!("iter {iter} matmul"),
                    );
                }
                1 => {
                    let (m, k, n) = (
                        rng.gen_range(1..=16),
                        rng.gen_range(1..=16),
                        rng.gen_range(1..=16),
                    );
                    let av = rand_vec(&mut rng, m * k);
                    let bv = rand_vec(&mut rng, n * k);
                    let f = |x: &[f64]| {
                        let mut t = Tape::new();
                        let a = t.leaf(DiffArray::new(vec![m, k], av.clone()).unwrap());
                        let b = t.leaf(DiffArray::new(vec![n, k], x.to_vec()).unwrap());
                        let o = t.matmul_nt(a, b).unwrap();
                        let sq = t.mul(o, o).unwrap();
                        let s = t.sum(sq).unwrap();
                        t.value(s).item().unwrap()
                    };
                    let mut t = Tape::new();
                    let a = t.leaf(DiffArray::new(vec![m, k], av.clone()).unwrap());
                    let b = t.leaf(DiffArray::new(vec![n, k], bv.clone()).unwrap());
                    let o = t.matmul_nt(a, b).unwrap();
                    let sq = t.mul(o, o).unwrap();
                    let s = t.sum(sq).unwrap();
                    let g = t.backward(s).unwrap();
                    assert_close(
                        g.get(b).unwrap().values(),
                        &numeric_grad(f, &bv, 1e-5),
                        1e-5,
                        &format!("iter {iter} matmul_nt"),
                    );
                }
                2 | 3 => {
                    // add / mul elementwise pair
                    let r = rng.gen_range(1..=16);
                    let c = rng.gen_range(1..=16);
                    let av = rand_vec(&mut rng, r * c);
                    let bv = rand_vec(&mut rng, r * c);
                    let use_mul = op == 3;
                    let f = |x: &[f64]| {
                        let mut t = Tape::new();
                        let a = t.leaf(DiffArray::new(vec![r, c], x.to_vec()).unwrap());
                        let b = t.leaf(DiffArray::new(vec![r, c], bv.clone()).unwrap());
                        let o = if use_mul { t.mul(a, b) } else { t.add(a, b) }.unwrap();
                        let sq = t.mul(o, o).unwrap();
                        let s = t.sum(sq).unwrap();
                        t.value(s).item().unwrap()
                    };
                    let mut t = Tape::new();
                    let a = t.leaf(DiffArray::new(vec![r, c], av.clone()).unwrap());
                    let b = t.leaf(DiffArray::new(vec![r, c], bv.clone()).unwrap());
                    let o = if use_mul { t.mul(a, b) } else { t.add(a, b) }.unwrap();
                    let sq = t.mul(o, o).unwrap();
                    let s = t.sum(sq).unwrap();
                    let g = t.backward(s).unwrap();
                    assert_close(
                        g.get(a).unwrap().values(),
                        &numeric_grad(f, &av, 1e-5),
                        1e-5,
                        &format!("iter {iter} add/mul"),
                    );
                }
                4 => {
                    // sigmoid
                    let n = rng.gen_range(1..=16);
                    let xv = rand_vec(&mut rng, n);
                    let f = |x: &[f64]| {
                        let mut t = Tape::new();
                        let a = t.leaf(DiffArray::new(vec![n], x.to_vec()).unwrap());
                        let o = t.sigmoid(a).unwrap();
                        let s = t.sum(o).unwrap();
                        t.value(s).item().unwrap()
                    };
                    let mut t = Tape::new();
                    let a = t.leaf(DiffArray::new(vec![n], xv.clone()).unwrap());
                    let o = t.sigmoid(a).unwrap();
                    let s = t.sum(o).unwrap();
                    let g = t.backward(s).unwrap();
                    assert_close(
                        g.get(a).unwrap().values(),
                        &numeric_grad(f, &xv, 1e-5),
                        1e-4,
                        &format!("iter {iter} sigmoid"),
                    );
                }
                5 => {
                    // tanh
                    let n = rng.gen_range(1..=16);
                    let xv = rand_vec(&mut rng, n);
                    let f = |x: &[f64]| {
                        let mut t = Tape::new();
                        let a = t.leaf(DiffArray::new(vec![n], x.to_vec()).unwrap());
                        let o = t.tanh(a).unwrap();
                        let s = t.sum(o).unwrap();
                        t.value(s).item().unwrap()
                    };
                    let mut t = Tape::new();
                    let a = t.leaf(DiffArray::new(vec![n], xv.clone()).unwrap());
                    let o = t.tanh(a).unwrap();
                    let s = t.sum(o).unwrap();
                    let g = t.backward(s).unwrap();
                    assert_close(
                        g.get(a).unwrap().values(),
                        &numeric_grad(f, &xv, 1e-5),
                        1e-4,
                        &format!("iter {iter} tanh"),
                    );
                }
                6 => {
                    // relu, inputs kept away from the kink at 0
                    let n = rng.gen_range(1..=16);
                    let xv: Vec<f64> = (0..n)
                        .map(|_| {
                            let mag = rng.gen_range(0.1..1.5);
                            if rng.gen::<bool>() {
                                mag
                            } else {
                                -mag
                            }
                        })
                        .collect();
                    let f = |x: &[f64]| {
                        let mut t = Tape::new();
                        let a = t.leaf(DiffArray::new(vec![n], x.to_vec()).unwrap());
                        let o = t.relu(a).unwrap();
                        let sq = t.mul(o, o).unwrap();
                        let s = t.sum(sq).unwrap();
                        t.value(s).item().unwrap()
                    };
                    let mut t = Tape::new();
                    let a = t.leaf(DiffArray::new(vec![n], xv.clone()).unwrap());
                    let o = t.relu(a).unwrap();
                    let sq = t.mul(o, o).unwrap();
                    let s = t.sum(sq).unwrap();
                    let g = t.backward(s).unwrap();
                    assert_close(
                        g.get(a).unwrap().values(),
                        &numeric_grad(f, &xv, 1e-5),
                        1e-4,
                        &format!("iter {iter} relu"),
                    );
                }
                7 => {
                    // layer_norm over random rows
                    let r = rng.gen_range(1..=8);
                    let h = rng.gen_range(2..=16);
                    let xv = rand_vec(&mut rng, r * h);
                    let gv = rand_vec(&mut rng, h);
                    let sv = rand_vec(&mut rng, h);
                    let f = |x: &[f64]| {
                        let mut t = Tape::new();
                        let a = t.leaf(DiffArray::new(vec![r, h], x.to_vec()).unwrap());
                        let gn = t.leaf(DiffArray::new(vec![h], gv.clone()).unwrap());
                        let sn = t.leaf(DiffArray::new(vec![h], sv.clone()).unwrap());
                        let o = t.layer_norm(a, gn, sn, 1e-5).unwrap();
                        let sq = t.mul(o, o).unwrap();
                        let s = t.sum(sq).unwrap();
                        t.value(s).item().unwrap()
                    };
                    let mut t = Tape::new();
                    let a = t.leaf(DiffArray::new(vec![r, h], xv.clone()).unwrap());
                    let gn = t.leaf(DiffArray::new(vec![h], gv.clone()).unwrap());
                    let sn = t.leaf(DiffArray::new(vec![h], sv.clone()).unwrap());
                    let o = t.layer_norm(a, gn, sn, 1e-5).unwrap();
                    let sq = t.mul(o, o).unwrap();
                    let s = t.sum(sq).unwrap();
                    let g = t.backward(s).unwrap();
                    assert_close(
                        g.get(a).unwrap().values(),
                        &numeric_grad(f, &xv, 1e-5),
                        1e-4,
                        &format!("iter {iter} layer_norm"),
                    );
                }
                8 => {
                    // softmax + cross-entropy composition
                    let r = rng.gen_range(1..=8);
                    let v = rng.gen_range(2..=16);
                    let xv = rand_vec(&mut rng, r * v);
                    let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..v)).collect();
                    let tg = targets.clone();
                    let f = move |x: &[f64]| {
                        let mut t = Tape::new();
                        let a = t.leaf(DiffArray::new(vec![r, v], x.to_vec()).unwrap());
                        let bias = DiffArray::zeros(vec![r, v]);
                        let p = t.softmax_bias(a, &bias).unwrap();
                        let l = t.cross_entropy(p, &tg).unwrap();
                        t.value(l).item().unwrap()
                    };
                    let mut t = Tape::new();
                    let a = t.leaf(DiffArray::new(vec![r, v], xv.clone()).unwrap());
                    let bias = DiffArray::zeros(vec![r, v]);
                    let p = t.softmax_bias(a, &bias).unwrap();
                    let l = t.cross_entropy(p, &targets).unwrap();
                    let g = t.backward(l).unwrap();
                    assert_close(
                        g.get(a).unwrap().values(),
                        &numeric_grad(f, &xv, 1e-5),
                        1e-4,
                        &format!("iter {iter} softmax+ce"),
                    );
                }
                _ => {
                    // scale + add_const + gather composition
                    let r = rng.gen_range(1..=16);
                    let h = rng.gen_range(1..=16);
                    let xv = rand_vec(&mut rng, r * h);
                    let idx: Vec<usize> = (0..rng.gen_range(1..=16))
                        .map(|_| rng.gen_range(0..r))
                        .collect();
                    let factor = rng.gen_range(-2.0..2.0);
                    let ic = idx.clone();
                    let f = move |x: &[f64]| {
                        let mut t = Tape::new();
                        let a = t.leaf(DiffArray::new(vec![r, h], x.to_vec()).unwrap());
                        let ga = t.gather_rows(a, &ic).unwrap();
                        let sc = t.scale(ga, factor).unwrap();
                        let ac = t.add_const(sc, 0.7).unwrap();
                        let sq = t.mul(ac, ac).unwrap();
                        let s = t.sum(sq).unwrap();
                        t.value(s).item().unwrap()
                    };
                    let mut t = Tape::new();
                    let a = t.leaf(DiffArray::new(vec![r, h], xv.clone()).unwrap());
                    let ga = t.gather_rows(a, &idx).unwrap();
                    let sc = t.scale(ga, factor).unwrap();
                    let ac = t.add_const(sc, 0.7).unwrap();
                    let sq = t.mul(ac, ac).unwrap();
                    let s = t.sum(sq).unwrap();
                    let g = t.backward(s).unwrap();
                    assert_close(
                        g.get(a).unwrap().values(),
                        &numeric_grad(f, &xv, 1e-5),
                        1e-5,
                        &format!("iter {iter} scale/gather"),
                    );
                }
            }
        }
    }

    #[test]
    fn forward_and_backward_are_bit_identical_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let xv = rand_vec(&mut rng, 12);
            let mut t = Tape::new();
            let x = t.leaf(DiffArray::new(vec![3, 4], xv).unwrap());
            let w = t.leaf(DiffArray::new(vec![4, 4], rand_vec(&mut rng, 16)).unwrap());
            let h = t.matmul(x, w).unwrap();
            let a = t.sigmoid(h).unwrap();
            let d = t.dropout(a, 0.2, &mut rng).unwrap();
            let s = t.sum(d).unwrap();
            let g = t.backward(s).unwrap();
            (
                t.value(s).values().to_vec(),
                g.get(x).unwrap().values().to_vec(),
                g.get(w).unwrap().values().to_vec(),
            )
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        assert_eq!(v1, v2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
