//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! All values live on a [`Tape`]: an arena of [`Tensor`] nodes plus an ordered
//! record of the operations that produced them. Running an op appends a node
//! (and, when gradients can flow, a record); [`Tape::backward`] replays the
//! records in reverse and accumulates gradients.
//!
//! Model parameters are *persistent* nodes created before [`Tape::seal`];
//! everything produced afterwards is ephemeral and dropped by
//! [`Tape::reset`], which keeps parameter gradients intact so micro-batches
//! can accumulate across resets.
//!
//! Storage is f32; reductions (softmax denominators, norms, loss sums)
//! accumulate in f64.

pub mod kernels;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Dense row-major tensor node.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Byproduct of the relaxed transport op: enough to reconstruct the plan.
#[derive(Debug, Clone)]
pub struct RelaxedOtWitness {
    /// `assignment[i]` = target index receiving all of source mass i.
    pub assignment: Vec<usize>,
    pub source_mass: Vec<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone)]
enum Op {
    MatMul { a: usize, b: usize },
    /// a[m,k] * b[n,k]^T
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// x[m,n] + row-broadcast bias[n]
    AddBias { x: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f32 },
    Relu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, rstd: Vec<f64> },
    MaskedSoftmax { x: usize, mask: Vec<bool> },
    /// mask holds 0.0 or 1/(1-p) per element.
    Dropout { x: usize, mask: Vec<f32> },
    Embedding { table: usize, ids: Vec<u32> },
    ConcatRows { a: usize, b: usize },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    Sum { x: usize },
    CeLabelSmooth { logits: usize, targets: Vec<u32>, pad_id: u32, smoothing: f32 },
    KlConsistency { syn: usize, aut: usize, mask: Vec<bool> },
    RelaxedOt { source: usize, target: usize, assignment: Vec<usize>, mass: Vec<f64>, norm: f64, costs: Vec<f64>, distance: f64 },
}

struct Record {
    op: Op,
    out: usize,
}

/// Arena of tensor nodes plus the operation records for backward.
pub struct Tape {
    nodes: Vec<Tensor>,
    records: Vec<Record>,
    persistent: usize,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), records: Vec::new(), persistent: 0, backward_done: false }
    }

    // ── Node management ─────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        self.nodes.push(Tensor { shape, data, grad: None, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.leaf(vec![value], vec![1], false).expect("scalar leaf")
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Tensor { shape, data, grad: None, requires_grad });
        let out = self.nodes.len() - 1;
        if requires_grad {
            self.records.push(Record { op, out });
        }
        Var(out)
    }

    /// Mark every node created so far as persistent (survives [`Self::reset`]).
    pub fn seal(&mut self) {
        assert!(self.records.is_empty(), "seal with pending records");
        self.persistent = self.nodes.len();
    }

    /// Drop all ephemeral nodes and records. Persistent gradients survive.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.persistent);
        self.records.clear();
        self.backward_done = false;
    }

    /// Clear gradients of persistent nodes.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes[..self.persistent] {
            node.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn data_mut(&mut self, v: Var) -> &mut [f32] {
        &mut self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a scalar node.
    pub fn value(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].numel(), 1);
        self.nodes[v.0].data[0]
    }

    fn rows_cols(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Shape(format!("expected matrix, got shape {s:?}"))),
        }
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rows_cols(a)?;
        let (kb, n) = self.rows_cols(b)?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims {ka} vs {kb} (shapes {:?} x {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.data(a), self.data(b), m, ka, n, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a: a.0, b: b.0 }, rg))
    }

    /// a[m,k] * b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rows_cols(a)?;
        let (n, kb) = self.rows_cols(b)?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_nt inner dims {ka} vs {kb} (shapes {:?} x {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.data(a), self.data(b), m, ka, n, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, vec![m, n], Op::MatMulNT { a: a.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, shape, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Fold a non-empty list of same-shape vars into their sum.
    pub fn add_list(&mut self, vars: &[Var]) -> Result<Var> {
        let mut it = vars.iter();
        let first = *it
            .next()
            .ok_or_else(|| Error::Shape("add_list of empty list".into()))?;
        it.try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(x)?;
        let (bm, bn) = self.rows_cols(b)?;
        if bm != 1 || bn != n {
            return Err(Error::Shape(format!(
                "add_bias bias shape {:?} against {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let mut out = self.data(x).to_vec();
        let bias = self.data(b);
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let _ = m;
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(b);
        Ok(self.push(out, shape, Op::AddBias { x: x.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, shape, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out: Vec<f32> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(out, shape, Op::Scale { x: x.0, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(out, shape, Op::Relu { x: x.0 }, rg)
    }

    /// Normalize the last dimension of each row, then apply the affine pair.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (rows, d) = self.rows_cols(x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} against width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let mut out = vec![0.0f32; rows * d];
        let mut means = vec![0.0f64; rows];
        let mut rstds = vec![0.0f64; rows];
        {
            let xd = self.data(x);
            let g = self.data(gamma);
            let b = self.data(beta);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
                let var = row
                    .iter()
                    .map(|&v| {
                        let c = f64::from(v) - mean;
                        c * c
                    })
                    .sum::<f64>()
                    / d as f64;
                let rstd = 1.0 / (var + f64::from(eps)).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                for i in 0..d {
                    let xhat = (f64::from(row[i]) - mean) * rstd;
                    out[r * d + i] = (xhat * f64::from(g[i]) + f64::from(b[i])) as f32;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg =
            self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean: means, rstd: rstds },
            rg,
        ))
    }

    /// Row-wise softmax over the last dimension with masked entries forced to
    /// exactly zero. Stabilized by max-subtraction; the denominator
    /// accumulates in f64.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let numel = self.nodes[x.0].numel();
        if mask.len() != numel {
            return Err(Error::Shape(format!(
                "mask length {} against {} elements",
                mask.len(),
                numel
            )));
        }
        let d = *self.shape(x).last().expect("non-empty shape");
        let rows = numel / d;
        let mut out = vec![0.0f32; numel];
        {
            let xd = self.data(x);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mrow = &mask[r * d..(r + 1) * d];
                let mut max = f32::NEG_INFINITY;
                for i in 0..d {
                    if mrow[i] && row[i] > max {
                        max = row[i];
                    }
                }
                if max == f32::NEG_INFINITY {
                    return Err(Error::Mask(format!("softmax row {r} fully masked")));
                }
                let mut denom = 0.0f64;
                for i in 0..d {
                    if mrow[i] {
                        denom += f64::from((row[i] - max).exp());
                    }
                }
                for i in 0..d {
                    if mrow[i] {
                        out[r * d + i] =
                            (f64::from((row[i] - max).exp()) / denom) as f32;
                    }
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, Op::MaskedSoftmax { x: x.0, mask: mask.to_vec() }, rg))
    }

    /// Inverted dropout. Train mode zeroes each element with probability `p`
    /// and rescales survivors by 1/(1-p); eval mode (or p == 0) is the
    /// identity and consumes no randomness.
    pub fn dropout(&mut self, x: Var, p: f32, rng: &mut RngStream, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Shape(format!("dropout rate {p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f32> = self
            .nodes[x.0]
            .data
            .iter()
            .map(|_| if rng.next_f64() < f64::from(p) { 0.0 } else { keep_scale })
            .collect();
        let out: Vec<f32> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, Op::Dropout { x: x.0, mask }, rg))
    }

    /// Gather rows of `table` by token id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.rows_cols(table)?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding lookup of empty id list".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Vocab(format!("token id {id} outside vocab of {vocab}")));
            }
            out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            out,
            vec![ids.len(), d],
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.rows_cols(a)?;
        let (mb, nb) = self.rows_cols(b)?;
        if na != nb {
            return Err(Error::Shape(format!(
                "concat_rows widths {na} vs {nb}"
            )));
        }
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, vec![ma + mb, na], Op::ConcatRows { a: a.0, b: b.0 }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.rows_cols(x)?;
        if start >= end || end > m {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {m} rows")));
        }
        let out = self.data(x)[start * n..end * n].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, vec![end - start, n], Op::SliceRows { x: x.0, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.rows_cols(x)?;
        if start >= end || end > n {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {n} cols")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&self.data(x)[r * n + start..r * n + end]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, vec![m, w], Op::SliceCols { x: x.0, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of empty list".into()));
        }
        let (m, _) = self.rows_cols(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.rows_cols(p)?;
            if mp != m {
                return Err(Error::Shape(format!("concat_cols rows {mp} vs {m}")));
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pw = w;
                out.extend_from_slice(&self.data(p)[r * pw..(r + 1) * pw]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            out,
            vec![m, n],
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
            rg,
        ))
    }

    /// Sum of all elements (f64 accumulation) as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|&v| f64::from(v)).sum();
        let rg = self.requires_grad(x);
        self.push(vec![s as f32], vec![1], Op::Sum { x: x.0 }, rg)
    }

    /// Label-smoothed cross entropy, summed over positions whose target is
    /// not `pad_id`. The smoothed target puts 1-eps on the gold token plus a
    /// uniform eps share over every non-pad vocabulary entry (gold included).
    /// Returns the loss sum and the number of included positions.
    pub fn cross_entropy_ls_sum(
        &mut self,
        logits: Var,
        targets: &[u32],
        pad_id: u32,
        smoothing: f32,
    ) -> Result<(Var, usize)> {
        let (t, v) = self.rows_cols(logits)?;
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "{} targets against {t} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Shape(format!("smoothing {smoothing} outside [0,1)")));
        }
        for &tok in targets {
            if tok as usize >= v {
                return Err(Error::Vocab(format!("target id {tok} outside vocab of {v}")));
            }
        }
        let non_pad = if (pad_id as usize) < v { v - 1 } else { v };
        let eps = f64::from(smoothing);
        let uniform = if non_pad > 0 { eps / non_pad as f64 } else { 0.0 };
        let mut loss = 0.0f64;
        let mut count = 0usize;
        {
            let zd = self.data(logits);
            for (r, &gold) in targets.iter().enumerate() {
                if gold == pad_id {
                    continue;
                }
                count += 1;
                let row = &zd[r * v..(r + 1) * v];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let logz = f64::from(max)
                    + row
                        .iter()
                        .map(|&z| f64::from(z - max).exp())
                        .sum::<f64>()
                        .ln();
                // -sum_k q_k (z_k - logz) with q as documented above
                let mut zq = (1.0 - eps) * f64::from(row[gold as usize]);
                if uniform > 0.0 {
                    let mut zsum = 0.0f64;
                    for (k, &z) in row.iter().enumerate() {
                        if k as u32 != pad_id {
                            zsum += f64::from(z);
                        }
                    }
                    zq += uniform * zsum;
                }
                loss += logz - zq;
            }
        }
        let rg = self.requires_grad(logits);
        let var = self.push(
            vec![loss as f32],
            vec![1],
            Op::CeLabelSmooth { logits: logits.0, targets: targets.to_vec(), pad_id, smoothing },
            rg,
        );
        Ok((var, count))
    }

    /// KL(softmax(syn) || softmax(aut)) summed over unmasked rows. Gradients
    /// flow into both logit sets. Returns the sum and the unmasked row count.
    pub fn kl_consistency_sum(
        &mut self,
        logits_syn: Var,
        logits_aut: Var,
        mask: &[bool],
    ) -> Result<(Var, usize)> {
        let (t, v) = self.rows_cols(logits_syn)?;
        if self.shape(logits_syn) != self.shape(logits_aut) {
            return Err(Error::Shape(format!(
                "kl shapes {:?} vs {:?}",
                self.shape(logits_syn),
                self.shape(logits_aut)
            )));
        }
        if mask.len() != t {
            return Err(Error::Shape(format!("{} mask rows against {t}", mask.len())));
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        {
            let zs = self.data(logits_syn);
            let za = self.data(logits_aut);
            let mut ls = vec![0.0f64; v];
            let mut la = vec![0.0f64; v];
            for (r, &keep) in mask.iter().enumerate() {
                if !keep {
                    continue;
                }
                count += 1;
                log_softmax_f64(&zs[r * v..(r + 1) * v], &mut ls);
                log_softmax_f64(&za[r * v..(r + 1) * v], &mut la);
                let mut kl = 0.0f64;
                for k in 0..v {
                    kl += ls[k].exp() * (ls[k] - la[k]);
                }
                total += kl;
            }
        }
        let rg = self.requires_grad(logits_syn) || self.requires_grad(logits_aut);
        let var = self.push(
            vec![total as f32],
            vec![1],
            Op::KlConsistency { syn: logits_syn.0, aut: logits_aut.0, mask: mask.to_vec() },
            rg,
        );
        Ok((var, count))
    }

    /// Relaxed transport distance from `source` to `target` (flattened
    /// vectors of equal length). Each normalized source mass is sent wholly
    /// to its cheapest target under |a-b| cost, ties to the lowest index.
    /// Gradients flow through the costs and the mass normalization with the
    /// assignment held fixed.
    pub fn relaxed_ot(&mut self, source: Var, target: Var) -> Result<(Var, RelaxedOtWitness)> {
        let d = self.nodes[source.0].numel();
        if d != self.nodes[target.0].numel() {
            return Err(Error::Shape(format!(
                "relaxed_ot lengths {d} vs {}",
                self.nodes[target.0].numel()
            )));
        }
        let sd: Vec<f64> = self.data(source).iter().map(|&v| f64::from(v)).collect();
        let td: Vec<f64> = self.data(target).iter().map(|&v| f64::from(v)).collect();
        let norm: f64 = sd.iter().map(|v| v.abs()).sum();
        let target_norm: f64 = td.iter().map(|v| v.abs()).sum();
        if norm <= MASS_EPS || target_norm <= MASS_EPS {
            return Err(Error::DegenerateMass(format!(
                "absolute mass {norm:.3e}/{target_norm:.3e} below {MASS_EPS:.0e}"
            )));
        }
        let mass: Vec<f64> = sd.iter().map(|v| v.abs() / norm).collect();
        let mut assignment = vec![0usize; d];
        let mut costs = vec![0.0f64; d];
        let mut distance = 0.0f64;
        for i in 0..d {
            let mut best_j = 0usize;
            let mut best_c = (sd[i] - td[0]).abs();
            for (j, &tv) in td.iter().enumerate().skip(1) {
                let c = (sd[i] - tv).abs();
                if c < best_c {
                    best_c = c;
                    best_j = j;
                }
            }
            assignment[i] = best_j;
            costs[i] = best_c;
            distance += mass[i] * best_c;
        }
        let witness = RelaxedOtWitness {
            assignment: assignment.clone(),
            source_mass: mass.clone(),
            distance,
        };
        let rg = self.requires_grad(source) || self.requires_grad(target);
        let var = self.push(
            vec![distance as f32],
            vec![1],
            Op::RelaxedOt {
                source: source.0,
                target: target.0,
                assignment,
                mass,
                norm,
                costs,
                distance,
            },
            rg,
        );
        Ok((var, witness))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every requires_grad node reachable
    /// from `loss` gets its gradient populated. Calling this twice without a
    /// [`Self::reset`] in between is rejected: the second sweep would fold
    /// duplicate contributions into already-accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Numerics(
                "backward called twice without reset; gradients would double-count".into(),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Shape(
                "loss is not connected to any requires_grad tensor".into(),
            ));
        }
        self.backward_done = true;
        self.accumulate(loss.0, &[1.0]);
        for r in (0..self.records.len()).rev() {
            let out = self.records[r].out;
            let Some(gout) = self.nodes[out].grad.take() else { continue };
            let op = std::mem::replace(&mut self.records[r].op, Op::Sum { x: 0 });
            self.step_backward(&op, out, &gout);
            self.records[r].op = op;
            self.nodes[out].grad = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, node: usize, delta: &[f32]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let numel = self.nodes[node].numel();
        debug_assert_eq!(delta.len(), numel);
        let grad = self.nodes[node].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn step_backward(&mut self, op: &Op, out: usize, gout: &[f32]) {
        match op {
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(gout, &self.nodes[*b].data, m, n, k, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(&self.nodes[*a].data, gout, m, k, n, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nn(gout, &self.nodes[*b].data, m, n, k, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn(gout, &self.nodes[*a].data, m, n, k, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, gout);
                self.accumulate(*b, gout);
            }
            Op::AddBias { x, b } => {
                self.accumulate(*x, gout);
                if self.nodes[*b].requires_grad {
                    let n = self.nodes[*b].numel();
                    let mut db = vec![0.0f32; n];
                    for row in gout.chunks_exact(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f32> =
                        gout.iter().zip(&self.nodes[*b].data).map(|(g, v)| g * v).collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f32> =
                        gout.iter().zip(&self.nodes[*a].data).map(|(g, v)| g * v).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f32> = gout.iter().map(|g| g * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f32> = gout
                    .iter()
                    .zip(&self.nodes[*x].data)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = *self.nodes[*x].shape.last().expect("shape");
                let rows = self.nodes[*x].numel() / d;
                let xd = &self.nodes[*x].data;
                let gd = &self.nodes[*gamma].data;
                let mut dx = vec![0.0f32; rows * d];
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &gout[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for i in 0..d {
                        let xhat = (f64::from(row[i]) - mu) * rs;
                        let dxhat = f64::from(grow[i]) * f64::from(gd[i]);
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[i] += (f64::from(grow[i]) * xhat) as f32;
                        dbeta[i] += grow[i];
                    }
                    let inv_d = 1.0 / d as f64;
                    for i in 0..d {
                        let xhat = (f64::from(row[i]) - mu) * rs;
                        let dxhat = f64::from(grow[i]) * f64::from(gd[i]);
                        dx[r * d + i] = (rs
                            * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d))
                            as f32;
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::MaskedSoftmax { x, mask } => {
                let d = *self.nodes[out].shape.last().expect("shape");
                let rows = self.nodes[out].numel() / d;
                let y = &self.nodes[out].data;
                let mut dx = vec![0.0f32; rows * d];
                for r in 0..rows {
                    let yrow = &y[r * d..(r + 1) * d];
                    let grow = &gout[r * d..(r + 1) * d];
                    let mrow = &mask[r * d..(r + 1) * d];
                    let mut dot = 0.0f64;
                    for i in 0..d {
                        dot += f64::from(grow[i]) * f64::from(yrow[i]);
                    }
                    for i in 0..d {
                        if mrow[i] {
                            dx[r * d + i] =
                                (f64::from(yrow[i]) * (f64::from(grow[i]) - dot)) as f32;
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f32> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(*x, &dx);
            }
            Op::Embedding { table, ids } => {
                if self.nodes[*table].requires_grad {
                    let d = self.nodes[*table].shape[1];
                    let numel = self.nodes[*table].numel();
                    let grad =
                        self.nodes[*table].grad.get_or_insert_with(|| vec![0.0; numel]);
                    for (t, &id) in ids.iter().enumerate() {
                        let dst = &mut grad[id as usize * d..(id as usize + 1) * d];
                        let src = &gout[t * d..(t + 1) * d];
                        for (g, &s) in dst.iter_mut().zip(src) {
                            *g += s;
                        }
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.nodes[*a].numel();
                self.accumulate(*a, &gout[..na]);
                self.accumulate(*b, &gout[na..]);
            }
            Op::SliceRows { x, start } => {
                if self.nodes[*x].requires_grad {
                    let n = self.nodes[*x].shape[1];
                    let mut dx = vec![0.0f32; self.nodes[*x].numel()];
                    dx[start * n..start * n + gout.len()].copy_from_slice(gout);
                    self.accumulate(*x, &dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.nodes[*x].requires_grad {
                    let (m, n) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let w = self.nodes[out].shape[1];
                    let mut dx = vec![0.0f32; m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + w]
                            .copy_from_slice(&gout[r * w..(r + 1) * w]);
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[out].shape[0];
                let n = self.nodes[out].shape[1];
                let widths: Vec<usize> =
                    parts.iter().map(|&p| self.nodes[p].shape[1]).collect();
                let mut offset = 0usize;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.nodes[p].requires_grad {
                        let mut dp = vec![0.0f32; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&gout[r * n + offset..r * n + offset + w]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += w;
                }
            }
            Op::Sum { x } => {
                let g = gout[0];
                let dx = vec![g; self.nodes[*x].numel()];
                self.accumulate(*x, &dx);
            }
            Op::CeLabelSmooth { logits, targets, pad_id, smoothing } => {
                if !self.nodes[*logits].requires_grad {
                    return;
                }
                let (t, v) = (self.nodes[*logits].shape[0], self.nodes[*logits].shape[1]);
                let g = f64::from(gout[0]);
                let eps = f64::from(*smoothing);
                let non_pad = if (*pad_id as usize) < v { v - 1 } else { v };
                let uniform = if non_pad > 0 { eps / non_pad as f64 } else { 0.0 };
                let zd = &self.nodes[*logits].data;
                let mut dz = vec![0.0f32; t * v];
                let mut p = vec![0.0f64; v];
                for (r, &gold) in targets.iter().enumerate() {
                    if gold == *pad_id {
                        continue;
                    }
                    softmax_f64(&zd[r * v..(r + 1) * v], &mut p);
                    for k in 0..v {
                        let q = if k as u32 == *pad_id {
                            0.0
                        } else if k as u32 == gold {
                            (1.0 - eps) + uniform
                        } else {
                            uniform
                        };
                        dz[r * v + k] = (g * (p[k] - q)) as f32;
                    }
                }
                self.accumulate(*logits, &dz);
            }
            Op::KlConsistency { syn, aut, mask } => {
                let (t, v) = (self.nodes[*syn].shape[0], self.nodes[*syn].shape[1]);
                let g = f64::from(gout[0]);
                let zs = &self.nodes[*syn].data;
                let za = &self.nodes[*aut].data;
                let mut dzs = vec![0.0f32; t * v];
                let mut dza = vec![0.0f32; t * v];
                let mut ls = vec![0.0f64; v];
                let mut la = vec![0.0f64; v];
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        continue;
                    }
                    log_softmax_f64(&zs[r * v..(r + 1) * v], &mut ls);
                    log_softmax_f64(&za[r * v..(r + 1) * v], &mut la);
                    let mut kl = 0.0f64;
                    for k in 0..v {
                        kl += ls[k].exp() * (ls[k] - la[k]);
                    }
                    for k in 0..v {
                        let p = ls[k].exp();
                        let q = la[k].exp();
                        dzs[r * v + k] = (g * p * ((ls[k] - la[k]) - kl)) as f32;
                        dza[r * v + k] = (g * (q - p)) as f32;
                    }
                }
                self.accumulate(*syn, &dzs);
                self.accumulate(*aut, &dza);
            }
            Op::RelaxedOt { source, target, assignment, mass, norm, costs, distance } => {
                let d = assignment.len();
                let g = f64::from(gout[0]);
                let sd = self.nodes[*source].data.clone();
                let td = self.nodes[*target].data.clone();
                if self.nodes[*source].requires_grad {
                    let mut ds = vec![0.0f32; d];
                    for i in 0..d {
                        let s = f64::from(sd[i]);
                        let t = f64::from(td[assignment[i]]);
                        let grad = sgn(s) * (costs[i] - distance) / norm
                            + mass[i] * sgn(s - t);
                        ds[i] = (g * grad) as f32;
                    }
                    self.accumulate(*source, &ds);
                }
                if self.nodes[*target].requires_grad {
                    let mut dt = vec![0.0f32; d];
                    for i in 0..d {
                        let s = f64::from(sd[i]);
                        let t = f64::from(td[assignment[i]]);
                        dt[assignment[i]] -= (g * mass[i] * sgn(s - t)) as f32;
                    }
                    self.accumulate(*target, &dt);
                }
            }
        }
    }
}

/// Absolute-mass floor below which normalization is refused.
pub const MASS_EPS: f64 = 1e-8;

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_f64(row: &[f32], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for (o, &z) in out.iter_mut().zip(row) {
        let e = f64::from(z - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

fn log_softmax_f64(row: &[f32], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for &z in row {
        denom += f64::from(z - max).exp();
    }
    let logz = f64::from(max) + denom.ln();
    for (o, &z) in out.iter_mut().zip(row) {
        *o = f64::from(z) - logz;
    }
}
