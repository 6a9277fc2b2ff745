//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations are recorded eagerly: pushing an op onto the [`Tape`] computes
//! its value immediately and caches it, so the forward pass is the act of
//! building the graph. [`Tape::backward`] then sweeps the recording in reverse,
//! visiting each node exactly once and accumulating gradients into the leaves.
//!
//! The op set is deliberately small: matmul, elementwise arithmetic, reductions,
//! row softmax / log-softmax, layer norm, SiLU, gathers, and column slicing —
//! exactly what the toy causal LM needs. No fusion, no graph rewriting: a fixed
//! tape with fixed inputs replays bit-identically.

use crate::tensor::{mm, mm_nt, mm_tn, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: index out of bounds: {details}")]
    IndexOutOfBounds { op: &'static str, details: String },
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("gradient check step must be in (0, 1e-2], got {0}")]
    InvalidStep(f64),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    /// C = A @ B^T with B stored untransposed.
    MatMulNt(usize, usize),
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    /// out[k] = src[rows[k], cols[k]]
    GatherElems {
        src: usize,
        coords: Vec<(usize, usize)>,
    },
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    LayerNorm {
        src: usize,
        gain: usize,
        eps: f64,
    },
    Silu(usize),
    Exp(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Scalar dot product against fixed weights (weights carry no gradient).
    DotConst {
        src: usize,
        weights: Vec<f64>,
    },
    SliceCols {
        src: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
}

/// Recording of a forward computation plus per-node gradient slots.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` target w.r.t. `id`.
    ///
    /// Gradients are retained for leaf nodes; interior slots are consumed
    /// during the sweep. `None` means the node was unreachable (gradient zero).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    /// Registers a differentiable input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers a value that participates in the forward pass but whose
    /// gradient is never read (e.g. an attention mask).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn check_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TapeError> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(TapeError::ShapeMismatch {
                op,
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check_same_shape("add", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check_same_shape("sub", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check_same_shape("mul", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data = self.values[a.0].data().iter().map(|x| x * factor).collect();
        let shape = self.values[a.0].shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale(a.0, factor))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (_, ka) = self.values[a.0].dims2();
        let (kb, _) = self.values[b.0].dims2();
        if ka != kb {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                details: format!(
                    "{:?} @ {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            });
        }
        let value = mm(&self.values[a.0], &self.values[b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    /// a @ b^T where `b` is stored untransposed as [n, k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (_, ka) = self.values[a.0].dims2();
        let (_, kb) = self.values[b.0].dims2();
        if ka != kb {
            return Err(TapeError::ShapeMismatch {
                op: "matmul_nt",
                details: format!(
                    "{:?} @ transpose({:?})",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            });
        }
        let value = mm_nt(&self.values[a.0], &self.values[b.0]);
        Ok(self.push(value, Op::MatMulNt(a.0, b.0)))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.values[table.0].dims2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TapeError::IndexOutOfBounds {
                op: "gather_rows",
                details: format!("row {bad} in table with {rows} rows"),
            });
        }
        let src = self.values[table.0].data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![indices.len(), cols], data).unwrap();
        Ok(self.push(
            value,
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn gather_elems(
        &mut self,
        src: NodeId,
        coords: &[(usize, usize)],
    ) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.values[src.0].dims2();
        if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(TapeError::IndexOutOfBounds {
                op: "gather_elems",
                details: format!("({r}, {c}) in tensor of shape [{rows}, {cols}]"),
            });
        }
        let data = coords
            .iter()
            .map(|&(r, c)| self.values[src.0].at(r, c))
            .collect();
        Ok(self.push(
            Tensor::vector(data),
            Op::GatherElems {
                src: src.0,
                coords: coords.to_vec(),
            },
        ))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.values[a.0].dims2();
        let src = self.values[a.0].data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        let value = Tensor::new(vec![rows, cols], data).unwrap();
        self.push(value, Op::RowSoftmax(a.0))
    }

    /// Row-wise log-softmax with max subtraction for stability.
    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.values[a.0].dims2();
        let src = self.values[a.0].data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let value = Tensor::new(vec![rows, cols], data).unwrap();
        self.push(value, Op::RowLogSoftmax(a.0))
    }

    /// Row-wise layer norm with a learned gain vector (no bias).
    pub fn layer_norm(
        &mut self,
        src: NodeId,
        gain: NodeId,
        eps: f64,
    ) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.values[src.0].dims2();
        let g = &self.values[gain.0];
        if g.shape() != [cols] {
            return Err(TapeError::ShapeMismatch {
                op: "layer_norm",
                details: format!(
                    "gain {:?} for input of shape {:?}",
                    g.shape(),
                    self.values[src.0].shape()
                ),
            });
        }
        let x = self.values[src.0].data();
        let gd = g.data().to_vec();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mu) * inv * gd[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], data).unwrap();
        Ok(self.push(
            value,
            Op::LayerNorm {
                src: src.0,
                gain: gain.0,
                eps,
            },
        ))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|&x| x * sigmoid_f(x))
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Silu(a.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = self.values[a.0].data().iter().map(|x| x.exp()).collect();
        let shape = self.values[a.0].shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Exp(a.0))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.values[a.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a.0].len() as f64;
        let s = self.values[a.0].data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::MeanAll(a.0))
    }

    /// Scalar dot product of the flattened node against fixed weights.
    /// The weights are treated as constants and receive no gradient.
    pub fn dot_const(&mut self, src: NodeId, weights: &[f64]) -> Result<NodeId, TapeError> {
        if weights.len() != self.values[src.0].len() {
            return Err(TapeError::ShapeMismatch {
                op: "dot_const",
                details: format!(
                    "{} weights for {} elements",
                    weights.len(),
                    self.values[src.0].len()
                ),
            });
        }
        let s = self.values[src.0]
            .data()
            .iter()
            .zip(weights)
            .map(|(x, w)| x * w)
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::DotConst {
                src: src.0,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn slice_cols(
        &mut self,
        src: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.values[src.0].dims2();
        if start + len > cols {
            return Err(TapeError::IndexOutOfBounds {
                op: "slice_cols",
                details: format!("columns {start}..{} of {cols}", start + len),
            });
        }
        let x = self.values[src.0].data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data).unwrap();
        Ok(self.push(
            value,
            Op::SliceCols {
                src: src.0,
                start,
                len,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::ShapeMismatch {
                op: "concat_cols",
                details: "no parts".into(),
            });
        }
        let rows = self.values[parts[0].0].dims2().0;
        for p in parts {
            if self.values[p.0].dims2().0 != rows {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    details: format!(
                        "row counts differ: {:?} vs {:?}",
                        self.values[parts[0].0].shape(),
                        self.values[p.0].shape()
                    ),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.values[p.0].dims2().1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let (_, c) = self.values[p.0].dims2();
                let x = self.values[p.0].data();
                data.extend_from_slice(&x[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new(vec![rows, total], data).unwrap();
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    /// Reverse sweep from a scalar output. Resets all gradient slots first,
    /// so a tape can be differentiated from several outputs in turn.
    pub fn backward(&mut self, output: NodeId) -> Result<(), TapeError> {
        if !self.values[output.0].is_scalar() {
            return Err(TapeError::NonScalarBackward(
                self.values[output.0].shape().to_vec(),
            ));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[output.0] = Some(Tensor::scalar(1.0));
        for id in (0..=output.0).rev() {
            if matches!(self.ops[id], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            backward_op(&self.values, &self.ops[id], id, &mut self.grads, &g);
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

fn acc_slot<'a>(grads: &'a mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'a mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

fn backward_op(values: &[Tensor], op: &Op, out: usize, grads: &mut [Option<Tensor>], g: &Tensor) {
    match op {
        Op::Leaf => unreachable!("leaves are skipped in the sweep"),
        Op::Add(a, b) => {
            acc(grads, *a, g.clone());
            acc(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(grads, *a, g.clone());
            let mut neg = g.clone();
            neg.scale_assign(-1.0);
            acc(grads, *b, neg);
        }
        Op::Mul(a, b) => {
            let da = elementwise_prod(g, &values[*b]);
            let db = elementwise_prod(g, &values[*a]);
            acc(grads, *a, da);
            acc(grads, *b, db);
        }
        Op::Scale(a, factor) => {
            let mut da = g.clone();
            da.scale_assign(*factor);
            acc(grads, *a, da);
        }
        Op::MatMul(a, b) => {
            // C = A B  →  dA = G B^T, dB = A^T G
            acc(grads, *a, mm_nt(g, &values[*b]));
            acc(grads, *b, mm_tn(&values[*a], g));
        }
        Op::MatMulNt(a, b) => {
            // C = A B^T  →  dA = G B, dB = G^T A
            acc(grads, *a, mm(g, &values[*b]));
            acc(grads, *b, mm_tn(g, &values[*a]));
        }
        Op::GatherRows { table, indices } => {
            let (_, cols) = values[*table].dims2();
            let shape = values[*table].shape().to_vec();
            let slot = acc_slot(grads, *table, &shape);
            let gd = g.data();
            for (i, &row) in indices.iter().enumerate() {
                let dst = &mut slot.data_mut()[row * cols..(row + 1) * cols];
                for (d, v) in dst.iter_mut().zip(&gd[i * cols..(i + 1) * cols]) {
                    *d += v;
                }
            }
        }
        Op::GatherElems { src, coords } => {
            let (_, cols) = values[*src].dims2();
            let shape = values[*src].shape().to_vec();
            let slot = acc_slot(grads, *src, &shape);
            for (k, &(r, c)) in coords.iter().enumerate() {
                slot.data_mut()[r * cols + c] += g.data()[k];
            }
        }
        Op::RowSoftmax(a) => {
            let y = &values[out];
            // dx_j = y_j (g_j - sum_k g_k y_k) per row
            let (rows, cols) = y.dims2();
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = &y.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for c in 0..cols {
                    dx[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            acc(
                grads,
                *a,
                Tensor::new(vec![rows, cols], dx).unwrap(),
            );
        }
        Op::RowLogSoftmax(a) => {
            let y = &values[out];
            // dx_j = g_j - exp(y_j) * sum_k g_k per row
            let (rows, cols) = y.dims2();
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = &y.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let gsum: f64 = gr.iter().sum();
                for c in 0..cols {
                    dx[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                }
            }
            acc(
                grads,
                *a,
                Tensor::new(vec![rows, cols], dx).unwrap(),
            );
        }
        Op::LayerNorm { src, gain, eps } => {
            let x = &values[*src];
            let gd = values[*gain].data();
            let (rows, cols) = x.dims2();
            let n = cols as f64;
            let mut dx = vec![0.0; rows * cols];
            let mut dgain = vec![0.0; cols];
            for r in 0..rows {
                let row = &x.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                // Gradient w.r.t. the normalized activations.
                let ghat: Vec<f64> = gr.iter().zip(gd).map(|(g, w)| g * w).collect();
                let mean_ghat = ghat.iter().sum::<f64>() / n;
                let mean_gx = ghat.iter().zip(&xhat).map(|(g, x)| g * x).sum::<f64>() / n;
                for c in 0..cols {
                    dx[r * cols + c] = inv * (ghat[c] - mean_ghat - xhat[c] * mean_gx);
                    dgain[c] += gr[c] * xhat[c];
                }
            }
            acc(grads, *src, Tensor::new(vec![rows, cols], dx).unwrap());
            acc(grads, *gain, Tensor::vector(dgain));
        }
        Op::Silu(a) => {
            let x = &values[*a];
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| {
                    let s = sigmoid_f(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            acc(
                grads,
                *a,
                Tensor::new(x.shape().to_vec(), data).unwrap(),
            );
        }
        Op::Exp(a) => {
            let y = &values[out];
            let data = y
                .data()
                .iter()
                .zip(g.data())
                .map(|(y, g)| y * g)
                .collect();
            acc(
                grads,
                *a,
                Tensor::new(y.shape().to_vec(), data).unwrap(),
            );
        }
        Op::SumAll(a) => {
            let s = g.scalar_value();
            acc(grads, *a, Tensor::filled(values[*a].shape().to_vec(), s));
        }
        Op::MeanAll(a) => {
            let s = g.scalar_value() / values[*a].len() as f64;
            acc(grads, *a, Tensor::filled(values[*a].shape().to_vec(), s));
        }
        Op::DotConst { src, weights } => {
            let s = g.scalar_value();
            let data = weights.iter().map(|w| w * s).collect();
            acc(
                grads,
                *src,
                Tensor::new(values[*src].shape().to_vec(), data).unwrap(),
            );
        }
        Op::SliceCols { src, start, len } => {
            let (rows, cols) = values[*src].dims2();
            let shape = values[*src].shape().to_vec();
            let slot = acc_slot(grads, *src, &shape);
            for r in 0..rows {
                for c in 0..*len {
                    slot.data_mut()[r * cols + start + c] += g.data()[r * len + c];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = g.dims2().1;
            let rows = g.dims2().0;
            let mut offset = 0;
            for &p in parts {
                let (_, c) = values[p].dims2();
                let mut dp = vec![0.0; rows * c];
                for r in 0..rows {
                    dp[r * c..(r + 1) * c]
                        .copy_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                }
                offset += c;
                acc(grads, p, Tensor::new(vec![rows, c], dp).unwrap());
            }
        }
    }
}

fn elementwise_prod(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let out = f(&mut tape, x)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TapeError::NonScalarBackward(v.shape().to_vec()));
    }
    let v = v.scalar_value();
    if !v.is_finite() {
        return Err(TapeError::NonFinite("grad_check function value".into()));
    }
    Ok(v)
}

/// Compares the analytic gradient of a scalar-valued function against central
/// finite differences at `point`, returning the worst relative error
/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
pub fn grad_check<F>(f: &F, point: &Tensor, h: f64) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, TapeError>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(TapeError::InvalidStep(h));
    }
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let out = f(&mut tape, x)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TapeError::NonScalarBackward(v.shape().to_vec()));
    }
    if !v.scalar_value().is_finite() {
        return Err(TapeError::NonFinite("grad_check function value".into()));
    }
    tape.backward(out)?;
    let analytic = match tape.grad(x) {
        Some(g) => g.clone(),
        None => Tensor::zeros(point.shape().to_vec()),
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval_scalar(f, &plus)? - eval_scalar(f, &minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_forward_and_backward() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).scalar_value(), 9.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().scalar_value(), 6.0);
    }

    #[test]
    fn sum_forward_and_backward() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = t.sum_all(x);
        assert_eq!(t.value(y).scalar_value(), 6.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn log_softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = t.row_log_softmax(x);
        let expected = -(2.0f64).ln();
        for v in t.value(y).data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.input(Tensor::vector(vec![1.0, 2.0]));
        let b = t.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        // -log softmax(x)[target] summed over rows, random logits.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let point = rand_tensor(&mut rng, vec![3, 5]);
            let f = |t: &mut Tape, x: NodeId| {
                let ls = t.row_log_softmax(x);
                let picked = t.gather_elems(ls, &[(0, 1), (1, 4), (2, 0)])?;
                let s = t.sum_all(picked);
                Ok(t.scale(s, -1.0))
            };
            let err = grad_check(&f, &point, 1e-4).unwrap();
            assert!(err <= 1e-5, "cross-entropy grad err {err}");
        }
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let f = |t: &mut Tape, x: NodeId| t.mul(x, x);
        let err = grad_check(&f, &Tensor::scalar(3.0), 1e-4).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn grad_check_exp_at_zero() {
        let f = |t: &mut Tape, x: NodeId| Ok(t.exp(x));
        let err = grad_check(&f, &Tensor::scalar(0.0), 1e-4).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn grad_check_constant_function_is_exact_zero() {
        let f = |t: &mut Tape, x: NodeId| {
            let _ = x;
            Ok(t.constant(Tensor::scalar(5.0)))
        };
        let err = grad_check(&f, &Tensor::vector(vec![1.0, -2.0]), 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let f = |t: &mut Tape, x: NodeId| t.mul(x, x);
        assert!(matches!(
            grad_check(&f, &Tensor::scalar(1.0), 0.0),
            Err(TapeError::InvalidStep(_))
        ));
        assert!(matches!(
            grad_check(&f, &Tensor::scalar(1.0), 0.5),
            Err(TapeError::InvalidStep(_))
        ));
    }

    /// Every primitive against central differences at 100 random points.
    #[test]
    fn primitives_match_finite_differences() {
        type CheckFn = (
            &'static str,
            Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId, TapeError>>,
            Vec<usize>,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // Fixed partners for binary ops; scalarize matrix outputs via dot_const.
        let partner23 = rand_tensor(&mut rng, vec![2, 3]);
        let partner34 = rand_tensor(&mut rng, vec![3, 4]);
        let partner24 = rand_tensor(&mut rng, vec![2, 4]);
        let w6: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w8: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w4: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w3: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gain = rand_tensor(&mut rng, vec![3]);

        let cases: Vec<CheckFn> = vec![
            (
                "add",
                {
                    let p = partner23.clone();
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let c = t.input(p.clone());
                        let y = t.add(x, c)?;
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "sub",
                {
                    let p = partner23.clone();
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let c = t.input(p.clone());
                        let y = t.sub(c, x)?;
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "mul",
                {
                    let p = partner23.clone();
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let c = t.input(p.clone());
                        let y = t.mul(x, c)?;
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "scale",
                {
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let y = t.scale(x, -1.7);
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "matmul_lhs",
                {
                    let p = partner34.clone();
                    let w = w8.clone();
                    Box::new(move |t, x| {
                        let c = t.input(p.clone());
                        let y = t.matmul(x, c)?;
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "matmul_rhs",
                {
                    let p = partner23.clone();
                    let w = w8.clone();
                    Box::new(move |t, x| {
                        let c = t.input(p.clone());
                        let y = t.matmul(c, x)?;
                        t.dot_const(y, &w)
                    })
                },
                vec![3, 4],
            ),
            (
                "matmul_nt",
                {
                    let p = partner24.clone();
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let c = t.input(p.clone());
                        let y = t.matmul_nt(c, x)?;
                        t.dot_const(y, &w)
                    })
                },
                vec![3, 4],
            ),
            (
                "gather_rows",
                {
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let y = t.gather_rows(x, &[1, 0, 1])?;
                        let w2: Vec<f64> = w.iter().chain(w.iter().take(3)).cloned().collect();
                        t.dot_const(y, &w2[..9])
                    })
                },
                vec![2, 3],
            ),
            (
                "gather_elems",
                {
                    let w = w3.clone();
                    Box::new(move |t, x| {
                        let y = t.gather_elems(x, &[(0, 2), (1, 0), (0, 2)])?;
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "row_softmax",
                {
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let y = t.row_softmax(x);
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "row_log_softmax",
                {
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let y = t.row_log_softmax(x);
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "layer_norm",
                {
                    let g = gain.clone();
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let gn = t.input(g.clone());
                        let y = t.layer_norm(x, gn, 1e-5)?;
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "layer_norm_gain",
                {
                    let p = partner23.clone();
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let src = t.input(p.clone());
                        let y = t.layer_norm(src, x, 1e-5)?;
                        t.dot_const(y, &w)
                    })
                },
                vec![3],
            ),
            (
                "silu",
                {
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let y = t.silu(x);
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "exp",
                {
                    let w = w6.clone();
                    Box::new(move |t, x| {
                        let y = t.exp(x);
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            ("sum_all", Box::new(|t, x| Ok(t.sum_all(x))), vec![2, 3]),
            ("mean_all", Box::new(|t, x| Ok(t.mean_all(x))), vec![2, 3]),
            (
                "dot_const",
                {
                    let w = w6.clone();
                    Box::new(move |t, x| t.dot_const(x, &w))
                },
                vec![2, 3],
            ),
            (
                "slice_cols",
                {
                    let w = w4.clone();
                    Box::new(move |t, x| {
                        let y = t.slice_cols(x, 1, 2)?;
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
            (
                "concat_cols",
                {
                    let p = partner23.clone();
                    Box::new(move |t, x| {
                        let c = t.input(p.clone());
                        let y = t.concat_cols(&[x, c])?;
                        let w: Vec<f64> = (0..12).map(|i| 0.1 * (i as f64 - 5.0)).collect();
                        t.dot_const(y, &w)
                    })
                },
                vec![2, 3],
            ),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for (name, f, shape) in &cases {
            for trial in 0..100 {
                let point = rand_tensor(&mut rng, shape.clone());
                let err = grad_check(f, &point, 1e-5)
                    .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
                assert!(err <= 1e-5, "{name} trial {trial}: rel err {err}");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let point = rand_tensor(&mut rng, vec![4]);
        let (a, b) = (1.7, -0.6);

        let build = |t: &mut Tape| {
            let x = t.input(point.clone());
            let f = t.sum_all(x); // f = sum(x)
            let sq = t.mul(x, x).unwrap();
            let g = t.mean_all(sq); // g = mean(x^2)
            (x, f, g)
        };

        let mut t1 = Tape::new();
        let (x1, f1, _) = build(&mut t1);
        t1.backward(f1).unwrap();
        let gf = t1.grad(x1).unwrap().clone();

        let mut t2 = Tape::new();
        let (x2, _, g2) = build(&mut t2);
        t2.backward(g2).unwrap();
        let gg = t2.grad(x2).unwrap().clone();

        let mut t3 = Tape::new();
        let (x3, f3, g3) = build(&mut t3);
        let sf = t3.scale(f3, a);
        let sg = t3.scale(g3, b);
        let combined = t3.add(sf, sg).unwrap();
        t3.backward(combined).unwrap();
        let gc = t3.grad(x3).unwrap().clone();

        for i in 0..4 {
            let expected = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let point = rand_tensor(&mut rng, vec![3, 3]);
        let run = || {
            let mut t = Tape::new();
            let x = t.input(point.clone());
            let s = t.row_softmax(x);
            let l = t.row_log_softmax(x);
            let m = t.mul(s, l).unwrap();
            let out = t.sum_all(m);
            t.backward(out).unwrap();
            (
                t.value(out).scalar_value(),
                t.grad(x).unwrap().data().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn backward_from_multiple_outputs_resets_state() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![2.0, 5.0]));
        let s = t.sum_all(x);
        let sq = t.mul(x, x).unwrap();
        let q = t.sum_all(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0]);
        t.backward(q).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 10.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            t.backward(x),
            Err(TapeError::NonScalarBackward(_))
        ));
    }
}
