//! Patch-input multi-head self-attention with a relative position bias per head.
//!
//! Head `k` computes `softmax(Q_k K_kᵀ / √d + B_k) V_k` where `d` is the input
//! token width and `B_k[i][j] = b_k(x_i − x_j, y_i − y_j)` is looked up from the
//! head's [`RelativeBiasTable`] using query-minus-key grid coordinates. Head
//! outputs are concatenated in head order and projected by the shared `W^O`.

use crate::error::{dim_err, Error, Result};
use crate::scalar::{all_finite, Real};
use crate::tensor::{gemm_acc, Matrix, PatchGeometry, PatchSequence};

/// One learnable scalar per relative offset `(dx, dy)`, `|dx| ≤ row_radius`,
/// `|dy| ≤ col_radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeBiasTable<T> {
    row_radius: usize,
    col_radius: usize,
    values: Vec<T>,
}

impl<T: Real> RelativeBiasTable<T> {
    pub fn new(row_radius: usize, col_radius: usize, values: Vec<T>) -> Result<Self> {
        let n = (2 * row_radius + 1) * (2 * col_radius + 1);
        if values.len() != n {
            return dim_err(format!(
                "bias table with radii ({row_radius},{col_radius}) needs {n} values, got {}",
                values.len()
            ));
        }
        if !all_finite(&values) {
            return Err(Error::Numeric("bias table contains non-finite values".into()));
        }
        Ok(Self {
            row_radius,
            col_radius,
            values,
        })
    }

    pub fn zeros(row_radius: usize, col_radius: usize) -> Self {
        Self {
            row_radius,
            col_radius,
            values: vec![T::zero(); (2 * row_radius + 1) * (2 * col_radius + 1)],
        }
    }

    /// Zero table covering exactly the offsets realizable on `grid`.
    pub fn zeros_for_grid(grid: PatchGeometry) -> Self {
        Self::zeros(grid.grid_rows() - 1, grid.grid_cols() - 1)
    }

    pub fn row_radius(&self) -> usize {
        self.row_radius
    }

    pub fn col_radius(&self) -> usize {
        self.col_radius
    }

    /// `(2·row_radius + 1, 2·col_radius + 1)`.
    pub fn shape(&self) -> (usize, usize) {
        (2 * self.row_radius + 1, 2 * self.col_radius + 1)
    }

    pub fn covers(&self, grid: PatchGeometry) -> bool {
        self.row_radius + 1 >= grid.grid_rows() && self.col_radius + 1 >= grid.grid_cols()
    }

    #[inline]
    pub fn slot(&self, dx: isize, dy: isize) -> Option<usize> {
        let (rr, cr) = (self.row_radius as isize, self.col_radius as isize);
        if dx.abs() > rr || dy.abs() > cr {
            return None;
        }
        Some(((dx + rr) * (2 * cr + 1) + (dy + cr)) as usize)
    }

    pub fn get(&self, dx: isize, dy: isize) -> Option<T> {
        self.slot(dx, dy).map(|s| self.values[s])
    }

    /// Sets `b(dx, dy)`; returns false when the offset is outside the table.
    pub fn set(&mut self, dx: isize, dy: isize, v: T) -> bool {
        match self.slot(dx, dy) {
            Some(s) => {
                self.values[s] = v;
                true
            }
            None => false,
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Same entries on a table with larger radii; new offsets are zero.
    pub fn extended(&self, row_radius: usize, col_radius: usize) -> Result<Self> {
        if row_radius < self.row_radius || col_radius < self.col_radius {
            return dim_err("extended bias table must not be smaller than the original");
        }
        let mut out = Self::zeros(row_radius, col_radius);
        let (rr, cr) = (self.row_radius as isize, self.col_radius as isize);
        for dx in -rr..=rr {
            for dy in -cr..=cr {
                out.set(dx, dy, self.get(dx, dy).expect("in range"));
            }
        }
        Ok(out)
    }

    pub fn extended_to_grid(&self, grid: PatchGeometry) -> Result<Self> {
        self.extended(
            self.row_radius.max(grid.grid_rows() - 1),
            self.col_radius.max(grid.grid_cols() - 1),
        )
    }

    pub fn shifted(&self, c: T) -> Self {
        Self {
            values: self.values.iter().map(|v| *v + c).collect(),
            ..self.clone()
        }
    }

    pub fn cast<U: Real>(&self) -> RelativeBiasTable<U> {
        RelativeBiasTable {
            row_radius: self.row_radius,
            col_radius: self.col_radius,
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Dense `N × N` bias matrix for `grid`.
    pub fn expand(&self, grid: PatchGeometry) -> Result<Matrix<T>> {
        if !self.covers(grid) {
            return dim_err(format!(
                "bias table radii ({},{}) do not cover a {}x{} grid",
                self.row_radius,
                self.col_radius,
                grid.grid_rows(),
                grid.grid_cols()
            ));
        }
        let n = grid.len();
        Ok(Matrix::from_fn(n, n, |i, j| {
            let (xi, yi) = grid.coords(i);
            let (xj, yj) = grid.coords(j);
            self.get(xi as isize - xj as isize, yi as isize - yj as isize)
                .expect("covered")
        }))
    }
}

/// Projections and bias table of a single head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub bias: RelativeBiasTable<T>,
}

/// Full MHSA parameterization: per-head `W^Q, W^K, W^V ∈ R^{d×d_H}` and bias
/// tables, plus the shared `W^O ∈ R^{N_H·d_H × d_O}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaWeights<T> {
    dim: usize,
    head_dim: usize,
    out_dim: usize,
    heads: Vec<AttentionHead<T>>,
    w_o: Matrix<T>,
}

impl<T: Real> MhsaWeights<T> {
    pub fn new(heads: Vec<AttentionHead<T>>, w_o: Matrix<T>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return dim_err("an MHSA layer needs at least one head");
        };
        let (dim, head_dim) = first.w_q.shape();
        for (k, h) in heads.iter().enumerate() {
            for (name, m) in [("W^Q", &h.w_q), ("W^K", &h.w_k), ("W^V", &h.w_v)] {
                if m.shape() != (dim, head_dim) {
                    return dim_err(format!(
                        "head {k} {name} is {:?}, expected ({dim}, {head_dim})",
                        m.shape()
                    ));
                }
                if !m.is_finite() {
                    return Err(Error::Numeric(format!("head {k} {name} has non-finite entries")));
                }
            }
            if !all_finite(h.bias.values()) {
                return Err(Error::Numeric(format!("head {k} bias has non-finite entries")));
            }
        }
        if w_o.rows() != heads.len() * head_dim {
            return dim_err(format!(
                "W^O has {} rows, expected N_H*d_H = {}",
                w_o.rows(),
                heads.len() * head_dim
            ));
        }
        if !w_o.is_finite() {
            return Err(Error::Numeric("W^O has non-finite entries".into()));
        }
        Ok(Self {
            dim,
            head_dim,
            out_dim: w_o.cols(),
            heads,
            w_o,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> &[AttentionHead<T>] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [AttentionHead<T>] {
        &mut self.heads
    }

    pub fn w_o(&self) -> &Matrix<T> {
        &self.w_o
    }

    pub fn w_o_mut(&mut self) -> &mut Matrix<T> {
        &mut self.w_o
    }

    /// Disjoint mutable access to the heads and `W^O`. Shapes are fixed.
    pub fn split_params_mut(&mut self) -> (&mut [AttentionHead<T>], &mut Matrix<T>) {
        (&mut self.heads, &mut self.w_o)
    }

    pub fn into_parts(self) -> (Vec<AttentionHead<T>>, Matrix<T>) {
        (self.heads, self.w_o)
    }

    pub fn cast<U: Real>(&self) -> MhsaWeights<U> {
        MhsaWeights {
            dim: self.dim,
            head_dim: self.head_dim,
            out_dim: self.out_dim,
            heads: self
                .heads
                .iter()
                .map(|h| AttentionHead {
                    w_q: h.w_q.cast(),
                    w_k: h.w_k.cast(),
                    w_v: h.w_v.cast(),
                    bias: h.bias.cast(),
                })
                .collect(),
            w_o: self.w_o.cast(),
        }
    }

    /// Equivalent layer with wider heads and output, padded with zeros.
    ///
    /// Extra head columns carry zero values and extra output features are zero.
    pub fn widened(&self, head_dim: usize, out_dim: usize) -> Result<Self> {
        if head_dim < self.head_dim || out_dim < self.out_dim {
            return dim_err("widened sizes must not be smaller than the current ones");
        }
        let pad = |m: &Matrix<T>| {
            Matrix::from_fn(m.rows(), head_dim, |r, c| {
                if c < m.cols() {
                    m.get(r, c)
                } else {
                    T::zero()
                }
            })
        };
        let heads = self
            .heads
            .iter()
            .map(|h| AttentionHead {
                w_q: pad(&h.w_q),
                w_k: pad(&h.w_k),
                w_v: pad(&h.w_v),
                bias: h.bias.clone(),
            })
            .collect();
        let w_o = Matrix::from_fn(self.heads.len() * head_dim, out_dim, |r, c| {
            let (k, within) = (r / head_dim, r % head_dim);
            if within < self.head_dim && c < self.out_dim {
                self.w_o.get(k * self.head_dim + within, c)
            } else {
                T::zero()
            }
        });
        Self::new(heads, w_o)
    }
}

/// Post-softmax `N × N` attention matrix of every head.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T> {
    pub probs: Vec<Matrix<T>>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ForwardCache<T> {
    pub x: Matrix<T>,
    pub q: Vec<Matrix<T>>,
    pub k: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub probs: Vec<Matrix<T>>,
    pub concat: Matrix<T>,
}

/// Max-subtracted softmax.
pub fn softmax_row<T: Real>(scores: &[T]) -> Vec<T> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// MHSA forward pass using the bias tables stored in `w`.
pub fn mhsa_forward<T: Real>(seq: &PatchSequence<T>, w: &MhsaWeights<T>) -> Result<PatchSequence<T>> {
    let biases: Vec<&RelativeBiasTable<T>> = w.heads.iter().map(|h| &h.bias).collect();
    Ok(forward_impl(seq, w, &biases, false, false)?.0)
}

/// Forward pass that also returns every head's attention matrix.
pub fn mhsa_forward_traced<T: Real>(
    seq: &PatchSequence<T>,
    w: &MhsaWeights<T>,
) -> Result<(PatchSequence<T>, AttentionTrace<T>)> {
    let biases: Vec<&RelativeBiasTable<T>> = w.heads.iter().map(|h| &h.bias).collect();
    let (out, trace, _) = forward_impl(seq, w, &biases, true, false)?;
    Ok((out, trace.expect("trace requested")))
}

/// Forward pass with bias tables supplied separately from the projections.
pub fn mhsa_forward_with_biases<T: Real>(
    seq: &PatchSequence<T>,
    w: &MhsaWeights<T>,
    biases: &[&RelativeBiasTable<T>],
    trace: bool,
) -> Result<(PatchSequence<T>, Option<AttentionTrace<T>>)> {
    let (out, tr, _) = forward_impl(seq, w, biases, trace, false)?;
    Ok((out, tr))
}

pub(crate) fn mhsa_forward_cached<T: Real>(
    seq: &PatchSequence<T>,
    w: &MhsaWeights<T>,
) -> Result<(PatchSequence<T>, ForwardCache<T>)> {
    let biases: Vec<&RelativeBiasTable<T>> = w.heads.iter().map(|h| &h.bias).collect();
    let (out, _, cache) = forward_impl(seq, w, &biases, false, true)?;
    Ok((out, cache.expect("cache requested")))
}

type ForwardOutput<T> = (PatchSequence<T>, Option<AttentionTrace<T>>, Option<ForwardCache<T>>);

fn forward_impl<T: Real>(
    seq: &PatchSequence<T>,
    w: &MhsaWeights<T>,
    biases: &[&RelativeBiasTable<T>],
    keep_trace: bool,
    keep_cache: bool,
) -> Result<ForwardOutput<T>> {
    if seq.dim() != w.dim {
        return dim_err(format!(
            "sequence token width {} does not match layer input width {}",
            seq.dim(),
            w.dim
        ));
    }
    if biases.len() != w.num_heads() {
        return dim_err(format!(
            "{} bias tables supplied for {} heads",
            biases.len(),
            w.num_heads()
        ));
    }
    let grid = seq.geometry();
    let n = seq.len();
    let d = w.dim;
    let dh = w.head_dim;
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let x = Matrix::from_vec(n, d, seq.as_slice().to_vec())?;

    let mut concat = Matrix::zeros(n, w.num_heads() * dh);
    let mut trace = Vec::new();
    let mut cache_q = Vec::new();
    let mut cache_k = Vec::new();
    let mut cache_v = Vec::new();
    let mut cache_p = Vec::new();

    for (k, head) in w.heads.iter().enumerate() {
        let bias = biases[k].expand(grid)?;
        let content_free = head.w_q.is_zero() || head.w_k.is_zero();
        let (q, kk) = if content_free && !keep_cache {
            (None, None)
        } else {
            (Some(x.matmul(&head.w_q)?), Some(x.matmul(&head.w_k)?))
        };
        let v = x.matmul(&head.w_v)?;

        let mut probs = bias;
        if let (Some(q), Some(kk)) = (&q, &kk) {
            if !content_free {
                for i in 0..n {
                    let qi = q.row(i);
                    for j in 0..n {
                        let dot: T = qi.iter().zip(kk.row(j)).map(|(a, b)| *a * *b).sum();
                        let b = probs.get(i, j);
                        probs.set(i, j, dot * scale + b);
                    }
                }
            }
        }
        if !probs.is_finite() {
            return Err(Error::Numeric(format!("head {k} produced non-finite scores")));
        }
        for i in 0..n {
            softmax_in_place(&mut probs.as_mut_slice()[i * n..(i + 1) * n]);
        }

        let mut head_out = vec![T::zero(); n * dh];
        gemm_acc(probs.as_slice(), v.as_slice(), n, n, dh, &mut head_out);
        for i in 0..n {
            let dst = &mut concat.as_mut_slice()[i * w.num_heads() * dh + k * dh..][..dh];
            dst.copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
        }

        if keep_cache {
            cache_q.push(q.expect("cached"));
            cache_k.push(kk.expect("cached"));
            cache_v.push(v);
            cache_p.push(probs.clone());
        }
        if keep_trace {
            trace.push(probs);
        }
    }

    let out = concat.matmul(&w.w_o)?;
    if !out.is_finite() {
        return Err(Error::Numeric("MHSA output is non-finite".into()));
    }
    let out_seq = PatchSequence::new(grid, w.out_dim, out.into_vec())?;
    let trace = keep_trace.then_some(AttentionTrace { probs: trace });
    let cache = keep_cache.then_some(ForwardCache {
        x,
        q: cache_q,
        k: cache_k,
        v: cache_v,
        probs: cache_p,
        concat,
    });
    Ok((out_seq, trace, cache))
}
