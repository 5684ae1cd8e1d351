//! Rank certificates for the head-count lower bounds.
//!
//! An MHSA layer with `N_H` heads can only realize kernel matrices of rank at
//! most `N_H`, so a kernel whose reshaped matrix keeps a nonzero tail beyond
//! the `N_H`-th singular value cannot be expressed. The best rank-`r`
//! approximation error is `sqrt(Σ_{i>r} σ_i²)`.

use nalgebra::DMatrix;

use crate::conv::ConvKernel;
use crate::error::{arg_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::Matrix;

/// Singular values above `RANK_THRESHOLD · σ₁` count toward the numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-9;

/// Relative residual above which a gap is certified.
pub const GAP_THRESHOLD: f64 = 1e-6;

/// `K² × d` matrix of a single-output kernel, one row per spatial offset.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelRankProblem {
    pub matrix: Matrix<f64>,
    pub kernel_size: usize,
    pub dim: usize,
}

/// `P⁴ × 9` matrix: row `p·P² + q` (query pixel `p` of the center patch, key
/// pixel `q`), column = neighbouring patch offset in `{−1,0,1}²` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRankProblem {
    pub matrix: Matrix<f64>,
    pub kernel_size: usize,
    pub patch: usize,
}

/// Singular spectrum with Eckart–Young residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct RankResult {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `residuals[r]` is the Frobenius error of the best rank-`r` approximation,
    /// for `r = 0..=min(rows, cols)`.
    pub residuals: Vec<f64>,
    pub rank: usize,
}

impl RankResult {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    /// Residual at rank `r`; zero beyond the matrix's smaller dimension.
    pub fn residual(&self, r: usize) -> f64 {
        self.residuals.get(r).copied().unwrap_or(0.0)
    }
}

pub fn build_pixel_rank_matrix<T: Real>(kernel: &ConvKernel<T>) -> Result<PixelRankProblem> {
    if kernel.out_channels() != 1 {
        return arg_err(format!(
            "pixel rank matrix needs D_out = 1, got {}",
            kernel.out_channels()
        ));
    }
    let k = kernel.size();
    let d = kernel.in_channels();
    let matrix = Matrix::from_fn(k * k, d, |row, i| kernel.get(row / k, row % k, i, 0).as_f64());
    Ok(PixelRankProblem {
        matrix,
        kernel_size: k,
        dim: d,
    })
}

pub fn build_patch_rank_matrix<T: Real>(kernel: &ConvKernel<T>, patch: usize) -> Result<PatchRankProblem> {
    if kernel.in_channels() != 1 || kernel.out_channels() != 1 {
        return arg_err("patch rank matrix needs D_in = D_out = 1");
    }
    let k = kernel.size();
    if k < 3 {
        return arg_err(format!("patch rank matrix needs K >= 3, got {k}"));
    }
    if k > patch {
        return arg_err(format!("patch rank matrix needs K <= P, got K={k}, P={patch}"));
    }
    let pp = patch * patch;
    let half = kernel.half() as isize;
    let p = patch as isize;
    let offsets: Vec<(isize, isize)> = (-1..=1).flat_map(|a| (-1..=1).map(move |b| (a, b))).collect();
    let matrix = Matrix::from_fn(pp * pp, offsets.len(), |row, col| {
        let (pq, kq) = (row / pp, row % pp);
        let (up, vp) = ((pq / patch) as isize, (pq % patch) as isize);
        let (uq, vq) = ((kq / patch) as isize, (kq % patch) as isize);
        let (rho, kappa) = offsets[col];
        let du = rho * p + uq - up;
        let dv = kappa * p + vq - vp;
        if du.abs() > half || dv.abs() > half {
            0.0
        } else {
            kernel.get((du + half) as usize, (dv + half) as usize, 0, 0).as_f64()
        }
    });
    Ok(PatchRankProblem {
        matrix,
        kernel_size: k,
        patch,
    })
}

/// Full SVD of `m` and the residual of every truncation rank.
pub fn rank_residuals(m: &Matrix<f64>) -> Result<RankResult> {
    if !m.is_finite() {
        return Err(Error::Numeric("rank analysis needs a finite matrix".into()));
    }
    let (rows, cols) = m.shape();
    let min = rows.min(cols);
    let mut singular_values: Vec<f64> = if min == 0 {
        Vec::new()
    } else {
        let dm = DMatrix::from_row_slice(rows, cols, m.as_slice());
        dm.singular_values().iter().copied().collect()
    };
    singular_values.sort_by(|a, b| b.total_cmp(a));

    let mut residuals = vec![0.0; min + 1];
    let mut tail = 0.0;
    for r in (0..min).rev() {
        tail += singular_values[r] * singular_values[r];
        residuals[r] = tail.sqrt();
    }
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let rank = if sigma_max == 0.0 {
        0
    } else {
        singular_values
            .iter()
            .filter(|s| **s > RANK_THRESHOLD * sigma_max)
            .count()
    };
    Ok(RankResult {
        singular_values,
        residuals,
        rank,
    })
}

/// Which reshaped kernel matrix a lower-bound check uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankSetting {
    Pixel,
    Patch { patch: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowerBoundReport {
    pub heads: usize,
    pub rank: usize,
    pub sigma_max: f64,
    /// Best rank-`heads` residual.
    pub residual: f64,
    /// `residual / σ₁`, zero for the zero matrix.
    pub relative_residual: f64,
    /// Whether no `heads`-head layer can express the kernel.
    pub certified_gap: bool,
}

/// Checks whether `heads` heads are provably too few for `kernel`.
pub fn verify_lower_bound<T: Real>(
    setting: RankSetting,
    kernel: &ConvKernel<T>,
    heads: usize,
) -> Result<LowerBoundReport> {
    let matrix = match setting {
        RankSetting::Pixel => build_pixel_rank_matrix(kernel)?.matrix,
        RankSetting::Patch { patch } => build_patch_rank_matrix(kernel, patch)?.matrix,
    };
    let result = rank_residuals(&matrix)?;
    let sigma_max = result.sigma_max();
    let residual = result.residual(heads);
    let relative_residual = if sigma_max > 0.0 { residual / sigma_max } else { 0.0 };
    Ok(LowerBoundReport {
        heads,
        rank: result.rank,
        sigma_max,
        residual,
        relative_residual,
        certified_gap: sigma_max > 0.0 && residual > GAP_THRESHOLD * sigma_max,
    })
}
