//! Builds an MHSA layer that computes exactly the same function as a given
//! convolution on patch input.
//!
//! Every head gets `W^Q = W^K = 0` and a relative bias that is `M` at one
//! patch offset and zero elsewhere, so its softmax is (numerically) one-hot on
//! the key patch at that offset. With `W^V = I`, the concatenated head outputs
//! of query patch `q` are the tokens of all patches `q + δ`, `δ ∈ {−R..R}²`,
//! and `W^O` applies the kernel to that neighbourhood.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    mhsa_forward_with_biases, AttentionHead, AttentionTrace, MhsaWeights, RelativeBiasTable,
};
use crate::conv::{check_size, ConvKernel};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::{
    crop_patch_grid, pad_patch_grid, patchify, unpatchify, Image, Matrix, PatchGeometry,
};

/// Bias scale used when none is given.
pub const DEFAULT_BIAS_SCALE: f64 = 40.0;

/// How the converted layer treats patches whose receptive field leaves the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    /// Surround the grid with `R` rings of zero tokens before attending and
    /// crop afterwards; reproduces zero-padded convolution everywhere.
    #[default]
    Phantom,
    /// Attend over the bare grid; exact only on interior patches.
    Strict,
}

impl BoundaryMode {
    pub fn name(self) -> &'static str {
        match self {
            BoundaryMode::Phantom => "phantom",
            BoundaryMode::Strict => "strict",
        }
    }
}

impl fmt::Display for BoundaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoundaryMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "phantom" => Ok(BoundaryMode::Phantom),
            "strict" => Ok(BoundaryMode::Strict),
            other => Err(format!("unknown boundary mode {other:?} (expected phantom or strict)")),
        }
    }
}

/// `R = ⌈(K−1)/(2P)⌉`, the patch-level reach of a `K × K` kernel.
pub fn ring_radius(kernel_size: usize, patch: usize) -> Result<usize> {
    check_size(kernel_size)?;
    if patch == 0 {
        return arg_err("patch size must be >= 1");
    }
    Ok((kernel_size - 1).div_ceil(2 * patch))
}

/// Number of heads the construction uses: `(2⌈(K−1)/(2P)⌉ + 1)²`.
pub fn head_count(kernel_size: usize, patch: usize) -> Result<usize> {
    let r = ring_radius(kernel_size, patch)?;
    Ok((2 * r + 1) * (2 * r + 1))
}

/// Patch offsets of the receptive field, row-major over `{−R..R}²`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetSet {
    radius: usize,
    offsets: Vec<(isize, isize)>,
}

impl OffsetSet {
    pub fn new(kernel_size: usize, patch: usize) -> Result<Self> {
        Ok(Self::with_radius(ring_radius(kernel_size, patch)?))
    }

    pub fn with_radius(radius: usize) -> Self {
        let r = radius as isize;
        let offsets = (-r..=r).flat_map(|a| (-r..=r).map(move |b| (a, b))).collect();
        Self { radius, offsets }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Bias table that makes a head attend from every query patch to the key
/// patch at `target` (key = query + target).
///
/// The table is indexed by query − key, so the scale `M` sits at `−target`.
/// Targets outside the grid leave the table all-zero.
pub fn build_hard_bias<T: Real>(
    target: (isize, isize),
    grid: PatchGeometry,
    bias_scale: f64,
) -> Result<RelativeBiasTable<T>> {
    if !bias_scale.is_finite() || bias_scale < 0.0 {
        return arg_err(format!("bias scale must be finite and >= 0, got {bias_scale}"));
    }
    let mut table = RelativeBiasTable::zeros_for_grid(grid);
    table.set(-target.0, -target.1, T::from_f64(bias_scale));
    Ok(table)
}

/// `W^O` mapping the concatenated neighbourhood tokens to the output patch.
///
/// Row `r·d + s·D_in + i`, column `t·D_out + j` holds `W^C[x][y][i][j]` when
/// key pixel `s` of the patch at offset `δ_r` is within the kernel's reach of
/// query pixel `t`, and zero otherwise.
pub fn build_output_projection<T: Real>(kernel: &ConvKernel<T>, patch: usize) -> Result<Matrix<T>> {
    let offsets = OffsetSet::new(kernel.size(), patch)?;
    let d_in = kernel.in_channels();
    let d_out = kernel.out_channels();
    let pp = patch * patch;
    let d = pp * d_in;
    let half = kernel.half() as isize;
    let p = patch as isize;
    let mut w_o = Matrix::zeros(offsets.len() * d, pp * d_out);
    for (r, &(rho, kappa)) in offsets.offsets().iter().enumerate() {
        for s in 0..pp {
            let (us, vs) = ((s / patch) as isize, (s % patch) as isize);
            for t in 0..pp {
                let (ut, vt) = ((t / patch) as isize, (t % patch) as isize);
                let du = rho * p + us - ut;
                let dv = kappa * p + vs - vt;
                if du.abs() > half || dv.abs() > half {
                    continue;
                }
                let (x, y) = ((du + half) as usize, (dv + half) as usize);
                for i in 0..d_in {
                    for j in 0..d_out {
                        w_o.set(r * d + s * d_in + i, t * d_out + j, kernel.get(x, y, i, j));
                    }
                }
            }
        }
    }
    Ok(w_o)
}

/// MHSA layer produced from a convolution, plus what is needed to evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvertedModel<T> {
    weights: MhsaWeights<T>,
    patch: usize,
    kernel_size: usize,
    in_channels: usize,
    out_channels: usize,
    bias_scale: f64,
    boundary: BoundaryMode,
    offsets: OffsetSet,
}

impl<T: Real> ConvertedModel<T> {
    /// Reassembles a model and checks every structural invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        weights: MhsaWeights<T>,
        patch: usize,
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        bias_scale: f64,
        boundary: BoundaryMode,
    ) -> Result<Self> {
        let offsets = OffsetSet::new(kernel_size, patch)?;
        let inv = |msg: String| Err(Error::Invariant(msg));
        if weights.num_heads() != offsets.len() {
            return inv(format!(
                "N_H = {} but K={kernel_size}, P={patch} requires {}",
                weights.num_heads(),
                offsets.len()
            ));
        }
        let d = patch * patch * in_channels;
        if weights.dim() != d || weights.head_dim() != d {
            return inv(format!(
                "d = {}, d_H = {}; expected both = P^2*D_in = {d}",
                weights.dim(),
                weights.head_dim()
            ));
        }
        if weights.out_dim() != patch * patch * out_channels {
            return inv(format!(
                "d_O = {}, expected P^2*D_out = {}",
                weights.out_dim(),
                patch * patch * out_channels
            ));
        }
        if weights.heads().iter().any(|h| !h.w_q.is_zero() || !h.w_k.is_zero()) {
            return inv("converted layers must have W^Q = W^K = 0".into());
        }
        if !bias_scale.is_finite() || bias_scale < 0.0 {
            return inv(format!("bias scale {bias_scale} is not a finite non-negative number"));
        }
        Ok(Self {
            weights,
            patch,
            kernel_size,
            in_channels,
            out_channels,
            bias_scale,
            boundary,
            offsets,
        })
    }

    pub fn weights(&self) -> &MhsaWeights<T> {
        &self.weights
    }

    pub fn into_weights(self) -> MhsaWeights<T> {
        self.weights
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn bias_scale(&self) -> f64 {
        self.bias_scale
    }

    pub fn boundary(&self) -> BoundaryMode {
        self.boundary
    }

    pub fn offsets(&self) -> &OffsetSet {
        &self.offsets
    }

    pub fn num_heads(&self) -> usize {
        self.weights.num_heads()
    }

    /// Rings of phantom tokens added before attending.
    pub fn padding_rings(&self) -> usize {
        match self.boundary {
            BoundaryMode::Phantom => self.offsets.radius(),
            BoundaryMode::Strict => 0,
        }
    }

    /// Hard-attention tables of every head, sized for `grid`.
    pub fn bias_tables_for(&self, grid: PatchGeometry) -> Result<Vec<RelativeBiasTable<T>>> {
        self.offsets
            .offsets()
            .iter()
            .map(|&o| build_hard_bias(o, grid, self.bias_scale))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ConvertedModel<U> {
        ConvertedModel {
            weights: self.weights.cast(),
            patch: self.patch,
            kernel_size: self.kernel_size,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            bias_scale: self.bias_scale,
            boundary: self.boundary,
            offsets: self.offsets.clone(),
        }
    }
}

/// Converts a convolution into an equivalent MHSA layer over `P × P` patches.
pub fn conv_to_mhsa<T: Real>(
    kernel: &ConvKernel<T>,
    patch: usize,
    bias_scale: f64,
    boundary: BoundaryMode,
) -> Result<ConvertedModel<T>> {
    let offsets = OffsetSet::new(kernel.size(), patch)?;
    let d = patch * patch * kernel.in_channels();
    let r = offsets.radius();
    // Smallest grid whose tables hold every offset in {−R..R}².
    let compact = PatchGeometry::from_grid(r + 1, r + 1, patch)?;
    let heads = offsets
        .offsets()
        .iter()
        .map(|&o| {
            Ok(AttentionHead {
                w_q: Matrix::zeros(d, d),
                w_k: Matrix::zeros(d, d),
                w_v: Matrix::identity(d),
                bias: build_hard_bias(o, compact, bias_scale)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let w_o = build_output_projection(kernel, patch)?;
    let weights = MhsaWeights::new(heads, w_o)?;
    ConvertedModel::from_parts(
        weights,
        patch,
        kernel.size(),
        kernel.in_channels(),
        kernel.out_channels(),
        bias_scale,
        boundary,
    )
}

/// Result of a traced evaluation.
#[derive(Clone, Debug)]
pub struct ConvertedTrace<T> {
    pub output: Image<T>,
    /// Attention matrices over the grid actually attended (padded in phantom mode).
    pub attention: AttentionTrace<T>,
    pub attended_grid: PatchGeometry,
}

/// patchify → phantom-pad → MHSA → crop → unpatchify.
pub fn evaluate_converted<T: Real>(model: &ConvertedModel<T>, img: &Image<T>) -> Result<Image<T>> {
    Ok(evaluate_impl(model, img, false)?.0)
}

pub fn evaluate_converted_traced<T: Real>(
    model: &ConvertedModel<T>,
    img: &Image<T>,
) -> Result<ConvertedTrace<T>> {
    let (output, attention, attended_grid) = evaluate_impl(model, img, true)?;
    Ok(ConvertedTrace {
        output,
        attention: attention.expect("trace requested"),
        attended_grid,
    })
}

fn evaluate_impl<T: Real>(
    model: &ConvertedModel<T>,
    img: &Image<T>,
    trace: bool,
) -> Result<(Image<T>, Option<AttentionTrace<T>>, PatchGeometry)> {
    if img.channels() != model.in_channels {
        return dim_err(format!(
            "image has {} channels, model expects {}",
            img.channels(),
            model.in_channels
        ));
    }
    let seq = patchify(img, model.patch)?;
    let (padded, window) = pad_patch_grid(&seq, model.padding_rings());
    let grid = padded.geometry();
    let tables = model.bias_tables_for(grid)?;
    let refs: Vec<&RelativeBiasTable<T>> = tables.iter().collect();
    let (out, attention) = mhsa_forward_with_biases(&padded, &model.weights, &refs, trace)?;
    let cropped = crop_patch_grid(&out, &window)?;
    Ok((unpatchify(&cropped, model.out_channels)?, attention, grid))
}

/// Patches at grid distance ≥ `radius` from every edge (row-major token order).
pub fn interior_patches(grid: PatchGeometry, radius: usize) -> Vec<bool> {
    (0..grid.len())
        .map(|l| {
            let (r, c) = grid.coords(l);
            r >= radius
                && c >= radius
                && r + radius < grid.grid_rows()
                && c + radius < grid.grid_cols()
        })
        .collect()
}

/// Largest absolute difference between two images, optionally restricted to
/// pixels of interior patches.
pub fn image_max_abs_diff<T: Real>(
    a: &Image<T>,
    b: &Image<T>,
    interior: Option<(usize, usize)>,
) -> Result<f64> {
    if a.dims() != b.dims() {
        return dim_err("image shapes differ");
    }
    let mask = match interior {
        Some((patch, radius)) => {
            let grid = PatchGeometry::for_image(a.height(), a.width(), patch)?;
            Some((grid, interior_patches(grid, radius), patch))
        }
        None => None,
    };
    let mut best = 0.0f64;
    for i in 0..a.height() {
        for j in 0..a.width() {
            if let Some((grid, m, p)) = &mask {
                if !m[grid.token(i / p, j / p)] {
                    continue;
                }
            }
            for c in 0..a.channels() {
                best = best.max((a.get(i, j, c).as_f64() - b.get(i, j, c).as_f64()).abs());
            }
        }
    }
    Ok(best)
}
