//! Dense containers and the pixel/patch bijection.
//!
//! An [`Image`] stores `H × W × C` values row-major with the channel index
//! fastest. A [`PatchSequence`] stores `N × d` tokens row-major, where token
//! `ℓ = g_h·G_w + g_w` is the patch at grid position `(g_h, g_w)` and feature
//! `s·C + c` is channel `c` of within-patch pixel `s = u·P + v`.

use crate::error::{dim_err, Error, Result};
use crate::scalar::{all_finite, Real};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| *v * s).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// `self · rhs`. Reduction order over the inner index is ascending.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return dim_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm_acc(
            &self.data,
            &rhs.data,
            self.rows,
            self.cols,
            rhs.cols,
            &mut out.data,
        );
        Ok(out)
    }
}

/// `out += a (m×k) · b (k×n)`, all row-major.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// Dense `H × W × C` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return dim_err(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            ));
        }
        if data.len() != height * width * channels {
            return dim_err(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        if !all_finite(&data) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image dimensions must be positive");
        Self {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    img.data[(i * width + j) * channels + c] = f(i, j, c);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> T {
        self.data[self.index(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: T) {
        let idx = self.index(i, j, c);
        self.data[idx] = v;
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[T] {
        let start = self.index(i, j, 0);
        &self.data[start..start + self.channels]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: T, other: &Image<T>, b: T) -> Result<Image<T>> {
        if self.dims() != other.dims() {
            return dim_err("axpby: image shapes differ");
        }
        Ok(Image {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * *x + b * *y)
                .collect(),
            ..self.clone()
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Patch grid of an image split into non-overlapping `P × P` patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGeometry {
    patch: usize,
    grid_rows: usize,
    grid_cols: usize,
}

impl PatchGeometry {
    /// Geometry of an `H × W` image cut into `P × P` patches.
    pub fn for_image(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::InvalidArgument("patch size must be >= 1".into()));
        }
        if height == 0 || width == 0 {
            return dim_err("image dimensions must be positive");
        }
        if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return dim_err(format!(
                "patch size {patch} does not divide image size {height}x{width}"
            ));
        }
        Ok(Self {
            patch,
            grid_rows: height / patch,
            grid_cols: width / patch,
        })
    }

    pub fn from_grid(grid_rows: usize, grid_cols: usize, patch: usize) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 || patch == 0 {
            return dim_err("patch grid dimensions must be positive");
        }
        Ok(Self {
            patch,
            grid_rows,
            grid_cols,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    /// Sequence length `N = G_h · G_w`.
    pub fn len(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_height(&self) -> usize {
        self.grid_rows * self.patch
    }

    pub fn image_width(&self) -> usize {
        self.grid_cols * self.patch
    }

    #[inline]
    pub fn token(&self, g_row: usize, g_col: usize) -> usize {
        g_row * self.grid_cols + g_col
    }

    #[inline]
    pub fn coords(&self, token: usize) -> (usize, usize) {
        (token / self.grid_cols, token % self.grid_cols)
    }

    /// Grid enlarged by `rings` patches on every side.
    pub fn padded(&self, rings: usize) -> Self {
        Self {
            patch: self.patch,
            grid_rows: self.grid_rows + 2 * rings,
            grid_cols: self.grid_cols + 2 * rings,
        }
    }
}

/// Position of an original grid inside a padded one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridWindow {
    pub row0: usize,
    pub col0: usize,
    pub original: PatchGeometry,
}

/// `N × d` token sequence over a patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T> {
    geometry: PatchGeometry,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> PatchSequence<T> {
    pub fn new(geometry: PatchGeometry, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.len() * dim {
            return dim_err(format!(
                "sequence of {} tokens x {dim} needs {} values, got {}",
                geometry.len(),
                geometry.len() * dim,
                data.len()
            ));
        }
        if !all_finite(&data) {
            return Err(Error::Numeric("sequence contains non-finite values".into()));
        }
        Ok(Self {
            geometry,
            dim,
            data,
        })
    }

    pub fn zeros(geometry: PatchGeometry, dim: usize) -> Self {
        Self {
            geometry,
            dim,
            data: vec![T::zero(); geometry.len() * dim],
        }
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, l: usize) -> &[T] {
        &self.data[l * self.dim..(l + 1) * self.dim]
    }

    pub fn token_mut(&mut self, l: usize) -> &mut [T] {
        &mut self.data[l * self.dim..(l + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

/// Cuts an image into row-major flattened patches.
pub fn patchify<T: Real>(img: &Image<T>, patch: usize) -> Result<PatchSequence<T>> {
    let geom = PatchGeometry::for_image(img.height(), img.width(), patch)?;
    let c = img.channels();
    let dim = patch * patch * c;
    let mut data = Vec::with_capacity(geom.len() * dim);
    for gr in 0..geom.grid_rows() {
        for gc in 0..geom.grid_cols() {
            for u in 0..patch {
                for v in 0..patch {
                    data.extend_from_slice(img.pixel(gr * patch + u, gc * patch + v));
                }
            }
        }
    }
    Ok(PatchSequence {
        geometry: geom,
        dim,
        data,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Real>(seq: &PatchSequence<T>, channels: usize) -> Result<Image<T>> {
    let geom = seq.geometry();
    let p = geom.patch();
    if channels == 0 || seq.dim() != p * p * channels {
        return dim_err(format!(
            "token dimension {} is not P^2*C = {}*{}",
            seq.dim(),
            p * p,
            channels
        ));
    }
    let mut img = Image::zeros(geom.image_height(), geom.image_width(), channels);
    for l in 0..geom.len() {
        let (gr, gc) = geom.coords(l);
        let tok = seq.token(l);
        for u in 0..p {
            for v in 0..p {
                let s = u * p + v;
                let start = img.index(gr * p + u, gc * p + v, 0);
                img.data[start..start + channels]
                    .copy_from_slice(&tok[s * channels..(s + 1) * channels]);
            }
        }
    }
    Ok(img)
}

/// Surrounds the grid with `rings` rings of all-zero tokens.
pub fn pad_patch_grid<T: Real>(
    seq: &PatchSequence<T>,
    rings: usize,
) -> (PatchSequence<T>, GridWindow) {
    let original = seq.geometry();
    let window = GridWindow {
        row0: rings,
        col0: rings,
        original,
    };
    if rings == 0 {
        return (seq.clone(), window);
    }
    let padded = original.padded(rings);
    let mut out = PatchSequence::zeros(padded, seq.dim());
    for l in 0..original.len() {
        let (gr, gc) = original.coords(l);
        let dst = padded.token(gr + rings, gc + rings);
        out.token_mut(dst).copy_from_slice(seq.token(l));
    }
    (out, window)
}

/// Extracts the tokens of `window` from a padded sequence of any token width.
pub fn crop_patch_grid<T: Real>(
    seq: &PatchSequence<T>,
    window: &GridWindow,
) -> Result<PatchSequence<T>> {
    let g = seq.geometry();
    let orig = window.original;
    if window.row0 + orig.grid_rows() > g.grid_rows()
        || window.col0 + orig.grid_cols() > g.grid_cols()
    {
        return dim_err("crop window exceeds the padded grid");
    }
    let mut out = PatchSequence::zeros(orig, seq.dim());
    for l in 0..orig.len() {
        let (gr, gc) = orig.coords(l);
        let src = g.token(gr + window.row0, gc + window.col0);
        out.token_mut(l).copy_from_slice(seq.token(src));
    }
    Ok(out)
}
