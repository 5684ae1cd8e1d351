//! Reference stride-1, zero-padded "same" 2D convolution.

use crate::error::{arg_err, dim_err, Error, Result};
use crate::scalar::{all_finite, Real};
use crate::tensor::{Image, Matrix};

/// Default cap on `H·W·max(D_in, D_out)` for [`conv_as_linear_map`].
pub const DEFAULT_LINEAR_MAP_CAP: usize = 4096;

/// `K × K × D_in × D_out` convolution weights.
///
/// Kernel index `(x, y)` holds the weight for spatial offset
/// `(x − ⌊K/2⌋, y − ⌊K/2⌋)`; storage is row-major over `[x][y][i][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    size: usize,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(size: usize, in_channels: usize, out_channels: usize, weights: Vec<T>) -> Result<Self> {
        check_size(size)?;
        if in_channels == 0 || out_channels == 0 {
            return dim_err("kernel channel counts must be positive");
        }
        let expected = size * size * in_channels * out_channels;
        if weights.len() != expected {
            return dim_err(format!(
                "kernel {size}x{size}x{in_channels}x{out_channels} needs {expected} weights, got {}",
                weights.len()
            ));
        }
        if !all_finite(&weights) {
            return Err(Error::Numeric("kernel contains non-finite weights".into()));
        }
        Ok(Self {
            size,
            in_channels,
            out_channels,
            weights,
        })
    }

    pub fn zeros(size: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(
            size,
            in_channels,
            out_channels,
            vec![T::zero(); size * size * in_channels * out_channels],
        )
    }

    /// Kernel whose center tap maps channel `c` to channel `c`.
    pub fn identity(size: usize, channels: usize) -> Result<Self> {
        let mut k = Self::zeros(size, channels, channels)?;
        let h = size / 2;
        for c in 0..channels {
            k.set(h, h, c, c, T::one());
        }
        Ok(k)
    }

    pub fn from_fn(
        size: usize,
        in_channels: usize,
        out_channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut k = Self::zeros(size, in_channels, out_channels)?;
        for x in 0..size {
            for y in 0..size {
                for i in 0..in_channels {
                    for j in 0..out_channels {
                        k.set(x, y, i, j, f(x, y, i, j));
                    }
                }
            }
        }
        if !all_finite(&k.weights) {
            return Err(Error::Numeric("kernel contains non-finite weights".into()));
        }
        Ok(k)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn half(&self) -> usize {
        self.size / 2
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, i: usize, j: usize) -> usize {
        ((x * self.size + y) * self.in_channels + i) * self.out_channels + j
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, i: usize, j: usize) -> T {
        self.weights[self.index(x, y, i, j)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, i: usize, j: usize, v: T) {
        let idx = self.index(x, y, i, j);
        self.weights[idx] = v;
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            weights: self.weights.iter().map(|w| *w * s).collect(),
            ..self.clone()
        }
    }

    pub fn cast<U: Real>(&self) -> ConvKernel<U> {
        ConvKernel {
            size: self.size,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weights: self.weights.iter().map(|w| U::from_f64(w.as_f64())).collect(),
        }
    }
}

pub(crate) fn check_size(size: usize) -> Result<()> {
    if size == 0 {
        return arg_err("kernel size must be >= 1");
    }
    if size.is_multiple_of(2) {
        return arg_err("kernel size must be odd");
    }
    Ok(())
}

/// `out(i,j) = Σ_δ X(i+δ₁, j+δ₂) · W(δ)` with out-of-bounds pixels read as zero.
///
/// Summation runs over offsets row-major, then input channels.
pub fn conv2d<T: Real>(img: &Image<T>, kernel: &ConvKernel<T>) -> Result<Image<T>> {
    if img.channels() != kernel.in_channels() {
        return dim_err(format!(
            "image has {} channels, kernel expects {}",
            img.channels(),
            kernel.in_channels()
        ));
    }
    let (h, w, _) = img.dims();
    let k = kernel.size();
    let half = kernel.half() as isize;
    let d_in = kernel.in_channels();
    let d_out = kernel.out_channels();
    let mut out = Image::zeros(h, w, d_out);
    let mut acc = vec![T::zero(); d_out];
    for i in 0..h {
        for j in 0..w {
            acc.iter_mut().for_each(|a| *a = T::zero());
            for x in 0..k {
                let si = i as isize + x as isize - half;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for y in 0..k {
                    let sj = j as isize + y as isize - half;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let px = img.pixel(si as usize, sj as usize);
                    for (c, &xv) in px.iter().enumerate().take(d_in) {
                        let base = kernel.index(x, y, c, 0);
                        let taps = &kernel.weights()[base..base + d_out];
                        for (a, &wv) in acc.iter_mut().zip(taps) {
                            *a = *a + xv * wv;
                        }
                    }
                }
            }
            for (jo, a) in acc.iter().enumerate() {
                out.set(i, j, jo, *a);
            }
        }
    }
    Ok(out)
}

/// Dense matrix `M` with `vec(conv2d(X)) = M · vec(X)`, using the image storage
/// order for `vec`.
pub fn conv_as_linear_map<T: Real>(kernel: &ConvKernel<T>, height: usize, width: usize) -> Result<Matrix<T>> {
    conv_as_linear_map_with_cap(kernel, height, width, DEFAULT_LINEAR_MAP_CAP)
}

pub fn conv_as_linear_map_with_cap<T: Real>(
    kernel: &ConvKernel<T>,
    height: usize,
    width: usize,
    cap: usize,
) -> Result<Matrix<T>> {
    let d_in = kernel.in_channels();
    let d_out = kernel.out_channels();
    let size = height * width * d_in.max(d_out);
    if size > cap {
        return Err(Error::Capacity(format!(
            "H*W*max(D_in,D_out) = {size} exceeds the cap of {cap}"
        )));
    }
    if height == 0 || width == 0 {
        return dim_err("image dimensions must be positive");
    }
    let half = kernel.half() as isize;
    let k = kernel.size();
    let mut m = Matrix::zeros(height * width * d_out, height * width * d_in);
    for i in 0..height {
        for j in 0..width {
            for x in 0..k {
                let si = i as isize + x as isize - half;
                if si < 0 || si >= height as isize {
                    continue;
                }
                for y in 0..k {
                    let sj = j as isize + y as isize - half;
                    if sj < 0 || sj >= width as isize {
                        continue;
                    }
                    let src = (si as usize * width + sj as usize) * d_in;
                    let dst = (i * width + j) * d_out;
                    for c in 0..d_in {
                        for jo in 0..d_out {
                            m.set(dst + jo, src + c, kernel.get(x, y, c, jo));
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image<f64> {
        Image::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, k: usize, di: usize, dout: usize) -> ConvKernel<f64> {
        ConvKernel::from_fn(k, di, dout, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    // Straight quadruple loop over output pixel, output channel, offset, input channel.
    fn conv_oracle(x: &Image<f64>, w: &ConvKernel<f64>) -> Image<f64> {
        let (h, wd, _) = x.dims();
        let half = w.half() as i64;
        Image::from_fn(h, wd, w.out_channels(), |i, j, jo| {
            let mut s = 0.0;
            for d1 in -half..=half {
                for d2 in -half..=half {
                    let (a, b) = (i as i64 + d1, j as i64 + d2);
                    if a < 0 || b < 0 || a >= h as i64 || b >= wd as i64 {
                        continue;
                    }
                    for c in 0..w.in_channels() {
                        s += x.get(a as usize, b as usize, c)
                            * w.get((d1 + half) as usize, (d2 + half) as usize, c, jo);
                    }
                }
            }
            s
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 5, 7, 2);
        let k = ConvKernel::identity(3, 2).unwrap();
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 4, 4, 3);
        let k = ConvKernel::<f64>::zeros(5, 3, 2).unwrap();
        assert_eq!(conv2d(&x, &k).unwrap(), Image::zeros(4, 4, 2));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x = random_image(&mut rng, 6, 6, 2);
            let k = random_kernel(&mut rng, 3, 2, 3);
            let got = conv2d(&x, &k).unwrap();
            let want = conv_oracle(&x, &k);
            assert!(crate::max_abs_diff(got.as_slice(), want.as_slice()) <= 1e-12);
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let err = ConvKernel::<f64>::zeros(4, 1, 1).unwrap_err();
        assert!(err.to_string().contains("kernel size must be odd"));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Image::<f64>::zeros(3, 3, 2);
        let k = ConvKernel::<f64>::zeros(3, 1, 1).unwrap();
        assert!(matches!(conv2d(&x, &k), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_map_identity_and_zero() {
        let id = conv_as_linear_map(&ConvKernel::<f64>::identity(3, 2).unwrap(), 3, 4).unwrap();
        assert_eq!(id, Matrix::identity(24));
        let z = conv_as_linear_map(&ConvKernel::<f64>::zeros(3, 2, 1).unwrap(), 3, 4).unwrap();
        assert!(z.is_zero());
        assert_eq!(z.shape(), (12, 24));
    }

    #[test]
    fn linear_map_agrees_with_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random_kernel(&mut rng, 3, 2, 3);
        let m = conv_as_linear_map(&k, 4, 4).unwrap();
        for _ in 0..20 {
            let x = random_image(&mut rng, 4, 4, 2);
            let xv = Matrix::from_vec(32, 1, x.as_slice().to_vec()).unwrap();
            let y = m.matmul(&xv).unwrap();
            let want = conv2d(&x, &k).unwrap();
            assert!(crate::max_abs_diff(y.as_slice(), want.as_slice()) <= 1e-12);
        }
    }

    #[test]
    fn linear_map_capacity_guard() {
        let k = ConvKernel::<f64>::zeros(3, 4, 4).unwrap();
        assert!(matches!(
            conv_as_linear_map_with_cap(&k, 8, 8, 100),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_kernel(&mut rng, 5, 2, 2);
        for _ in 0..10 {
            let x = random_image(&mut rng, 7, 6, 2);
            let y = random_image(&mut rng, 7, 6, 2);
            let (a, b): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let lhs = conv2d(&x.axpby(a, &y, b).unwrap(), &k).unwrap();
            let rhs = conv2d(&x, &k)
                .unwrap()
                .axpby(a, &conv2d(&y, &k).unwrap(), b)
                .unwrap();
            assert!(crate::max_abs_diff(lhs.as_slice(), rhs.as_slice()) <= 1e-10);
        }
    }

    #[test]
    fn interior_translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = random_kernel(&mut rng, 3, 1, 2);
        let x = random_image(&mut rng, 8, 8, 1);
        // shifted(i, j) = x(i-1, j)
        let shifted = Image::from_fn(8, 8, 1, |i, j, c| if i == 0 { 0.0 } else { x.get(i - 1, j, c) });
        let a = conv2d(&x, &k).unwrap();
        let b = conv2d(&shifted, &k).unwrap();
        let half = k.half();
        for i in (half + 1)..(8 - half) {
            for j in half..(8 - half) {
                for c in 0..2 {
                    assert!((b.get(i, j, c) - a.get(i - 1, j, c)).abs() <= 1e-12);
                }
            }
        }
    }
}
