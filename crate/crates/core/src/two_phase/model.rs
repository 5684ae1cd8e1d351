//! One-layer classifiers: features → global average pooling → linear → softmax
//! cross-entropy, with exact reverse-mode gradients.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{mhsa_forward_cached, ForwardCache, MhsaWeights};
use crate::construction::{conv_to_mhsa, BoundaryMode};
use crate::conv::{conv2d, ConvKernel};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::{crop_patch_grid, pad_patch_grid, patchify, Image, Matrix, PatchGeometry};

/// Logical parameter groups that a training phase may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Kernel,
    Wq,
    Wk,
    Wv,
    Wo,
    Bias,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Kernel,
        ParamGroup::Wq,
        ParamGroup::Wk,
        ParamGroup::Wv,
        ParamGroup::Wo,
        ParamGroup::Bias,
        ParamGroup::Classifier,
    ];
}

pub type TrainableMask = BTreeSet<ParamGroup>;

pub fn full_mask() -> TrainableMask {
    ParamGroup::ALL.into_iter().collect()
}

/// Identifies one parameter tensor of a classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamId {
    Kernel,
    Query(usize),
    Key(usize),
    Value(usize),
    Output,
    Bias(usize),
    ClassifierWeight,
    ClassifierBias,
}

impl ParamId {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamId::Kernel => ParamGroup::Kernel,
            ParamId::Query(_) => ParamGroup::Wq,
            ParamId::Key(_) => ParamGroup::Wk,
            ParamId::Value(_) => ParamGroup::Wv,
            ParamId::Output => ParamGroup::Wo,
            ParamId::Bias(_) => ParamGroup::Bias,
            ParamId::ClassifierWeight | ParamId::ClassifierBias => ParamGroup::Classifier,
        }
    }
}

/// Gradient tensors, in the same order as [`Classifier::params`], restricted
/// to the trainable mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.tensors.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }
}

/// `D_out × classes` linear layer applied to pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LinearHead<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return dim_err("classifier bias length must equal the number of classes");
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(features, classes),
            bias: vec![T::zero(); classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn apply(&self, pooled: &[T]) -> Vec<T> {
        let mut z = self.bias.clone();
        for (f, &g) in pooled.iter().enumerate() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = *zc + g * self.weight.get(f, c);
            }
        }
        z
    }

    /// Accumulates head gradients and returns `∂loss/∂pooled`.
    fn backward(&self, pooled: &[T], dz: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
        let classes = self.num_classes();
        for (f, &g) in pooled.iter().enumerate() {
            for (c, &d) in dz.iter().enumerate() {
                dw[f * classes + c] = dw[f * classes + c] + g * d;
            }
        }
        for (b, &d) in db.iter_mut().zip(dz) {
            *b = *b + d;
        }
        (0..pooled.len())
            .map(|f| dz.iter().enumerate().map(|(c, &d)| self.weight.get(f, c) * d).sum())
            .collect()
    }
}

/// Mean cross-entropy and per-sample logits of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub logits: Vec<Vec<T>>,
}

/// Borrowed minibatch.
#[derive(Clone, Debug)]
pub struct Batch<'a, T> {
    pub images: Vec<&'a Image<T>>,
    pub labels: Vec<usize>,
}

impl<'a, T> Batch<'a, T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shared interface for both classifier variants.
pub trait Classifier<T: Real> {
    fn num_classes(&self) -> usize;

    fn logits(&self, img: &Image<T>) -> Result<Vec<T>>;

    /// Adds `scale · ∂loss(img, label)/∂θ` into `grads` (laid out as
    /// [`Classifier::params`]) and returns the sample loss.
    fn accumulate_grad(&self, img: &Image<T>, label: usize, scale: T, grads: &mut [Vec<T>]) -> Result<T>;

    fn params(&self) -> Vec<(ParamId, &[T])>;

    fn params_mut(&mut self) -> Vec<(ParamId, &mut [T])>;
}

fn log_softmax_ce<T: Real>(z: &[T], label: usize) -> (T, Vec<T>) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = z.iter().map(|v| (*v - max).exp()).sum();
    let lse = max + sum.ln();
    let probs: Vec<T> = z.iter().map(|v| (*v - lse).exp()).collect();
    (lse - z[label], probs)
}

fn check_label<T: Real>(model: &impl Classifier<T>, label: usize) -> Result<()> {
    if label >= model.num_classes() {
        return dim_err(format!("label {label} out of range for {} classes", model.num_classes()));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch.
pub fn forward_loss<T: Real, M: Classifier<T>>(model: &M, batch: &Batch<'_, T>) -> Result<LossOutput<T>> {
    if batch.images.len() != batch.labels.len() || batch.is_empty() {
        return dim_err("batch must be non-empty with one label per image");
    }
    let mut total = T::zero();
    let mut logits = Vec::with_capacity(batch.len());
    for (img, &label) in batch.images.iter().zip(&batch.labels) {
        check_label(model, label)?;
        let z = model.logits(img)?;
        total = total + log_softmax_ce(&z, label).0;
        logits.push(z);
    }
    Ok(LossOutput {
        loss: total / T::from_f64(batch.len() as f64),
        logits,
    })
}

/// Gradient of the mean batch loss for every parameter whose group is in `mask`.
pub fn backward<T: Real, M: Classifier<T>>(
    model: &M,
    batch: &Batch<'_, T>,
    mask: &TrainableMask,
) -> Result<(T, Gradients<T>)> {
    if batch.images.len() != batch.labels.len() || batch.is_empty() {
        return dim_err("batch must be non-empty with one label per image");
    }
    let mut grads: Vec<Vec<T>> = model
        .params()
        .iter()
        .map(|(_, p)| vec![T::zero(); p.len()])
        .collect();
    let scale = T::one() / T::from_f64(batch.len() as f64);
    let mut total = T::zero();
    for (img, &label) in batch.images.iter().zip(&batch.labels) {
        check_label(model, label)?;
        total = total + model.accumulate_grad(img, label, scale, &mut grads)?;
    }
    let tensors = model
        .params()
        .iter()
        .map(|(id, _)| *id)
        .zip(grads)
        .filter(|(id, _)| mask.contains(&id.group()))
        .collect();
    Ok((total * scale, Gradients { tensors }))
}

/// Convolution → GAP → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvClassifier<T> {
    pub kernel: ConvKernel<T>,
    pub head: LinearHead<T>,
}

impl<T: Real> ConvClassifier<T> {
    pub fn new(kernel: ConvKernel<T>, head: LinearHead<T>) -> Result<Self> {
        if head.weight.rows() != kernel.out_channels() {
            return dim_err("classifier rows must equal the kernel's output channels");
        }
        Ok(Self { kernel, head })
    }

    /// Gaussian initialization with fan-in scaling.
    pub fn init<R: Rng>(
        rng: &mut R,
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        classes: usize,
    ) -> Result<Self> {
        let ks = Normal::new(0.0, (1.0 / (kernel_size * kernel_size * in_channels) as f64).sqrt())
            .expect("positive std");
        let hs = Normal::new(0.0, (1.0 / out_channels as f64).sqrt()).expect("positive std");
        let kernel = ConvKernel::from_fn(kernel_size, in_channels, out_channels, |_, _, _, _| {
            T::from_f64(ks.sample(rng))
        })?;
        let weight = Matrix::from_fn(out_channels, classes, |_, _| T::from_f64(hs.sample(rng)));
        Self::new(kernel, LinearHead::new(weight, vec![T::zero(); classes])?)
    }

    fn pooled(features: &Image<T>) -> Vec<T> {
        let (h, w, c) = features.dims();
        let inv = T::one() / T::from_f64((h * w) as f64);
        let mut g = vec![T::zero(); c];
        for px in features.as_slice().chunks(c) {
            for (gi, v) in g.iter_mut().zip(px) {
                *gi = *gi + *v;
            }
        }
        g.iter().map(|v| *v * inv).collect()
    }
}

impl<T: Real> Classifier<T> for ConvClassifier<T> {
    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn logits(&self, img: &Image<T>) -> Result<Vec<T>> {
        Ok(self.head.apply(&Self::pooled(&conv2d(img, &self.kernel)?)))
    }

    fn accumulate_grad(&self, img: &Image<T>, label: usize, scale: T, grads: &mut [Vec<T>]) -> Result<T> {
        let pooled = Self::pooled(&conv2d(img, &self.kernel)?);
        let z = self.head.apply(&pooled);
        let (loss, probs) = log_softmax_ce(&z, label);
        let dz: Vec<T> = probs
            .iter()
            .enumerate()
            .map(|(c, p)| (*p - if c == label { T::one() } else { T::zero() }) * scale)
            .collect();
        let (gk, rest) = grads.split_at_mut(1);
        let (gw, gb) = rest.split_at_mut(1);
        let dpooled = self.head.backward(&pooled, &dz, &mut gw[0], &mut gb[0]);

        // Every output pixel receives dpooled / (H·W); the kernel gradient is
        // that times the sum of in-bounds inputs at each offset.
        let (h, w, _) = img.dims();
        let k = self.kernel.size();
        let half = self.kernel.half();
        let inv = T::one() / T::from_f64((h * w) as f64);
        let d_in = self.kernel.in_channels();
        for x in 0..k {
            for y in 0..k {
                // Inputs X(i + x − half, j + y − half) over in-bounds (i, j).
                let (i_lo, i_hi) = (half.saturating_sub(x), (h + half).saturating_sub(x).min(h));
                let (j_lo, j_hi) = (half.saturating_sub(y), (w + half).saturating_sub(y).min(w));
                let mut sums = vec![T::zero(); d_in];
                for i in i_lo..i_hi {
                    for j in j_lo..j_hi {
                        let px = img.pixel(i + x - half, j + y - half);
                        for (s, v) in sums.iter_mut().zip(px) {
                            *s = *s + *v;
                        }
                    }
                }
                for (ci, s) in sums.iter().enumerate() {
                    for (jo, dp) in dpooled.iter().enumerate() {
                        let idx = self.kernel.index(x, y, ci, jo);
                        gk[0][idx] = gk[0][idx] + *s * *dp * inv;
                    }
                }
            }
        }
        Ok(loss)
    }

    fn params(&self) -> Vec<(ParamId, &[T])> {
        vec![
            (ParamId::Kernel, self.kernel.weights()),
            (ParamId::ClassifierWeight, self.head.weight.as_slice()),
            (ParamId::ClassifierBias, &self.head.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(ParamId, &mut [T])> {
        vec![
            (ParamId::Kernel, self.kernel.weights_mut()),
            (ParamId::ClassifierWeight, self.head.weight.as_mut_slice()),
            (ParamId::ClassifierBias, &mut self.head.bias),
        ]
    }
}

/// Patchify → (phantom pad) → MHSA → crop → GAP → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnClassifier<T> {
    pub mhsa: MhsaWeights<T>,
    pub head: LinearHead<T>,
    pub patch: usize,
    pub boundary: BoundaryMode,
    /// Rings of zero tokens added around the grid before attention.
    pub rings: usize,
}

impl<T: Real> AttnClassifier<T> {
    pub fn new(
        mhsa: MhsaWeights<T>,
        head: LinearHead<T>,
        patch: usize,
        boundary: BoundaryMode,
        rings: usize,
    ) -> Result<Self> {
        let pp = patch * patch;
        if patch == 0 || !mhsa.out_dim().is_multiple_of(pp) || !mhsa.dim().is_multiple_of(pp) {
            return dim_err("MHSA input and output widths must be multiples of P^2");
        }
        if head.weight.rows() != mhsa.out_dim() / pp {
            return dim_err("classifier rows must equal the MHSA output channels");
        }
        if boundary == BoundaryMode::Strict && rings != 0 {
            return Err(Error::Invariant("strict boundary mode uses no phantom rings".into()));
        }
        Ok(Self {
            mhsa,
            head,
            patch,
            boundary,
            rings,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.mhsa.dim() / (self.patch * self.patch)
    }

    pub fn out_channels(&self) -> usize {
        self.mhsa.out_dim() / (self.patch * self.patch)
    }

    /// Cropped output tokens and (when `cache`) the forward cache.
    fn features(&self, img: &Image<T>) -> Result<(Vec<T>, PatchGeometry, PatchGeometry, ForwardCache<T>)> {
        if img.channels() != self.in_channels() {
            return dim_err(format!(
                "image has {} channels, model expects {}",
                img.channels(),
                self.in_channels()
            ));
        }
        let seq = patchify(img, self.patch)?;
        let (padded, window) = pad_patch_grid(&seq, self.rings);
        let (out, cache) = mhsa_forward_cached(&padded, &self.mhsa)?;
        let cropped = crop_patch_grid(&out, &window)?;
        Ok((cropped.into_vec(), seq.geometry(), padded.geometry(), cache))
    }

    fn pooled(&self, tokens: &[T], n: usize) -> Vec<T> {
        let dout = self.out_channels();
        let inv = T::one() / T::from_f64((n * self.patch * self.patch) as f64);
        let mut g = vec![T::zero(); dout];
        for px in tokens.chunks(dout) {
            for (gi, v) in g.iter_mut().zip(px) {
                *gi = *gi + *v;
            }
        }
        g.iter().map(|v| *v * inv).collect()
    }
}

impl<T: Real> Classifier<T> for AttnClassifier<T> {
    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn logits(&self, img: &Image<T>) -> Result<Vec<T>> {
        let (tokens, grid, _, _) = self.features(img)?;
        Ok(self.head.apply(&self.pooled(&tokens, grid.len())))
    }

    fn accumulate_grad(&self, img: &Image<T>, label: usize, scale: T, grads: &mut [Vec<T>]) -> Result<T> {
        let (tokens, grid, padded, cache) = self.features(img)?;
        let pooled = self.pooled(&tokens, grid.len());
        let z = self.head.apply(&pooled);
        let (loss, probs) = log_softmax_ce(&z, label);
        let dz: Vec<T> = probs
            .iter()
            .enumerate()
            .map(|(c, p)| (*p - if c == label { T::one() } else { T::zero() }) * scale)
            .collect();

        let nh = self.mhsa.num_heads();
        // Parameter layout: per head (q, k, v, bias), then W^O, classifier W, b.
        let base = 4 * nh;
        let (head_grads, rest) = grads.split_at_mut(base);
        let (g_wo, rest) = rest.split_at_mut(1);
        let (g_w, g_b) = rest.split_at_mut(1);
        let dpooled = self.head.backward(&pooled, &dz, &mut g_w[0], &mut g_b[0]);

        // ∂loss/∂out on the padded grid; phantom tokens are cropped away.
        let np = padded.len();
        let d_o = self.mhsa.out_dim();
        let dout = self.out_channels();
        let inv = T::one() / T::from_f64((grid.len() * self.patch * self.patch) as f64);
        let mut d_out_tok = Matrix::zeros(np, d_o);
        for l in 0..grid.len() {
            let (r, c) = grid.coords(l);
            let pl = padded.token(r + self.rings, c + self.rings);
            for f in 0..d_o {
                d_out_tok.set(pl, f, dpooled[f % dout] * inv);
            }
        }
        mhsa_backward(&self.mhsa, &cache, padded, &d_out_tok, head_grads, &mut g_wo[0])?;
        Ok(loss)
    }

    fn params(&self) -> Vec<(ParamId, &[T])> {
        let mut out = Vec::new();
        for (k, h) in self.mhsa.heads().iter().enumerate() {
            out.push((ParamId::Query(k), h.w_q.as_slice()));
            out.push((ParamId::Key(k), h.w_k.as_slice()));
            out.push((ParamId::Value(k), h.w_v.as_slice()));
            out.push((ParamId::Bias(k), h.bias.values()));
        }
        out.push((ParamId::Output, self.mhsa.w_o().as_slice()));
        out.push((ParamId::ClassifierWeight, self.head.weight.as_slice()));
        out.push((ParamId::ClassifierBias, self.head.bias.as_slice()));
        out
    }

    fn params_mut(&mut self) -> Vec<(ParamId, &mut [T])> {
        let mut out: Vec<(ParamId, &mut [T])> = Vec::new();
        let (hs, wo) = self.mhsa.split_params_mut();
        for (k, h) in hs.iter_mut().enumerate() {
            out.push((ParamId::Query(k), h.w_q.as_mut_slice()));
            out.push((ParamId::Key(k), h.w_k.as_mut_slice()));
            out.push((ParamId::Value(k), h.w_v.as_mut_slice()));
            out.push((ParamId::Bias(k), h.bias.values_mut()));
        }
        out.push((ParamId::Output, wo.as_mut_slice()));
        out.push((ParamId::ClassifierWeight, self.head.weight.as_mut_slice()));
        out.push((ParamId::ClassifierBias, self.head.bias.as_mut_slice()));
        out
    }
}

/// Reverse pass of one MHSA forward, accumulating into `head_grads`
/// (`[W^Q_k, W^K_k, W^V_k, b_k]` per head) and `g_wo`.
fn mhsa_backward<T: Real>(
    w: &MhsaWeights<T>,
    cache: &ForwardCache<T>,
    grid: PatchGeometry,
    d_out: &Matrix<T>,
    head_grads: &mut [Vec<T>],
    g_wo: &mut [T],
) -> Result<()> {
    let n = grid.len();
    let dh = w.head_dim();
    let nh = w.num_heads();
    let scale = T::one() / T::from_f64(w.dim() as f64).sqrt();

    let dwo = cache.concat.transpose().matmul(d_out)?;
    for (g, v) in g_wo.iter_mut().zip(dwo.as_slice()) {
        *g = *g + *v;
    }
    let d_concat = d_out.matmul(&w.w_o().transpose())?;
    let xt = cache.x.transpose();

    for k in 0..nh {
        let d_head = Matrix::from_fn(n, dh, |i, c| d_concat.get(i, k * dh + c));
        let p = &cache.probs[k];
        let v = &cache.v[k];
        let dv = p.transpose().matmul(&d_head)?;
        let dp = d_head.matmul(&v.transpose())?;
        let mut ds = Matrix::zeros(n, n);
        for i in 0..n {
            let dot: T = (0..n).map(|j| p.get(i, j) * dp.get(i, j)).sum();
            for j in 0..n {
                ds.set(i, j, p.get(i, j) * (dp.get(i, j) - dot));
            }
        }
        let table = &w.heads()[k].bias;
        let g_bias = &mut head_grads[4 * k + 3];
        for i in 0..n {
            let (xi, yi) = grid.coords(i);
            for j in 0..n {
                let (xj, yj) = grid.coords(j);
                let slot = table
                    .slot(xi as isize - xj as isize, yi as isize - yj as isize)
                    .expect("forward pass checked coverage");
                g_bias[slot] = g_bias[slot] + ds.get(i, j);
            }
        }
        let dq = ds.matmul(&cache.k[k])?.scaled(scale);
        let dk = ds.transpose().matmul(&cache.q[k])?.scaled(scale);
        for (slot, dm) in [(0usize, dq), (1, dk), (2, dv)] {
            let dw = xt.matmul(&dm)?;
            for (g, v) in head_grads[4 * k + slot].iter_mut().zip(dw.as_slice()) {
                *g = *g + *v;
            }
        }
    }
    Ok(())
}

/// Converts a trained convolutional classifier into an attention classifier
/// computing the same function on `height × width` images.
pub fn transfer<T: Real>(
    conv: &ConvClassifier<T>,
    patch: usize,
    bias_scale: f64,
    boundary: BoundaryMode,
    height: usize,
    width: usize,
) -> Result<AttnClassifier<T>> {
    let converted = conv_to_mhsa(&conv.kernel, patch, bias_scale, boundary)?;
    let rings = converted.padding_rings();
    let grid = PatchGeometry::for_image(height, width, patch)?.padded(rings);
    let tables = converted.bias_tables_for(grid)?;
    let (mut heads, w_o) = converted.into_weights().into_parts();
    for (h, t) in heads.iter_mut().zip(tables) {
        h.bias = t;
    }
    AttnClassifier::new(MhsaWeights::new(heads, w_o)?, conv.head.clone(), patch, boundary, rings)
}
