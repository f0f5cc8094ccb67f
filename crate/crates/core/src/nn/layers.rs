//! Layer kernels. Each forward returns the values its backward needs; the
//! backward checks that the cache it is handed matches the gradient shape.

use rand::Rng;

use super::tensor::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Whether a pass updates/uses batch statistics and samples dropout masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::config(format!("{what}: expected a 4-d tensor, got {s:?}"))),
    }
}

/// Sum of `f(a[i], b[i])` with eight independent accumulators so the loop
/// vectorizes.
#[inline]
fn lane_sum2<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += f(x[l], y[l]);
        }
    }
    for (l, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        acc[l] += f(x, y);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[inline]
pub(crate) fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    lane_sum2(xs, xs, |x, _| x)
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1

pub const KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub input: Tensor<T>,
}

pub struct ConvGrads<T> {
    /// `None` when the caller asked not to propagate into the input.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Column range `[lo, hi)` of output positions that read input column `x + k - 1`.
#[inline]
fn valid_span(k: usize, extent: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = (extent + 1 - k).min(extent);
    (lo, hi)
}

/// Unfolds `[B, C, H, W]` into `[C*9, B*H*W]`: row `ci*9 + ky*3 + kx`, column
/// `b*H*W + y*W + x` holds `input[b, ci, y+ky-1, x+kx-1]` (zero outside).
fn im2col<T: Scalar>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let n = b * plane;
    let mut col = vec![T::zero(); c * 9 * n];
    for ci in 0..c {
        for ky in 0..KERNEL {
            let (ylo, yhi) = valid_span(ky, h);
            for kx in 0..KERNEL {
                let (xlo, xhi) = valid_span(kx, w);
                let row = &mut col[(ci * 9 + ky * KERNEL + kx) * n..][..n];
                for bi in 0..b {
                    let src_plane = &x[(bi * c + ci) * plane..][..plane];
                    for y in ylo..yhi {
                        let iy = y + ky - 1;
                        let dst = bi * plane + y * w;
                        row[dst + xlo..dst + xhi]
                            .copy_from_slice(&src_plane[iy * w + xlo + kx - 1..iy * w + xhi + kx - 1]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates `[C*9, B*H*W]` back onto `[B, C, H, W]`.
fn col2im<T: Scalar>(col: &[T], out: &mut [T], b: usize, c: usize, h: usize, w: usize) {
    let plane = h * w;
    let n = b * plane;
    for ci in 0..c {
        for ky in 0..KERNEL {
            let (ylo, yhi) = valid_span(ky, h);
            for kx in 0..KERNEL {
                let (xlo, xhi) = valid_span(kx, w);
                let row = &col[(ci * 9 + ky * KERNEL + kx) * n..][..n];
                for bi in 0..b {
                    let dst_plane = &mut out[(bi * c + ci) * plane..][..plane];
                    for y in ylo..yhi {
                        let iy = y + ky - 1;
                        let src = bi * plane + y * w;
                        for (d, s) in dst_plane[iy * w + xlo + kx - 1..iy * w + xhi + kx - 1]
                            .iter_mut()
                            .zip(&row[src + xlo..src + xhi])
                        {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(input, "conv input")?;
    let (f, wc, kh, kw) = dims4(weight, "conv weight")?;
    if wc != c || kh != KERNEL || kw != KERNEL {
        return Err(Error::config(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    bias.expect_shape(&[f], "conv bias")?;

    let plane = h * w;
    let n = b * plane;
    let col = im2col(input.data(), b, c, h, w);
    // [F, B*H*W]
    let mut fm = vec![T::zero(); f * n];
    gemm(
        MatRef::new(weight.data(), f, c * 9),
        MatRef::new(&col, c * 9, n),
        &mut fm,
        false,
    );
    let mut out = Tensor::zeros(&[b, f, h, w]);
    let o = out.data_mut();
    for fi in 0..f {
        let bv = bias.data()[fi];
        for bi in 0..b {
            let src = &fm[fi * n + bi * plane..][..plane];
            for (d, s) in o[(bi * f + fi) * plane..][..plane].iter_mut().zip(src) {
                *d = *s + bv;
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (b, c, h, w) = dims4(&cache.input, "conv cache")?;
    let f = weight.dim(0);
    if grad_out.shape() != [b, f, h, w] {
        return Err(Error::Contract(format!(
            "conv grad_out {:?} does not match cached forward {:?} with {f} filters",
            grad_out.shape(),
            cache.input.shape()
        )));
    }
    let plane = h * w;
    let n = b * plane;
    let g = grad_out.data();

    // regroup grad_out as [F, B*H*W]
    let mut gm = vec![T::zero(); f * n];
    let mut gb = Tensor::zeros(&[f]);
    for fi in 0..f {
        let mut acc = T::zero();
        for bi in 0..b {
            let src = &g[(bi * f + fi) * plane..][..plane];
            gm[fi * n + bi * plane..][..plane].copy_from_slice(src);
            acc += lane_sum(src);
        }
        gb.data_mut()[fi] = acc;
    }

    let col = im2col(cache.input.data(), b, c, h, w);
    let mut gw = Tensor::zeros(weight.shape());
    gemm(
        MatRef::new(&gm, f, n),
        MatRef::t(&col, c * 9, n),
        gw.data_mut(),
        false,
    );

    let gi = if need_input_grad {
        let mut gcol = col;
        gemm(
            MatRef::t(weight.data(), f, c * 9),
            MatRef::new(&gm, f, n),
            &mut gcol,
            false,
        );
        let mut gi = Tensor::zeros(cache.input.shape());
        col2im(&gcol, gi.data_mut(), b, c, h, w);
        Some(gi)
    } else {
        None
    };
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2

#[derive(Clone, Debug)]
pub struct PoolCache {
    pub input_shape: Vec<usize>,
    /// Flat input index of the winning element for every output element.
    pub argmax: Vec<u32>,
}

pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let (b, c, h, w) = dims4(input, "pool input")?;
    if h < 2 || w < 2 {
        return Err(Error::config(format!(
            "max-pool needs spatial extent >= 2x2, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let x = input.data();
    let o = out.data_mut();
    let mut k = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let (mut best, mut bv) = (top, x[top]);
                for idx in [top + 1, top + w, top + w + 1] {
                    let v = x[idx];
                    let gt = v > bv;
                    best = if gt { idx } else { best };
                    bv = if gt { v } else { bv };
                }
                o[k] = bv;
                argmax.push(best as u32);
                k += 1;
            }
        }
    }
    Ok((
        out,
        PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward<T: Scalar>(cache: &PoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::Contract(format!(
            "pool grad_out has {} values, cache recorded {}",
            grad_out.len(),
            cache.argmax.len()
        )));
    }
    let mut gi = Tensor::zeros(&cache.input_shape);
    let d = gi.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        d[idx as usize] += g;
    }
    Ok(gi)
}

// ---------------------------------------------------------------------------
// Batch normalization over [B, C, S] (S = spatial size, 1 for dense features)

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average of the batch statistics held in `cache`.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>, momentum: T) {
        let keep = T::one() - momentum;
        let n = T::lit(cache.count as f64);
        let unbias = if cache.count > 1 { n / (n - T::one()) } else { T::one() };
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = keep * *rm + momentum * cache.mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = keep * *rv + momentum * cache.var[ch] * unbias;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub shape: Vec<usize>,
    pub x_hat: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Elements per channel that entered the statistics (B * S).
    pub count: usize,
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn bn_layout<T: Scalar>(input: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        ref s => Err(Error::config(format!("batch-norm input must be 2-d or 4-d, got {s:?}"))),
    }
}

/// Returns the normalized output and, in train mode, the cache for backward.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
    eps: T,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (b, c, s) = bn_layout(input)?;
    if c != params.channels() {
        return Err(Error::config(format!(
            "batch-norm has {} channels, input has {c}",
            params.channels()
        )));
    }
    let x = input.data();
    let gamma = params.gamma.data();
    let beta = params.beta.data();
    let mut out = Tensor::zeros(input.shape());

    match mode {
        Mode::Eval => {
            let o = out.data_mut();
            for ch in 0..c {
                let inv = T::one() / (params.running_var.data()[ch] + eps).sqrt();
                let scale = gamma[ch] * inv;
                let shift = beta[ch] - params.running_mean.data()[ch] * scale;
                for bi in 0..b {
                    let off = (bi * c + ch) * s;
                    for (o, &v) in o[off..off + s].iter_mut().zip(&x[off..off + s]) {
                        *o = v * scale + shift;
                    }
                }
            }
            Ok((out, None))
        }
        Mode::Train => {
            if b < 2 {
                return Err(Error::config(format!(
                    "batch-norm in train mode needs batch size >= 2, got {b}"
                )));
            }
            let count = b * s;
            let n = T::lit(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let mut inv_std = vec![T::zero(); c];
            let mut x_hat = vec![T::zero(); x.len()];
            for ch in 0..c {
                let mut sum = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * s;
                    sum += lane_sum(&x[off..off + s]);
                }
                let m = sum / n;
                let mut sq = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * s;
                    let xs = &x[off..off + s];
                    sq += lane_sum2(xs, xs, |v, _| (v - m) * (v - m));
                }
                let v = sq / n;
                let inv = T::one() / (v + eps).sqrt();
                mean[ch] = m;
                var[ch] = v;
                inv_std[ch] = inv;
                let o = out.data_mut();
                for bi in 0..b {
                    let off = (bi * c + ch) * s;
                    for i in off..off + s {
                        let xh = (x[i] - m) * inv;
                        x_hat[i] = xh;
                        o[i] = gamma[ch] * xh + beta[ch];
                    }
                }
            }
            Ok((
                out,
                Some(BatchNormCache {
                    shape: input.shape().to_vec(),
                    x_hat,
                    mean,
                    var,
                    inv_std,
                    count,
                }),
            ))
        }
    }
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::Contract(format!(
            "batch-norm grad_out {:?} does not match cached forward {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let (b, c, s) = bn_layout(grad_out)?;
    let g = grad_out.data();
    let n = T::lit(cache.count as f64);
    let mut gi = Tensor::zeros(grad_out.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * s;
            let (gs, xs) = (&g[off..off + s], &cache.x_hat[off..off + s]);
            sum_g += lane_sum(gs);
            sum_gx += lane_sum2(gs, xs, |a, b| a * b);
        }
        gbeta.data_mut()[ch] = sum_g;
        gg.data_mut()[ch] = sum_gx;
        let k = params.gamma.data()[ch] * cache.inv_std[ch] / n;
        let d = gi.data_mut();
        for bi in 0..b {
            let off = (bi * c + ch) * s;
            for i in off..off + s {
                d[i] = k * (n * g[i] - sum_g - cache.x_hat[i] * sum_gx);
            }
        }
    }
    Ok(BatchNormGrads {
        input: gi,
        gamma: gg,
        beta: gbeta,
    })
}

// ---------------------------------------------------------------------------
// Fully connected

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `input[B,D] · weight[D,E] + bias[E]`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, d, e) = match (input.shape(), weight.shape()) {
        ([b, d], [wd, e]) if d == wd => (*b, *d, *e),
        (i, w) => {
            return Err(Error::config(format!(
                "dense input {i:?} incompatible with weight {w:?}"
            )))
        }
    };
    bias.expect_shape(&[e], "dense bias")?;
    let mut out = Tensor::zeros(&[b, e]);
    let x = input.data();
    let wt = weight.data();
    let o = out.data_mut();
    for bi in 0..b {
        let row = &mut o[bi * e..(bi + 1) * e];
        row.copy_from_slice(bias.data());
        for di in 0..d {
            let xv = x[bi * d + di];
            if xv == T::zero() {
                continue;
            }
            for (r, &wv) in row.iter_mut().zip(&wt[di * e..(di + 1) * e]) {
                *r += xv * wv;
            }
        }
    }
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (b, d) = (input.dim(0), input.dim(1));
    let e = weight.dim(1);
    if grad_out.shape() != [b, e] {
        return Err(Error::Contract(format!(
            "dense grad_out {:?} does not match cached input {:?} and weight {:?}",
            grad_out.shape(),
            input.shape(),
            weight.shape()
        )));
    }
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gw = Tensor::zeros(&[d, e]);
    let mut gb = Tensor::zeros(&[e]);
    let mut gi = Tensor::zeros(&[b, d]);
    for bi in 0..b {
        let grow = &g[bi * e..(bi + 1) * e];
        for (acc, &gv) in gb.data_mut().iter_mut().zip(grow) {
            *acc += gv;
        }
        for di in 0..d {
            let xv = x[bi * d + di];
            let wrow = &wt[di * e..(di + 1) * e];
            gi.data_mut()[bi * d + di] = wrow.iter().zip(grow).map(|(a, b)| *a * *b).sum();
            if xv != T::zero() {
                for (acc, &gv) in gw.data_mut()[di * e..(di + 1) * e].iter_mut().zip(grow) {
                    *acc += xv * gv;
                }
            }
        }
    }
    Ok(DenseGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

// ---------------------------------------------------------------------------
// Elementwise

pub fn relu_inplace<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` in place where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(output: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
    if output.shape() != grad.shape() {
        return Err(Error::Contract(format!(
            "relu grad {:?} does not match cached output {:?}",
            grad.shape(),
            output.shape()
        )));
    }
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(())
}

/// Inverted dropout scale factors: 0 for dropped units, 1/(1-p) for kept ones.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T> {
    pub scale: Vec<T>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn keep_all(n: usize) -> Self {
        DropoutMask {
            scale: vec![T::one(); n],
        }
    }

    pub fn sample<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Self> {
        check_dropout_p(p)?;
        let keep_scale = T::lit(1.0 / (1.0 - p));
        let scale = (0..n)
            .map(|_| {
                if p > 0.0 && rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        Ok(DropoutMask { scale })
    }

    pub fn kept(&self) -> usize {
        self.scale.iter().filter(|s| **s != T::zero()).count()
    }
}

fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    Ok(())
}

/// Train mode draws a fresh mask; eval mode is the identity with an all-keep mask.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    check_dropout_p(p)?;
    let mask = match mode {
        Mode::Eval => DropoutMask::keep_all(input.len()),
        Mode::Train => DropoutMask::sample(input.len(), p, rng)?,
    };
    let out = dropout_apply(input, &mask)?;
    Ok((out, mask))
}

pub fn dropout_apply<T: Scalar>(input: &Tensor<T>, mask: &DropoutMask<T>) -> Result<Tensor<T>> {
    if mask.scale.len() != input.len() {
        return Err(Error::Contract(format!(
            "dropout mask has {} entries for {} values",
            mask.scale.len(),
            input.len()
        )));
    }
    let mut out = input.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(&mask.scale) {
        *o *= s;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Softmax + cross-entropy

pub struct XentOutput<T> {
    /// Mean negative log-likelihood over the batch.
    pub loss: T,
    pub grad_logits: Tensor<T>,
    pub probs: Tensor<T>,
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, k) = match *logits.shape() {
        [b, k] => (b, k),
        ref s => return Err(Error::config(format!("logits must be 2-d, got {s:?}"))),
    };
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_mut(k).take(b) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(probs)
}

pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<XentOutput<T>> {
    let (b, k) = match *logits.shape() {
        [b, k] => (b, k),
        ref s => return Err(Error::config(format!("logits must be 2-d, got {s:?}"))),
    };
    if labels.len() != b {
        return Err(Error::input(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax_rows(logits)?;
    let inv_b = T::one() / T::lit(b as f64);
    let mut grad = probs.clone();
    let mut loss = T::zero();
    let x = logits.data();
    for (bi, &label) in labels.iter().enumerate() {
        let row = &x[bi * k..(bi + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[label];
        let grow = &mut grad.data_mut()[bi * k..(bi + 1) * k];
        grow[label] -= T::one();
        for g in grow.iter_mut() {
            *g *= inv_b;
        }
    }
    Ok(XentOutput {
        loss: loss * inv_b,
        grad_logits: grad,
        probs,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct translation of the padded cross-correlation definition.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, wd) = dims4(x, "").unwrap();
        let f = w.dim(0);
        let mut out = Tensor::zeros(&[b, f, h, wd]);
        for bi in 0..b {
            for fi in 0..f {
                for y in 0..h as isize {
                    for xx in 0..wd as isize {
                        let mut s = bias.data()[fi];
                        for ci in 0..c {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (iy, ix) = (y + ky - 1, xx + kx - 1);
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((bi * c + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((fi * c + ci) * 3 + ky as usize) * 3 + kx as usize;
                                    s += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((bi * f + fi) * h + y as usize) * wd + xx as usize] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_kernel_matches_oracle() {
        let x = t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d_forward(&x, &w, &bias).unwrap();
        assert_eq!(out.data()[4], 45.0);
        // neighbourhood sums worked by hand: corners see a 2x2 block, edges a 2x3 block
        assert_eq!(out.data(), &[12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0]);
        assert_eq!(out, conv_oracle(&x, &w, &bias));
    }

    #[test]
    fn conv_random_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 5, 7], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let out = conv2d_forward(&x, &w, &b).unwrap();
        let oracle = conv_oracle(&x, &w, &b);
        for (a, o) in out.data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 1, 4, 6], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let out = conv2d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out, x);

        let zero = Tensor::zeros(&[1, 2, 4, 4]);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = t(&[3], vec![0.5, -1.0, 2.0]);
        let out = conv2d_forward(&zero, &w, &b).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, b.data()[i / 16]);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, &Tensor::zeros(&[1])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_backward_zero_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let cache = ConvCache { input: x };
        let g = conv2d_backward(&cache, &w, &Tensor::zeros(&[1, 1, 4, 4]), true).unwrap();
        assert!(g.input.unwrap().data().iter().all(|v| *v == 0.0));
        assert!(g.weight.data().iter().all(|v| *v == 0.0));
        assert!(g.bias.data().iter().all(|v| *v == 0.0));

        let g = conv2d_backward(&cache, &w, &Tensor::filled(&[1, 1, 4, 4], 1.0), true).unwrap();
        assert!(g.input.unwrap().data().iter().all(|v| *v == 1.0));
        assert_eq!(g.bias.data(), &[16.0]);
    }

    #[test]
    fn conv_backward_rejects_mismatched_cache() {
        let cache = ConvCache {
            input: Tensor::<f32>::zeros(&[1, 1, 4, 4]),
        };
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let r = conv2d_backward(&cache, &w, &Tensor::zeros(&[1, 2, 3, 4]), false);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn maxpool_examples() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (out, cache) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let gi = maxpool2x2_backward(&cache, &Tensor::filled(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(gi.data(), &[0.0, 0.0, 0.0, 1.0]);
        let gi = maxpool2x2_backward(&cache, &Tensor::<f64>::zeros(&[1, 1, 1, 1])).unwrap();
        assert!(gi.data().iter().all(|v| *v == 0.0));

        let c = Tensor::<f64>::filled(&[2, 3, 6, 8], 0.25);
        let (out, _) = maxpool2x2_forward(&c).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.25));

        let big = Tensor::<f32>::zeros(&[1, 1, 175, 184]);
        assert_eq!(maxpool2x2_forward(&big).unwrap().0.shape(), &[1, 1, 87, 92]);
        assert!(maxpool2x2_forward(&Tensor::<f32>::zeros(&[1, 1, 1, 4])).is_err());
    }

    #[test]
    fn batchnorm_examples() {
        let eps = 1e-5;
        let p = BatchNormParams::<f64>::new(1);
        let constant = Tensor::filled(&[4, 1], 3.0);
        let (out, _) = batchnorm_forward(&constant, &p, Mode::Train, eps).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));

        let x = t(&[2, 1], vec![0.0, 2.0]);
        let (out, _) = batchnorm_forward(&x, &p, Mode::Train, 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-9 && (out.data()[1] - 1.0).abs() < 1e-9);

        let mut p0 = BatchNormParams::<f64>::new(1);
        p0.gamma.fill(0.0);
        p0.beta.fill(0.7);
        let (out, _) = batchnorm_forward(&x, &p0, Mode::Train, eps).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.7));

        assert!(matches!(
            batchnorm_forward(&t(&[1, 1], vec![1.0]), &p, Mode::Train, eps),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batchnorm_running_stats_and_eval() {
        let mut p = BatchNormParams::<f64>::new(1);
        let x = t(&[2, 1], vec![0.0, 2.0]);
        let (_, cache) = batchnorm_forward(&x, &p, Mode::Train, 1e-5).unwrap();
        p.update_running(&cache.unwrap(), 0.1);
        assert!((p.running_mean.data()[0] - 0.1).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((p.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
        let (out, cache) = batchnorm_forward(&x, &p, Mode::Eval, 0.0).unwrap();
        assert!(cache.is_none());
        let expect = (2.0 - 0.1) / 1.1f64.sqrt();
        assert!((out.data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_backward_zero_and_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 2, 2, 2], &mut rng);
        let p = BatchNormParams::new(2);
        let (_, cache) = batchnorm_forward(&x, &p, Mode::Train, 1e-5).unwrap();
        let cache = cache.unwrap();
        let g = batchnorm_backward(&cache, &p, &Tensor::zeros(&[3, 2, 2, 2])).unwrap();
        assert!(g.input.data().iter().chain(g.gamma.data()).all(|v| *v == 0.0));

        let go = random(&[3, 2, 2, 2], &mut rng);
        let g = batchnorm_backward(&cache, &p, &go).unwrap();
        for ch in 0..2 {
            let mut s = 0.0;
            for b in 0..3 {
                s += go.data()[(b * 2 + ch) * 4..][..4].iter().sum::<f64>();
            }
            assert!((g.beta.data()[ch] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_examples() {
        let x = t(&[1, 2], vec![2.0, 3.0]);
        let w = t(&[2, 1], vec![1.0, 1.0]);
        let out = dense_forward(&x, &w, &t(&[1], vec![1.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);

        let eye = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);

        let bias = t(&[3], vec![0.1, 0.2, 0.3]);
        let out = dense_forward(&Tensor::zeros(&[2, 4]), &Tensor::filled(&[4, 3], 9.0), &bias).unwrap();
        assert_eq!(out.data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);

        assert!(dense_forward(&x, &Tensor::zeros(&[3, 1]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[4, 5], &mut rng);
        let (out, mask) = dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(out, x);
        assert_eq!(mask.kept(), 20);
        let (out, _) = dropout_forward(&x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(out, x);
        assert!(dropout_forward(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout_forward(&x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_keep_fraction_and_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mask = DropoutMask::<f32>::sample(n, 0.5, &mut rng).unwrap();
        let frac = mask.kept() as f64 / n as f64;
        // 3 sigma of Binomial(1e6, 0.5) / 1e6 is 0.0015
        assert!((frac - 0.5).abs() < 0.005, "kept fraction {frac}");
        let mean_scale: f64 = mask.scale.iter().map(|&s| s as f64).sum::<f64>() / n as f64;
        assert!((mean_scale - 1.0).abs() < 0.01, "mean scale {mean_scale}");
    }

    #[test]
    fn xent_examples() {
        let logits = Tensor::<f64>::zeros(&[3, 12]);
        let out = softmax_xent(&logits, &[0, 5, 11]).unwrap();
        assert!((out.loss - 12f64.ln()).abs() < 1e-12);
        assert!((out.loss - 2.4849).abs() < 1e-4);
        assert!(out.probs.data().iter().all(|p| (p - 1.0 / 12.0).abs() < 1e-12));

        let mut l = Tensor::<f32>::zeros(&[1, 12]);
        l.data_mut()[4] = 1000.0;
        let out = softmax_xent(&l, &[4]).unwrap();
        assert!(out.loss < 1e-6 && out.loss >= 0.0);
        assert!(out.grad_logits.is_finite());

        assert!(matches!(softmax_xent(&l, &[12]), Err(Error::Input(_))));
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.0f32; 12]), 0);
        let mut v = [0.0f32; 12];
        v[3] = 1.0;
        assert_eq!(argmax(&v), 3);
        v[7] = 1.0;
        assert_eq!(argmax(&v), 3);
    }
}
