//! Tensor operations behind the convolutional network: 3x3 convolution with
//! stride/dilation and same-padding, group normalization, ReLU, global
//! average pooling, inverted dropout, a linear head, and softmax with
//! cross-entropy.
//!
//! Everything is generic over the scalar so the training path runs in single
//! precision while gradient checks run the identical code in double
//! precision. Convolutions go through an im2col buffer; the inner loops are
//! plain contiguous dot/axpy kernels with eight independent accumulators so
//! the compiler can vectorize them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::Result;

/// Scalar type of the network: f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + std::iter::Sum + Send + Sync + std::fmt::Debug + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand f64 -> F conversion for constants.
#[inline]
pub fn c<F: Scalar>(v: f64) -> F {
    F::from(v).expect("scalar conversion")
}

/// Batch tensor, B x C x H x W, row-major with B outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<F> {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor4<F> {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            b,
            c,
            h,
            w,
            data: vec![F::zero(); b * c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[F] {
        let size = self.h * self.w;
        let start = (b * self.c + c) * size;
        &self.data[start..start + size]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [F] {
        let size = self.h * self.w;
        let start = (b * self.c + c) * size;
        &mut self.data[start..start + size]
    }
}

/// Batch of flat vectors, B x N, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<F> {
    pub b: usize,
    pub n: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor2<F> {
    pub fn zeros(b: usize, n: usize) -> Self {
        Tensor2 {
            b,
            n,
            data: vec![F::zero(); b * n],
        }
    }

    #[inline]
    pub fn row(&self, b: usize) -> &[F] {
        &self.data[b * self.n..(b + 1) * self.n]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize) -> &mut [F] {
        &mut self.data[b * self.n..(b + 1) * self.n]
    }
}

/// Contiguous dot product with eight accumulators.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let mut a_chunks = a.chunks_exact(8);
    let mut b_chunks = b.chunks_exact(8);
    for (ca, cb) in (&mut a_chunks).zip(&mut b_chunks) {
        acc[0] = acc[0] + ca[0] * cb[0];
        acc[1] = acc[1] + ca[1] * cb[1];
        acc[2] = acc[2] + ca[2] * cb[2];
        acc[3] = acc[3] + ca[3] * cb[3];
        acc[4] = acc[4] + ca[4] * cb[4];
        acc[5] = acc[5] + ca[5] * cb[5];
        acc[6] = acc[6] + ca[6] * cb[6];
        acc[7] = acc[7] + ca[7] * cb[7];
    }
    let mut sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in a_chunks.remainder().iter().zip(b_chunks.remainder()) {
        sum = sum + x * y;
    }
    sum
}

/// `y += alpha * x` over contiguous slices.
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    let mut x_chunks = x.chunks_exact(8);
    let mut y_chunks = y.chunks_exact_mut(8);
    for (cx, cy) in (&mut x_chunks).zip(&mut y_chunks) {
        cy[0] = cy[0] + alpha * cx[0];
        cy[1] = cy[1] + alpha * cx[1];
        cy[2] = cy[2] + alpha * cx[2];
        cy[3] = cy[3] + alpha * cx[3];
        cy[4] = cy[4] + alpha * cx[4];
        cy[5] = cy[5] + alpha * cx[5];
        cy[6] = cy[6] + alpha * cx[6];
        cy[7] = cy[7] + alpha * cx[7];
    }
    for (x, y) in x_chunks
        .remainder()
        .iter()
        .zip(y_chunks.into_remainder())
    {
        *y = *y + alpha * *x;
    }
}

/// One convolution block's geometry: 3x3 kernel, same-mode padding with
/// `pad = dilation`, so the output is `ceil(in/stride)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            stride,
            dilation,
        }
    }

    /// Weight + bias count of the convolution itself.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * 9 + self.out_channels
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn k(&self) -> usize {
        self.in_channels * 9
    }
}

fn check_conv_shapes<F: Scalar>(
    x: &Tensor4<F>,
    spec: &ConvSpec,
    weight: &[F],
    bias: &[F],
) -> Result<()> {
    if x.c != spec.in_channels {
        return Err(Error::mismatch(format!(
            "conv expects {} input channels, got {}",
            spec.in_channels, x.c
        )));
    }
    if weight.len() != spec.out_channels * spec.k() || bias.len() != spec.out_channels {
        return Err(Error::mismatch("conv weight/bias shape mismatch"));
    }
    Ok(())
}

/// Gathers one batch item into the column buffer: row `p` (one output pixel)
/// holds the 3x3 x in-channel receptive field, zero-padded at the borders.
fn im2col<F: Scalar>(
    x: &Tensor4<F>,
    bi: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &mut [F],
) {
    let k_total = spec.k();
    let (h, w) = (x.h as i64, x.w as i64);
    let stride = spec.stride as i64;
    let dil = spec.dilation as i64;
    let pad = dil;
    for oy in 0..oh as i64 {
        for ox in 0..ow as i64 {
            let row_start = ((oy as usize) * ow + ox as usize) * k_total;
            let row = &mut col[row_start..row_start + k_total];
            let mut k = 0;
            for ci in 0..spec.in_channels {
                let plane = x.plane(bi, ci);
                for ky in 0..3i64 {
                    let iy = oy * stride - pad + ky * dil;
                    if iy < 0 || iy >= h {
                        row[k] = F::zero();
                        row[k + 1] = F::zero();
                        row[k + 2] = F::zero();
                        k += 3;
                        continue;
                    }
                    let base = (iy * w) as usize;
                    for kx in 0..3i64 {
                        let ix = ox * stride - pad + kx * dil;
                        row[k] = if ix < 0 || ix >= w {
                            F::zero()
                        } else {
                            plane[base + ix as usize]
                        };
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Scatters a column-buffer gradient back onto the input gradient.
fn col2im_accumulate<F: Scalar>(
    grad_x: &mut Tensor4<F>,
    bi: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &[F],
) {
    let k_total = spec.k();
    let (h, w) = (grad_x.h as i64, grad_x.w as i64);
    let stride = spec.stride as i64;
    let dil = spec.dilation as i64;
    let pad = dil;
    for oy in 0..oh as i64 {
        for ox in 0..ow as i64 {
            let row_start = ((oy as usize) * ow + ox as usize) * k_total;
            let row = &col[row_start..row_start + k_total];
            let mut k = 0;
            for ci in 0..spec.in_channels {
                let plane = grad_x.plane_mut(bi, ci);
                for ky in 0..3i64 {
                    let iy = oy * stride - pad + ky * dil;
                    if iy < 0 || iy >= h {
                        k += 3;
                        continue;
                    }
                    let base = (iy * w) as usize;
                    for kx in 0..3i64 {
                        let ix = ox * stride - pad + kx * dil;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] = plane[base + ix as usize] + row[k];
                        }
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Forward 3x3 convolution with same padding.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor4<F>,
    spec: &ConvSpec,
    weight: &[F],
    bias: &[F],
) -> Result<Tensor4<F>> {
    check_conv_shapes(x, spec, weight, bias)?;
    let (oh, ow) = spec.out_hw(x.h, x.w);
    let p_total = oh * ow;
    let k_total = spec.k();
    let mut out = Tensor4::zeros(x.b, spec.out_channels, oh, ow);
    let mut col = vec![F::zero(); p_total * k_total];
    for bi in 0..x.b {
        im2col(x, bi, spec, oh, ow, &mut col);
        for co in 0..spec.out_channels {
            let w_row = &weight[co * k_total..(co + 1) * k_total];
            let out_plane = out.plane_mut(bi, co);
            for p in 0..p_total {
                out_plane[p] = bias[co] + dot(w_row, &col[p * k_total..(p + 1) * k_total]);
            }
        }
    }
    Ok(out)
}

/// Gradients of the convolution: input, weight, and bias.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor4<F>,
    spec: &ConvSpec,
    weight: &[F],
    grad_out: &Tensor4<F>,
) -> Result<(Tensor4<F>, Vec<F>, Vec<F>)> {
    let (oh, ow) = spec.out_hw(x.h, x.w);
    if grad_out.b != x.b || grad_out.c != spec.out_channels || grad_out.h != oh || grad_out.w != ow
    {
        return Err(Error::mismatch("conv backward output-gradient shape mismatch"));
    }
    let p_total = oh * ow;
    let k_total = spec.k();
    let mut grad_x = Tensor4::zeros(x.b, x.c, x.h, x.w);
    let mut grad_w = vec![F::zero(); weight.len()];
    let mut grad_b = vec![F::zero(); spec.out_channels];
    let mut col = vec![F::zero(); p_total * k_total];
    let mut grad_col = vec![F::zero(); p_total * k_total];

    for bi in 0..x.b {
        im2col(x, bi, spec, oh, ow, &mut col);
        for v in grad_col.iter_mut() {
            *v = F::zero();
        }
        for co in 0..spec.out_channels {
            let g_plane = grad_out.plane(bi, co);
            let w_row = &weight[co * k_total..(co + 1) * k_total];
            let gw_row = &mut grad_w[co * k_total..(co + 1) * k_total];
            let mut gb = F::zero();
            for p in 0..p_total {
                let g = g_plane[p];
                if g != F::zero() {
                    axpy(g, &col[p * k_total..(p + 1) * k_total], gw_row);
                    axpy(g, w_row, &mut grad_col[p * k_total..(p + 1) * k_total]);
                }
                gb = gb + g;
            }
            grad_b[co] = grad_b[co] + gb;
        }
        col2im_accumulate(&mut grad_x, bi, spec, oh, ow, &grad_col);
    }
    Ok((grad_x, grad_w, grad_b))
}

/// Cache of the normalization forward pass needed by its backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache<F> {
    /// Normalized values before the per-channel affine.
    pub x_hat: Tensor4<F>,
    /// Per (batch item, group): 1 / sqrt(variance + eps).
    pub inv_std: Vec<F>,
}

/// Group normalization: per (batch item, channel group), normalize over the
/// group's channels and all spatial positions, then apply the per-channel
/// affine.
pub fn group_norm_forward<F: Scalar>(
    x: &Tensor4<F>,
    groups: usize,
    scale: &[F],
    shift: &[F],
    eps: f64,
) -> Result<(Tensor4<F>, GroupNormCache<F>)> {
    if groups == 0 || x.c % groups != 0 {
        return Err(Error::invalid(format!(
            "group count {groups} must divide channel count {}",
            x.c
        )));
    }
    if scale.len() != x.c || shift.len() != x.c {
        return Err(Error::mismatch("group norm affine shape mismatch"));
    }
    let per_group = x.c / groups;
    let spatial = x.h * x.w;
    let m = c::<F>((per_group * spatial) as f64);
    let mut x_hat = Tensor4::zeros(x.b, x.c, x.h, x.w);
    let mut out = Tensor4::zeros(x.b, x.c, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.b * groups);

    for bi in 0..x.b {
        for g in 0..groups {
            let ch0 = g * per_group;
            let mut sum = F::zero();
            for ch in ch0..ch0 + per_group {
                sum = sum + x.plane(bi, ch).iter().copied().sum::<F>();
            }
            let mean = sum / m;
            let mut var_sum = F::zero();
            for ch in ch0..ch0 + per_group {
                for &v in x.plane(bi, ch) {
                    let d = v - mean;
                    var_sum = var_sum + d * d;
                }
            }
            let variance = var_sum / m;
            let istd = (variance + c::<F>(eps)).sqrt().recip();
            inv_std.push(istd);
            for ch in ch0..ch0 + per_group {
                let src = x.plane(bi, ch);
                let start = (bi * x.c + ch) * spatial;
                for (i, &v) in src.iter().enumerate() {
                    let normalized = (v - mean) * istd;
                    x_hat.data[start + i] = normalized;
                    out.data[start + i] = scale[ch] * normalized + shift[ch];
                }
            }
        }
    }
    Ok((out, GroupNormCache { x_hat, inv_std }))
}

/// Gradients of group normalization: input, scale, shift.
pub fn group_norm_backward<F: Scalar>(
    cache: &GroupNormCache<F>,
    groups: usize,
    scale: &[F],
    grad_out: &Tensor4<F>,
) -> Result<(Tensor4<F>, Vec<F>, Vec<F>)> {
    let x_hat = &cache.x_hat;
    if grad_out.data.len() != x_hat.data.len() {
        return Err(Error::mismatch("group norm backward shape mismatch"));
    }
    let per_group = x_hat.c / groups;
    let spatial = x_hat.h * x_hat.w;
    let m = c::<F>((per_group * spatial) as f64);
    let mut grad_x = Tensor4::zeros(x_hat.b, x_hat.c, x_hat.h, x_hat.w);
    let mut grad_scale = vec![F::zero(); x_hat.c];
    let mut grad_shift = vec![F::zero(); x_hat.c];

    for bi in 0..x_hat.b {
        for g in 0..groups {
            let ch0 = g * per_group;
            let istd = cache.inv_std[bi * groups + g];
            // Accumulate the two group-wide reductions of d x_hat.
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for ch in ch0..ch0 + per_group {
                let go = grad_out.plane(bi, ch);
                let xh = x_hat.plane(bi, ch);
                let mut gs = F::zero();
                let mut gsh = F::zero();
                for i in 0..spatial {
                    let dxh = go[i] * scale[ch];
                    sum_dxhat = sum_dxhat + dxh;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh[i];
                    gs = gs + go[i] * xh[i];
                    gsh = gsh + go[i];
                }
                grad_scale[ch] = grad_scale[ch] + gs;
                grad_shift[ch] = grad_shift[ch] + gsh;
            }
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;
            for ch in ch0..ch0 + per_group {
                let go = grad_out.plane(bi, ch);
                let xh = x_hat.plane(bi, ch);
                let gx = grad_x.plane_mut(bi, ch);
                for i in 0..spatial {
                    let dxh = go[i] * scale[ch];
                    gx[i] = istd * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
                }
            }
        }
    }
    Ok((grad_x, grad_scale, grad_shift))
}

/// In-place ReLU.
pub fn relu_forward<F: Scalar>(x: &mut Tensor4<F>) {
    for v in x.data.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// ReLU gradient given the pre-activation values.
pub fn relu_backward<F: Scalar>(pre_activation: &[F], grad_out: &[F]) -> Vec<F> {
    pre_activation
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > F::zero() { g } else { F::zero() })
        .collect()
}

/// Per-channel spatial mean: B x C x H x W -> B x C.
pub fn global_avg_pool_forward<F: Scalar>(x: &Tensor4<F>) -> Tensor2<F> {
    let spatial = c::<F>((x.h * x.w) as f64);
    let mut out = Tensor2::zeros(x.b, x.c);
    for bi in 0..x.b {
        for ch in 0..x.c {
            out.data[bi * x.c + ch] = x.plane(bi, ch).iter().copied().sum::<F>() / spatial;
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(
    grad_out: &Tensor2<F>,
    h: usize,
    w: usize,
) -> Tensor4<F> {
    let spatial = c::<F>((h * w) as f64);
    let mut grad_x = Tensor4::zeros(grad_out.b, grad_out.n, h, w);
    for bi in 0..grad_out.b {
        for ch in 0..grad_out.n {
            let g = grad_out.data[bi * grad_out.n + ch] / spatial;
            for v in grad_x.plane_mut(bi, ch) {
                *v = g;
            }
        }
    }
    grad_x
}

/// Inverted dropout on a flat batch: kept activations scale by 1/(1-rate),
/// so the expected output equals the input. The mask derives from the seed,
/// making a forward/backward pair consistent.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f64>() >= rate).collect()
}

pub fn dropout_forward<F: Scalar>(x: &Tensor2<F>, rate: f64, mask: &[bool]) -> Tensor2<F> {
    let keep = c::<F>(1.0 - rate);
    let mut out = x.clone();
    for (v, &m) in out.data.iter_mut().zip(mask) {
        *v = if m { *v / keep } else { F::zero() };
    }
    out
}

pub fn dropout_backward<F: Scalar>(grad_out: &Tensor2<F>, rate: f64, mask: &[bool]) -> Tensor2<F> {
    let keep = c::<F>(1.0 - rate);
    let mut grad = grad_out.clone();
    for (v, &m) in grad.data.iter_mut().zip(mask) {
        *v = if m { *v / keep } else { F::zero() };
    }
    grad
}

/// Linear head: `y = W x + b`, weights stored class-major.
pub fn linear_forward<F: Scalar>(
    x: &Tensor2<F>,
    weight: &[F],
    bias: &[F],
    out_dim: usize,
) -> Result<Tensor2<F>> {
    if weight.len() != out_dim * x.n || bias.len() != out_dim {
        return Err(Error::mismatch("linear weight/bias shape mismatch"));
    }
    let mut out = Tensor2::zeros(x.b, out_dim);
    for bi in 0..x.b {
        let row = x.row(bi);
        for k in 0..out_dim {
            out.data[bi * out_dim + k] = bias[k] + dot(&weight[k * x.n..(k + 1) * x.n], row);
        }
    }
    Ok(out)
}

pub fn linear_backward<F: Scalar>(
    x: &Tensor2<F>,
    weight: &[F],
    out_dim: usize,
    grad_out: &Tensor2<F>,
) -> (Tensor2<F>, Vec<F>, Vec<F>) {
    let mut grad_x = Tensor2::zeros(x.b, x.n);
    let mut grad_w = vec![F::zero(); weight.len()];
    let mut grad_b = vec![F::zero(); out_dim];
    for bi in 0..x.b {
        let x_row = x.row(bi);
        for k in 0..out_dim {
            let g = grad_out.data[bi * out_dim + k];
            grad_b[k] = grad_b[k] + g;
            axpy(g, x_row, &mut grad_w[k * x.n..(k + 1) * x.n]);
            axpy(g, &weight[k * x.n..(k + 1) * x.n], grad_x.row_mut(bi));
        }
    }
    (grad_x, grad_w, grad_b)
}

/// Row-wise stable softmax.
pub fn softmax<F: Scalar>(logits: &Tensor2<F>) -> Tensor2<F> {
    let mut probs = logits.clone();
    for bi in 0..logits.b {
        let row = probs.row_mut(bi);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    probs
}

/// Mean cross-entropy of softmax probabilities against class indices.
pub fn cross_entropy_loss<F: Scalar>(probs: &Tensor2<F>, labels: &[usize]) -> F {
    let mut sum = F::zero();
    for (bi, &label) in labels.iter().enumerate() {
        sum = sum - probs.data[bi * probs.n + label].max(c(1e-300)).ln();
    }
    sum / c::<F>(labels.len() as f64)
}

/// Gradient of the mean cross-entropy with respect to the logits:
/// `(probs - onehot) / B`.
pub fn softmax_cross_entropy_backward<F: Scalar>(
    probs: &Tensor2<F>,
    labels: &[usize],
) -> Tensor2<F> {
    let inv_b = c::<F>(labels.len() as f64).recip();
    let mut grad = probs.clone();
    for (bi, &label) in labels.iter().enumerate() {
        let row = grad.row_mut(bi);
        for (k, v) in row.iter_mut().enumerate() {
            let target = if k == label { F::one() } else { F::zero() };
            *v = (*v - target) * inv_b;
        }
    }
    grad
}
