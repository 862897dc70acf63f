//! Forward and backward kernels on raw NCHW buffers.
//!
//! These are pure functions; the tape in [`crate::tape`] wires them together
//! and owns the saved intermediates.

use crate::scalar::Scalar;
use crate::tensor::{Padding, Result, TensorError};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Output extent and leading (top/left) padding along one spatial axis.
pub fn output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            if kernel > input + total {
                return None;
            }
            Some((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(TensorError::Argument {
                    op: "conv2d",
                    reason: format!("input must be NCHW, got {input:?}"),
                })
            }
        };
        let (cout, wcin, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(TensorError::Argument {
                    op: "conv2d",
                    reason: format!("weight must be [Cout, Cin, kh, kw], got {weight:?}"),
                })
            }
        };
        if stride == 0 {
            return Err(TensorError::Argument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if wcin != cin {
            return Err(TensorError::Shape {
                op: "conv2d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        let window_err = || TensorError::Shape {
            op: "conv2d",
            left: input.to_vec(),
            right: weight.to_vec(),
        };
        let (ho, pad_top) = output_extent(h, kh, stride, padding).ok_or_else(window_err)?;
        let (wo, pad_left) = output_extent(w, kw, stride, padding).ok_or_else(window_err)?;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    /// A 1×1 stride-1 unpadded conv reads the input plane directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn source(&self, out: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = out * self.stride + k;
        if pos < pad || pos - pad >= extent {
            None
        } else {
            Some(pos - pad)
        }
    }
}

/// Unfolds one image `[Cin, H, W]` into `[Cin·kh·kw, Ho·Wo]`.
fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    match g.source(oy, i, g.pad_top, g.h) {
                        None => dst.fill(T::zero()),
                        Some(y) => {
                            let src = &image[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.source(ox, j, g.pad_left, g.w) {
                                    Some(x) => src[x],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto an image, accumulating overlaps.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                for oy in 0..g.ho {
                    let Some(y) = g.source(oy, i, g.pad_top, g.h) else {
                        continue;
                    };
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut image[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        if let Some(x) = g.source(ox, j, g.pad_left, g.w) {
                            dst[x] = dst[x] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation via im2col + GEMM.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let in_image = g.cin * g.h * g.w;
    let out_image = g.cout * plane;
    let mut out = vec![T::zero(); g.n * out_image];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.n {
        let image = &input[n * in_image..(n + 1) * in_image];
        let cols_ref: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        let dst = &mut out[n * out_image..(n + 1) * out_image];
        T::gemm(
            g.cout,
            k,
            plane,
            T::one(),
            weight,
            k as isize,
            1,
            cols_ref,
            plane as isize,
            1,
            T::zero(),
            dst,
            plane as isize,
            1,
        );
        if let Some(bias) = bias {
            for (co, &b) in bias.iter().enumerate() {
                for v in &mut dst[co * plane..(co + 1) * plane] {
                    *v = *v + b;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let in_image = g.cin * g.h * g.w;
    let out_image = g.cout * plane;
    let mut d_input = vec![T::zero(); input.len()];
    let mut d_weight = vec![T::zero(); weight.len()];
    let mut d_bias = vec![T::zero(); g.cout];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let mut d_cols = vec![T::zero(); k * plane];
    for n in 0..g.n {
        let image = &input[n * in_image..(n + 1) * in_image];
        let dy = &grad_out[n * out_image..(n + 1) * out_image];
        for (co, db) in d_bias.iter_mut().enumerate() {
            *db = dy[co * plane..(co + 1) * plane]
                .iter()
                .fold(*db, |acc, &v| acc + v);
        }
        let cols_ref: &[T] = if pointwise {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        // dW[Cout, K] += dY[Cout, P] · colsᵀ[P, K]
        T::gemm(
            g.cout,
            plane,
            k,
            T::one(),
            dy,
            plane as isize,
            1,
            cols_ref,
            1,
            plane as isize,
            T::one(),
            &mut d_weight,
            k as isize,
            1,
        );
        if !need_input {
            continue;
        }
        // dcols[K, P] = Wᵀ[K, Cout] · dY[Cout, P]
        let d_image = &mut d_input[n * in_image..(n + 1) * in_image];
        let target: &mut [T] = if pointwise { d_image } else { &mut d_cols };
        T::gemm(
            k,
            g.cout,
            plane,
            T::one(),
            weight,
            1,
            k as isize,
            dy,
            plane as isize,
            1,
            T::zero(),
            target,
            plane as isize,
            1,
        );
        if !pointwise {
            col2im(g, &d_cols, &mut d_input[n * in_image..(n + 1) * in_image]);
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], k: usize, stride: usize) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(TensorError::Argument {
                    op: "maxpool2d",
                    reason: format!("input must be NCHW, got {input:?}"),
                })
            }
        };
        if stride == 0 || k == 0 {
            return Err(TensorError::Argument {
                op: "maxpool2d",
                reason: "window and stride must be positive".into(),
            });
        }
        let too_large = || TensorError::Argument {
            op: "maxpool2d",
            reason: format!("{k}x{k} window larger than padded input {h}x{w}"),
        };
        let (ho, pad_top) = output_extent(h, k, stride, Padding::Same).ok_or_else(too_large)?;
        let (wo, pad_left) = output_extent(w, k, stride, Padding::Same).ok_or_else(too_large)?;
        Ok(PoolGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.ho, self.wo]
    }
}

/// Windowed maxima with `-inf` padding; returns outputs and the flat input index of each max.
pub fn maxpool_forward<T: Scalar>(g: &PoolGeom, input: &[T]) -> (Vec<T>, Vec<usize>) {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.ho * g.wo);
    let mut argmax = Vec::with_capacity(planes * g.ho * g.wo);
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            let y0 = (oy * g.stride) as isize - g.pad_top as isize;
            for ox in 0..g.wo {
                let x0 = (ox * g.stride) as isize - g.pad_left as isize;
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for dy in 0..g.k as isize {
                    let y = y0 + dy;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.k as isize {
                        let x = x0 + dx;
                        if x < 0 || x >= g.w as isize {
                            continue;
                        }
                        let idx = base + y as usize * g.w + x as usize;
                        // strict '>' keeps the first occurrence on ties
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<T: Scalar>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut d = vec![T::zero(); input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        d[idx] = d[idx] + g;
    }
    d
}

/// Saved state of a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    /// Normalized input (train mode) or `(x - running_mean)` scaled by `inv_std` (infer mode).
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

/// Output, backward cache and, in train mode, the per-channel batch
/// `(mean, biased variance)`.
pub type BnOutput<T> = (Vec<T>, BnCache<T>, Option<(Vec<T>, Vec<T>)>);

/// Batch-norm over (N, H, W) per channel. In train mode returns the batch mean and
/// biased variance so the caller can fold them into the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    dims: (usize, usize, usize, usize),
    input: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    train: bool,
) -> Result<BnOutput<T>> {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let count = n * plane;
    if train && count < 2 {
        return Err(TensorError::DegenerateBatch {
            op: "batchnorm2d",
            count,
        });
    }
    let eps = T::from_f64_lossy(BN_EPSILON);
    let count_t = T::from_usize(count).expect("count fits scalar");
    let mut means = vec![T::zero(); c];
    let mut vars = vec![T::zero(); c];
    if train {
        for ch in 0..c {
            let mut sum = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * plane;
                sum = input[off..off + plane].iter().fold(sum, |a, &v| a + v);
            }
            let mean = sum / count_t;
            let mut sq = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * plane;
                sq = input[off..off + plane].iter().fold(sq, |a, &v| {
                    let d = v - mean;
                    a + d * d
                });
            }
            means[ch] = mean;
            vars[ch] = sq / count_t;
        }
    } else {
        means.copy_from_slice(running_mean);
        vars.copy_from_slice(running_var);
    }
    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (mu, is, g, bt) = (means[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + plane {
                let xh = (input[i] - mu) * is;
                x_hat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    let stats = train.then_some((means, vars));
    Ok((
        out,
        BnCache {
            x_hat,
            inv_std,
            batch_stats: train,
        },
        stats,
    ))
}

pub struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    dims: (usize, usize, usize, usize),
    gamma: &[T],
    cache: &BnCache<T>,
    grad_out: &[T],
) -> BnGrads<T> {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let count = T::from_usize(n * plane).expect("count fits scalar");
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let g = &grad_out[off..off + plane];
            let xh = &cache.x_hat[off..off + plane];
            for (&gi, &xi) in g.iter().zip(xh) {
                d_beta[ch] = d_beta[ch] + gi;
                d_gamma[ch] = d_gamma[ch] + gi * xi;
            }
        }
    }
    let mut d_input = vec![T::zero(); grad_out.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let (sum_dy, sum_dy_xh) = (d_beta[ch], d_gamma[ch]);
                for i in off..off + plane {
                    d_input[i] =
                        scale / count * (count * grad_out[i] - sum_dy - cache.x_hat[i] * sum_dy_xh);
                }
            } else {
                for i in off..off + plane {
                    d_input[i] = scale * grad_out[i];
                }
            }
        }
    }
    BnGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    }
}

/// Folds batch statistics into running estimates with momentum [`BN_MOMENTUM`].
pub fn update_running<T: Scalar>(running: &mut [T], batch: &[T]) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let one_minus = T::one() - m;
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = m * *r + one_minus * b;
    }
}

/// `out[N, U] = x[N, D] · w[D, U] + b`
pub fn dense_forward<T: Scalar>(n: usize, d: usize, u: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
    T::gemm(
        n,
        d,
        u,
        T::one(),
        x,
        d as isize,
        1,
        w,
        u as isize,
        1,
        T::one(),
        &mut out,
        u as isize,
        1,
    );
    out
}

pub struct DenseGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Scalar>(
    n: usize,
    d: usize,
    u: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> DenseGrads<T> {
    let mut dx = vec![T::zero(); n * d];
    let mut dw = vec![T::zero(); d * u];
    // dx = dy · wᵀ
    T::gemm(
        n,
        u,
        d,
        T::one(),
        dy,
        u as isize,
        1,
        w,
        1,
        u as isize,
        T::zero(),
        &mut dx,
        d as isize,
        1,
    );
    // dw = xᵀ · dy
    T::gemm(
        d,
        n,
        u,
        T::one(),
        x,
        1,
        d as isize,
        dy,
        u as isize,
        1,
        T::zero(),
        &mut dw,
        u as isize,
        1,
    );
    let mut db = vec![T::zero(); u];
    for row in dy.chunks_exact(u) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    DenseGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(k: usize, logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(k: usize, probs: &[T], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); probs.len()];
    for ((p, g), d) in probs
        .chunks_exact(k)
        .zip(dy.chunks_exact(k))
        .zip(dx.chunks_exact_mut(k))
    {
        let dot = p.iter().zip(g).fold(T::zero(), |a, (&p, &g)| a + p * g);
        for ((d, &p), &g) in d.iter_mut().zip(p).zip(g) {
            *d = p * (g - dot);
        }
    }
    dx
}

/// Mean negative log-likelihood through a fused log-sum-exp. Returns the loss and
/// the softmax probabilities (needed by the gradient).
pub fn sparse_ce_forward<T: Scalar>(
    k: usize,
    logits: &[T],
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let n = labels.len();
    if n * k != logits.len() {
        return Err(TensorError::Shape {
            op: "sparse_ce_loss",
            left: vec![logits.len() / k.max(1), k],
            right: vec![n],
        });
    }
    let mut total = T::zero();
    for (row, &label) in logits.chunks_exact(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln();
        total = total + (lse - row[label]);
    }
    let loss = total / T::from_usize(n).expect("batch fits scalar");
    Ok((loss, softmax_rows(k, logits)))
}

pub fn sparse_ce_backward<T: Scalar>(k: usize, probs: &[T], labels: &[usize], dloss: T) -> Vec<T> {
    let scale = dloss / T::from_usize(labels.len()).expect("batch fits scalar");
    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (row, &label) in dx.chunks_exact_mut(k).zip(labels) {
        row[label] = row[label] - scale;
    }
    dx
}
