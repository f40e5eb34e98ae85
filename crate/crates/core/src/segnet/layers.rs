//! Forward and backward kernels for the fixed set of U-Net layers.
//!
//! Convolutions go through im2col and a single gemm per image. Kernels are
//! either 3x3 with same padding or 1x1.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                for y in 0..h {
                    let d = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    d[..x_lo].fill(T::zero());
                    d[x_hi..].fill(T::zero());
                    d[x_lo..x_hi].copy_from_slice(&s[x_lo + kx - 1..x_hi + kx - 1]);
                }
            }
        }
    }
}

fn col2im3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[y * w..(y + 1) * w];
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for xx in x_lo..x_hi {
                        d[xx + kx - 1] += s[xx];
                    }
                }
            }
        }
    }
}

/// Same-padded convolution with a `k x k` kernel, `k` in {1, 3}.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    k: usize,
) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let kk = c * k * k;
    debug_assert_eq!(weight.len(), out_ch * kk);
    let mut data = Vec::with_capacity(n * out_ch * hw);
    for _ in 0..n {
        for &b in bias {
            data.extend(std::iter::repeat_n(b, hw));
        }
    }
    let mut y = Tensor4::from_vec([n, out_ch, h, w], data).expect("conv output shape");
    let mut cols = if k == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for i in 0..n {
        let xi = x.item_slice(i);
        let yi = y.item_slice_mut(i);
        let b_mat: &[T] = if k == 3 {
            im2col3(xi, c, h, w, &mut cols);
            &cols
        } else {
            xi
        };
        T::gemm(
            out_ch,
            kk,
            hw,
            T::one(),
            weight,
            kk as isize,
            1,
            b_mat,
            hw as isize,
            1,
            T::one(),
            yi,
            hw as isize,
            1,
        );
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
    weight: &[T],
    k: usize,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Tensor4<T>> {
    let [n, c, h, w] = x.shape();
    let out_ch = dy.channels();
    let hw = h * w;
    let kk = c * k * k;
    let mut cols = if k == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
    let mut dcols = if k == 3 && need_dx {
        vec![T::zero(); kk * hw]
    } else {
        Vec::new()
    };
    let mut dx = need_dx.then(|| Tensor4::zeros([n, c, h, w]));
    for i in 0..n {
        let xi = x.item_slice(i);
        let dyi = dy.item_slice(i);
        for (o, g) in db.iter_mut().enumerate() {
            *g += dyi[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        let b_mat: &[T] = if k == 3 {
            im2col3(xi, c, h, w, &mut cols);
            &cols
        } else {
            xi
        };
        // dW += dy_i * cols^T
        T::gemm(
            out_ch,
            hw,
            kk,
            T::one(),
            dyi,
            hw as isize,
            1,
            b_mat,
            1,
            hw as isize,
            T::one(),
            dw,
            kk as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            let dxi = dx.item_slice_mut(i);
            let target: &mut [T] = if k == 3 { &mut dcols } else { dxi };
            // W^T * dy_i
            T::gemm(
                kk,
                out_ch,
                hw,
                T::one(),
                weight,
                1,
                kk as isize,
                dyi,
                hw as isize,
                1,
                T::zero(),
                target,
                hw as isize,
                1,
            );
            if k == 3 {
                col2im3(&dcols, c, h, w, dx.item_slice_mut(i));
            }
        }
    }
    dx
}

/// Per-channel statistics of one training batch (biased variance) and the
/// element count they were taken over.
#[derive(Clone, Debug)]
pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Cached state of a train-mode batch norm + ReLU.
#[derive(Clone, Debug)]
pub(crate) struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub stats: BatchStats<T>,
}

/// Batch norm with batch statistics followed by ReLU, in place.
pub(crate) fn bn_relu_train<T: Scalar>(
    y: &mut Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    keep_cache: bool,
) -> (BatchStats<T>, Option<BnCache<T>>) {
    let [n, c, _, _] = y.shape();
    let plane = y.plane_len();
    let count = n * plane;
    let inv_count = T::one() / T::from_usize(count).unwrap();
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += y.plane(b, ch).iter().copied().sum::<T>();
        }
        let m = s * inv_count;
        let mut v = T::zero();
        for b in 0..n {
            for &e in y.plane(b, ch) {
                let d = e - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v * inv_count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = keep_cache.then(|| Tensor4::zeros(y.shape()));
    for b in 0..n {
        for ch in 0..c {
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let yp = y.plane_mut(b, ch);
            match xhat.as_mut() {
                Some(xh) => {
                    let xp = xh.plane_mut(b, ch);
                    for (v, xv) in yp.iter_mut().zip(xp.iter_mut()) {
                        let z = (*v - m) * is;
                        *xv = z;
                        *v = (g * z + bt).max(T::zero());
                    }
                }
                None => {
                    for v in yp.iter_mut() {
                        *v = (g * ((*v - m) * is) + bt).max(T::zero());
                    }
                }
            }
        }
    }
    let _ = plane;
    let stats = BatchStats { mean, var, count };
    let cache = xhat.map(|xhat| BnCache {
        xhat,
        inv_std,
        stats: stats.clone(),
    });
    (stats, cache)
}

/// Batch norm with running statistics followed by ReLU, in place.
pub(crate) fn bn_relu_eval<T: Scalar>(
    y: &mut Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) {
    let [n, c, _, _] = y.shape();
    let eps = T::lit(BN_EPS);
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
            let shift = beta[ch] - running_mean[ch] * scale;
            for v in y.plane_mut(b, ch) {
                *v = (*v * scale + shift).max(T::zero());
            }
        }
    }
}

/// Turns `dout` (gradient w.r.t. the ReLU output) into the gradient w.r.t.
/// the batch-norm input, accumulating gamma/beta gradients.
pub(crate) fn bn_relu_backward<T: Scalar>(
    dout: &mut Tensor4<T>,
    out: &Tensor4<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let [n, c, _, _] = dout.shape();
    let count = T::from_usize(n * dout.plane_len()).unwrap();
    for ch in 0..c {
        let mut sg = T::zero();
        let mut sb = T::zero();
        for b in 0..n {
            let d = dout.plane_mut(b, ch);
            let o = out.plane(b, ch);
            let xh = cache.xhat.plane(b, ch);
            for ((dv, &ov), &z) in d.iter_mut().zip(o).zip(xh) {
                if ov <= T::zero() {
                    *dv = T::zero();
                }
                sg += *dv * z;
                sb += *dv;
            }
        }
        dgamma[ch] += sg;
        dbeta[ch] += sb;
        let k = gamma[ch] * cache.inv_std[ch] / count;
        for b in 0..n {
            let xh = cache.xhat.plane(b, ch);
            for (dv, &z) in dout.plane_mut(b, ch).iter_mut().zip(xh) {
                *dv = k * (count * *dv - sb - z * sg);
            }
        }
    }
}

/// Folds one batch's statistics into running buffers (unbiased variance).
pub(crate) fn update_running<T: Scalar>(
    stats: &BatchStats<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
) {
    let mom = T::lit(BN_MOMENTUM);
    let keep = T::one() - mom;
    let bessel = if stats.count > 1 {
        T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
    } else {
        T::one()
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = keep * running_mean[ch] + mom * stats.mean[ch];
        running_var[ch] = keep * running_var[ch] + mom * stats.var[ch] * bessel;
    }
}

/// 2x2 max pooling; returns the pooled raster and the argmax slot (0..4) of
/// every output element.
pub(crate) fn maxpool2<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<u8>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    let mut arg = vec![0u8; n * c * oh * ow];
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0;
                    for s in 1..4 {
                        if cand[s] > cand[best] {
                            best = s;
                        }
                    }
                    dst[oy * ow + ox] = cand[best];
                    arg[idx] = best as u8;
                    idx += 1;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool2_backward<T: Scalar>(
    dy: &Tensor4<T>,
    arg: &[u8],
    input_shape: [usize; 4],
) -> Tensor4<T> {
    let [n, c, _, w] = input_shape;
    let (oh, ow) = (dy.height(), dy.width());
    let mut dx = Tensor4::zeros(input_shape);
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let s = arg[idx] as usize;
                    let pos = (2 * oy + s / 2) * w + 2 * ox + s % 2;
                    dst[pos] += g[oy * ow + ox];
                    idx += 1;
                }
            }
        }
    }
    dx
}

/// Inverted dropout in place; returns the multiplicative mask.
pub(crate) fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &mut Tensor4<T>,
    rate: f64,
    rng: &mut R,
) -> Vec<T> {
    let keep_scale = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.as_slice().len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    for (v, m) in x.as_mut_slice().iter_mut().zip(&mask) {
        *v *= *m;
    }
    mask
}

/// 2x bilinear upsampling of one row (half-pixel centers, edge clamped):
/// even outputs take `0.25 * x[i-1] + 0.75 * x[i]`, odd outputs
/// `0.75 * x[i] + 0.25 * x[i+1]`.
#[inline]
fn upsample_line<T: Scalar>(src: &[T], dst: &mut [T], stride_src: usize, stride_dst: usize, n: usize) {
    let (q, tq) = (T::lit(0.25), T::lit(0.75));
    for i in 0..n {
        let c = src[i * stride_src];
        let l = src[i.saturating_sub(1) * stride_src];
        let r = src[(i + 1).min(n - 1) * stride_src];
        dst[2 * i * stride_dst] = q * l + tq * c;
        dst[(2 * i + 1) * stride_dst] = tq * c + q * r;
    }
}

/// Adjoint of [`upsample_line`], accumulating into `dst`.
#[inline]
fn upsample_line_adjoint<T: Scalar>(g: &[T], dst: &mut [T], stride_g: usize, stride_dst: usize, n: usize) {
    let (q, tq) = (T::lit(0.25), T::lit(0.75));
    for i in 0..n {
        let ge = g[2 * i * stride_g];
        let go = g[(2 * i + 1) * stride_g];
        dst[i.saturating_sub(1) * stride_dst] += q * ge;
        dst[i * stride_dst] += tq * ge + tq * go;
        dst[(i + 1).min(n - 1) * stride_dst] += q * go;
    }
}

pub(crate) fn upsample2<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor4::zeros([n, c, 2 * h, 2 * w]);
    let mut rows = vec![T::zero(); h * 2 * w];
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            for r in 0..h {
                upsample_line(&src[r * w..], &mut rows[r * 2 * w..], 1, 1, w);
            }
            let dst = y.plane_mut(b, ch);
            for col in 0..2 * w {
                upsample_line(&rows[col..], &mut dst[col..], 2 * w, 2 * w, h);
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward<T: Scalar>(dy: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor4::zeros([n, c, h, w]);
    let mut rows = vec![T::zero(); h * w2];
    for b in 0..n {
        for ch in 0..c {
            rows.fill(T::zero());
            let g = dy.plane(b, ch);
            for col in 0..w2 {
                upsample_line_adjoint(&g[col..], &mut rows[col..], w2, w2, h);
            }
            let dst = dx.plane_mut(b, ch);
            for r in 0..h {
                upsample_line_adjoint(&rows[r * w2..], &mut dst[r * w..], 1, 1, w);
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    let [n, ca, h, w] = a.shape();
    assert_eq!(
        [b.batch(), b.height(), b.width()],
        [n, h, w],
        "skip connection joins unequal spatial dims"
    );
    let cb = b.channels();
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        data.extend_from_slice(a.item_slice(i));
        data.extend_from_slice(b.item_slice(i));
    }
    Tensor4::from_vec([n, ca + cb, h, w], data).expect("concat shape")
}

pub(crate) fn split<T: Scalar>(d: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    let [n, c, h, w] = d.shape();
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * h * w);
    let mut b = Vec::with_capacity(n * cb * h * w);
    let cut = ca * h * w;
    for i in 0..n {
        let item = d.item_slice(i);
        a.extend_from_slice(&item[..cut]);
        b.extend_from_slice(&item[cut..]);
    }
    (
        Tensor4::from_vec([n, ca, h, w], a).expect("split shape"),
        Tensor4::from_vec([n, cb, h, w], b).expect("split shape"),
    )
}

/// Softmax over the channel axis.
pub(crate) fn softmax_channels<T: Scalar>(logits: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, _, _] = logits.shape();
    let plane = logits.plane_len();
    let mut out = Tensor4::zeros(logits.shape());
    for b in 0..n {
        let src = logits.item_slice(b);
        let dst = out.item_slice_mut(b);
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(src[ch * plane + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (src[ch * plane + p] - m).exp();
                dst[ch * plane + p] = e;
                s += e;
            }
            for ch in 0..c {
                dst[ch * plane + p] /= s;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(probs: &Tensor4<T>, dprobs: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, _, _] = probs.shape();
    let plane = probs.plane_len();
    let mut dz = Tensor4::zeros(probs.shape());
    for b in 0..n {
        let p = probs.item_slice(b);
        let g = dprobs.item_slice(b);
        let d = dz.item_slice_mut(b);
        for px in 0..plane {
            let dot: T = (0..c).map(|ch| p[ch * plane + px] * g[ch * plane + px]).sum();
            for ch in 0..c {
                let i = ch * plane + px;
                d[i] = p[i] * (g[i] - dot);
            }
        }
    }
    dz
}
