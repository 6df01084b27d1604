//! Forward and backward kernels for the differentiable primitives.
//!
//! These operate on plain arrays; [`super::Graph`] wires them onto the tape.
//! Every backward kernel takes the upstream gradient and returns gradients
//! only for the inputs the caller asked for.

use crate::tensor::{shape_err, NdArray, Result, Scalar, TensorError};

/// `y[.., i] = Σ_j w[i, j] x[.., j] + b[i]` over the last axis of `x`.
pub fn linear<T: Scalar>(x: &NdArray<T>, w: &NdArray<T>, b: Option<&NdArray<T>>) -> Result<NdArray<T>> {
    let (d, k) = linear_dims(x, w, b)?;
    let rows = x.len() / k.max(1);
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(rows * d);
    for n in 0..rows {
        let xr = &xd[n * k..(n + 1) * k];
        for i in 0..d {
            let wr = &wd[i * k..(i + 1) * k];
            let mut acc = b.map_or(T::zero(), |b| b.data()[i]);
            for (&a, &c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            out.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d;
    NdArray::new(shape, out)
}

fn linear_dims<T: Scalar>(x: &NdArray<T>, w: &NdArray<T>, b: Option<&NdArray<T>>) -> Result<(usize, usize)> {
    let &[d, k] = w.shape() else {
        return Err(shape_err("linear", format!("weight must be 2-d, got {:?}", w.shape())));
    };
    if x.ndim() == 0 || x.last_dim() != k {
        return Err(shape_err(
            "linear",
            format!("input {:?} against weight {:?}", x.shape(), w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [d] {
            return Err(shape_err("linear", format!("bias {:?}, expected [{d}]", b.shape())));
        }
    }
    Ok((d, k))
}

pub struct LinearGrads<T> {
    pub x: Option<NdArray<T>>,
    pub w: Option<NdArray<T>>,
    pub b: Option<NdArray<T>>,
}

pub fn linear_backward<T: Scalar>(
    gy: &NdArray<T>,
    x: &NdArray<T>,
    w: &NdArray<T>,
    need: [bool; 3],
) -> LinearGrads<T> {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / k.max(1);
    let (gd, xd, wd) = (gy.data(), x.data(), w.data());
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); x.len()];
        for n in 0..rows {
            let dxr = &mut dx[n * k..(n + 1) * k];
            for i in 0..d {
                let g = gd[n * d + i];
                if g == T::zero() {
                    continue;
                }
                for (o, &wv) in dxr.iter_mut().zip(&wd[i * k..(i + 1) * k]) {
                    *o += g * wv;
                }
            }
        }
        NdArray::new(x.shape().to_vec(), dx).unwrap()
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); d * k];
        for n in 0..rows {
            let xr = &xd[n * k..(n + 1) * k];
            for i in 0..d {
                let g = gd[n * d + i];
                if g == T::zero() {
                    continue;
                }
                for (o, &xv) in dw[i * k..(i + 1) * k].iter_mut().zip(xr) {
                    *o += g * xv;
                }
            }
        }
        NdArray::new([d, k], dw).unwrap()
    });
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); d];
        for row in gd.chunks(d) {
            for (o, &g) in db.iter_mut().zip(row) {
                *o += g;
            }
        }
        NdArray::new([d], db).unwrap()
    });
    LinearGrads { x: dx, w: dw, b: db }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

fn out_size(op: &'static str, input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if stride == 0 || span < kernel || (span - kernel) % stride != 0 {
        return Err(TensorError::Invalid {
            op,
            detail: format!(
                "output size ({input} + 2*{pad} - {kernel})/{stride} + 1 is not a positive integer"
            ),
        });
    }
    Ok((span - kernel) / stride + 1)
}

pub fn conv_geometry<T: Scalar>(
    x: &NdArray<T>,
    k: &NdArray<T>,
    bias: Option<&NdArray<T>>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Result<ConvGeometry> {
    let op = if depthwise { "depthwise_conv2d" } else { "conv2d" };
    let &[n, c, h, w] = x.shape() else {
        return Err(shape_err(op, format!("input must be NCHW, got {:?}", x.shape())));
    };
    let &[o, kc, kh, kw] = k.shape() else {
        return Err(shape_err(op, format!("kernel must be 4-d, got {:?}", k.shape())));
    };
    if depthwise {
        if o != c || kc != 1 {
            return Err(shape_err(
                op,
                format!("kernel {:?} for {c} input channels", k.shape()),
            ));
        }
    } else if kc != c {
        return Err(shape_err(
            op,
            format!("kernel {:?} for {c} input channels", k.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(shape_err(op, format!("bias {:?}, expected [{o}]", b.shape())));
        }
    }
    let ho = out_size(op, h, kh, stride, pad)?;
    let wo = out_size(op, w, kw, stride, pad)?;
    Ok(ConvGeometry {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
        stride,
        pad,
        depthwise,
    })
}

/// Range of output positions whose tap `j` lands inside `[0, len)`.
#[inline]
fn valid_range(tap: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // input index = o*stride + tap - pad
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if len + pad > tap {
        ((len + pad - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation (no kernel flip). Handles both dense and depthwise layouts.
pub fn conv_forward<T: Scalar>(
    x: &NdArray<T>,
    k: &NdArray<T>,
    bias: Option<&NdArray<T>>,
    g: &ConvGeometry,
) -> NdArray<T> {
    let (xd, kd) = (x.data(), k.data());
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let kc = if g.depthwise { 1 } else { g.c };
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            if let Some(b) = bias {
                dst.fill(b.data()[o]);
            }
            let chans = if g.depthwise { o..o + 1 } else { 0..g.c };
            for c in chans {
                let src = &xd[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                let kci = if g.depthwise { 0 } else { c };
                for i in 0..g.kh {
                    let (ylo, yhi) = valid_range(i, g.pad, g.stride, g.h, g.ho);
                    for j in 0..g.kw {
                        let kv = kd[((o * kc + kci) * g.kh + i) * g.kw + j];
                        if kv == T::zero() {
                            continue;
                        }
                        let (xlo, xhi) = valid_range(j, g.pad, g.stride, g.w, g.wo);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + i - g.pad;
                            let srow = &src[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                            for ox in xlo..xhi {
                                drow[ox] += kv * srow[ox * g.stride + j - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    NdArray::new([g.n, g.o, g.ho, g.wo], out).unwrap()
}

pub struct ConvGrads<T> {
    pub x: Option<NdArray<T>>,
    pub k: Option<NdArray<T>>,
    pub b: Option<NdArray<T>>,
}

pub fn conv_backward<T: Scalar>(
    gy: &NdArray<T>,
    x: &NdArray<T>,
    k: &NdArray<T>,
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (gd, xd, kd) = (gy.data(), x.data(), k.data());
    let plane = g.ho * g.wo;
    let kc = if g.depthwise { 1 } else { g.c };
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dk = need[1].then(|| vec![T::zero(); k.len()]);
    for n in 0..g.n {
        for o in 0..g.o {
            let grow = &gd[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            let chans = if g.depthwise { o..o + 1 } else { 0..g.c };
            for c in chans {
                let base = (n * g.c + c) * g.h * g.w;
                let kci = if g.depthwise { 0 } else { c };
                for i in 0..g.kh {
                    let (ylo, yhi) = valid_range(i, g.pad, g.stride, g.h, g.ho);
                    for j in 0..g.kw {
                        let kidx = ((o * kc + kci) * g.kh + i) * g.kw + j;
                        let kv = kd[kidx];
                        let (xlo, xhi) = valid_range(j, g.pad, g.stride, g.w, g.wo);
                        let mut acc = T::zero();
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + i - g.pad;
                            let row = base + iy * g.w;
                            for ox in xlo..xhi {
                                let gv = grow[oy * g.wo + ox];
                                let ix = ox * g.stride + j - g.pad;
                                if let Some(dx) = dx.as_mut() {
                                    dx[row + ix] += kv * gv;
                                }
                                acc += gv * xd[row + ix];
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); g.o];
        for n in 0..g.n {
            for (o, slot) in db.iter_mut().enumerate() {
                *slot += gd[(n * g.o + o) * plane..(n * g.o + o + 1) * plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        NdArray::new([g.o], db).unwrap()
    });
    ConvGrads {
        x: dx.map(|d| NdArray::new(x.shape().to_vec(), d).unwrap()),
        k: dk.map(|d| NdArray::new(k.shape().to_vec(), d).unwrap()),
        b: db,
    }
}

/// Normalized activations and per-row inverse standard deviations kept for backward.
pub struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &NdArray<T>,
    gamma: &NdArray<T>,
    beta: &NdArray<T>,
    eps: f64,
) -> Result<(NdArray<T>, LayerNormSaved<T>)> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "layer_norm",
            format!(
                "channels {c} against gamma {:?} / beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "layer_norm",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let eps = T::of(eps);
    let cf = T::of(c as f64);
    let rows = x.len() / c.max(1);
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    let (gd, bd) = (gamma.data(), beta.data());
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for (i, &v) in row.iter().enumerate() {
            let h = (v - mean) * inv;
            xhat.push(h);
            out.push(h * gd[i] + bd[i]);
        }
    }
    Ok((
        NdArray::new(x.shape().to_vec(), out)?,
        LayerNormSaved { xhat, inv_std },
    ))
}

pub fn layer_norm_backward<T: Scalar>(
    gy: &NdArray<T>,
    gamma: &NdArray<T>,
    saved: &LayerNormSaved<T>,
    need: [bool; 3],
) -> [Option<NdArray<T>>; 3] {
    let c = gamma.len();
    let cf = T::of(c as f64);
    let gd = gamma.data();
    let dx = need[0].then(|| {
        let mut dx = Vec::with_capacity(gy.len());
        let mut dxhat = vec![T::zero(); c];
        for (r, (grow, hrow)) in gy.data().chunks(c).zip(saved.xhat.chunks(c)).enumerate() {
            let mut sum_d = T::zero();
            let mut sum_dh = T::zero();
            for i in 0..c {
                dxhat[i] = grow[i] * gd[i];
                sum_d += dxhat[i];
                sum_dh += dxhat[i] * hrow[i];
            }
            let scale = saved.inv_std[r] / cf;
            for i in 0..c {
                dx.push(scale * (cf * dxhat[i] - sum_d - hrow[i] * sum_dh));
            }
        }
        NdArray::new(gy.shape().to_vec(), dx).unwrap()
    });
    let dgamma = need[1].then(|| {
        let mut dg = vec![T::zero(); c];
        for (grow, hrow) in gy.data().chunks(c).zip(saved.xhat.chunks(c)) {
            for i in 0..c {
                dg[i] += grow[i] * hrow[i];
            }
        }
        NdArray::new([c], dg).unwrap()
    });
    let dbeta = need[2].then(|| {
        let mut db = vec![T::zero(); c];
        for grow in gy.data().chunks(c) {
            for i in 0..c {
                db[i] += grow[i];
            }
        }
        NdArray::new([c], db).unwrap()
    });
    [dx, dgamma, dbeta]
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/sqrt(2*pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
#[inline]
pub fn phi<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * phi(x)
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    phi(x) + x * T::of(INV_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp()
}

pub fn gelu<T: Scalar>(x: &NdArray<T>) -> NdArray<T> {
    x.map(gelu_scalar)
}

/// Intermediate values of global response normalization.
pub struct GrnSaved<T> {
    /// per (sample, channel) spatial L2 norm
    pub norm: Vec<T>,
    /// per sample: mean over channels of `norm` plus eps
    pub denom: Vec<T>,
}

fn grn_dims<T: Scalar>(x: &NdArray<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(shape_err("grn", format!("input {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let c = x.last_dim();
    let s = if n * c == 0 { 0 } else { x.len() / (n * c) };
    Ok((n, s, c))
}

/// Global response normalization over channel-last input `[N, ..spatial, C]`:
/// `out = gamma·(x·Nx) + beta + x` with `Nx = G / (mean_c G + eps)` and `G`
/// the per-channel spatial L2 norm.
pub fn grn<T: Scalar>(
    x: &NdArray<T>,
    gamma: &NdArray<T>,
    beta: &NdArray<T>,
    eps: f64,
) -> Result<(NdArray<T>, GrnSaved<T>)> {
    let (n, s, c) = grn_dims(x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "grn",
            format!("channels {c} against gamma {:?} / beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut norm = vec![T::zero(); n * c];
    let mut denom = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        let sample = &xd[b * s * c..(b + 1) * s * c];
        let nrm = &mut norm[b * c..(b + 1) * c];
        for px in sample.chunks(c) {
            for (acc, &v) in nrm.iter_mut().zip(px) {
                *acc += v * v;
            }
        }
        for v in nrm.iter_mut() {
            *v = v.sqrt();
        }
        let d = nrm.iter().copied().sum::<T>() / T::of(c as f64) + T::of(eps);
        denom.push(d);
        for px in sample.chunks(c) {
            for ch in 0..c {
                let nx = nrm[ch] / d;
                out.push(gd[ch] * (px[ch] * nx) + bd[ch] + px[ch]);
            }
        }
    }
    Ok((NdArray::new(x.shape().to_vec(), out)?, GrnSaved { norm, denom }))
}

pub fn grn_backward<T: Scalar>(
    gy: &NdArray<T>,
    x: &NdArray<T>,
    gamma: &NdArray<T>,
    saved: &GrnSaved<T>,
    need: [bool; 3],
) -> [Option<NdArray<T>>; 3] {
    let (n, s, c) = grn_dims(x).expect("validated in forward");
    let (xd, gdat, gm) = (x.data(), gy.data(), gamma.data());
    let cf = T::of(c as f64);
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut d_nx = vec![T::zero(); c];
    let mut d_norm = vec![T::zero(); c];
    for b in 0..n {
        let off = b * s * c;
        let nrm = &saved.norm[b * c..(b + 1) * c];
        let den = saved.denom[b];
        d_nx.fill(T::zero());
        for p in 0..s {
            for ch in 0..c {
                let i = off + p * c + ch;
                let g = gdat[i];
                let xv = xd[i];
                let nx = nrm[ch] / den;
                dgamma[ch] += g * xv * nx;
                dbeta[ch] += g;
                d_nx[ch] += g * gm[ch] * xv;
                if let Some(dx) = dx.as_mut() {
                    dx[i] += g * (gm[ch] * nx + T::one());
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            // Nx[c] = G[c] / D with D = mean(G) + eps
            let mut d_den = T::zero();
            for ch in 0..c {
                d_norm[ch] = d_nx[ch] / den;
                d_den -= d_nx[ch] * nrm[ch] / (den * den);
            }
            for v in d_norm.iter_mut() {
                *v += d_den / cf;
            }
            for p in 0..s {
                for ch in 0..c {
                    // dG/dx = x / G; the subgradient at G = 0 is taken as 0
                    if nrm[ch] > T::zero() {
                        let i = off + p * c + ch;
                        dx[i] += d_norm[ch] * xd[i] / nrm[ch];
                    }
                }
            }
        }
    }
    [
        dx.map(|d| NdArray::new(x.shape().to_vec(), d).unwrap()),
        need[1].then(|| NdArray::new([c], dgamma).unwrap()),
        need[2].then(|| NdArray::new([c], dbeta.clone()).unwrap()),
    ]
}

pub fn global_avg_pool<T: Scalar>(x: &NdArray<T>) -> Result<NdArray<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(shape_err("global_avg_pool", format!("input must be NCHW, got {:?}", x.shape())));
    };
    if h * w == 0 {
        return Err(shape_err("global_avg_pool", "empty spatial extent"));
    }
    let area = T::of((h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() / area)
        .collect();
    NdArray::new([n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(gy: &NdArray<T>, in_shape: &[usize]) -> NdArray<T> {
    let area = in_shape[2] * in_shape[3];
    let inv = T::one() / T::of(area as f64);
    NdArray::from_fn(in_shape.to_vec(), |i| gy.data()[i / area] * inv)
}

/// Row-wise softmax over the last axis.
pub fn softmax<T: Scalar>(logits: &NdArray<T>) -> NdArray<T> {
    let k = logits.last_dim().max(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    NdArray::new(logits.shape().to_vec(), out).unwrap()
}

/// Mean cross-entropy of `softmax(logits)` against integer labels.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &NdArray<T>,
    labels: &[usize],
) -> Result<(T, NdArray<T>)> {
    let &[n, k] = logits.shape() else {
        return Err(shape_err("softmax_cross_entropy", format!("logits {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Invalid {
            op: "softmax_cross_entropy",
            detail: format!("label {bad} out of range for {k} classes"),
        });
    }
    if n == 0 {
        return Err(TensorError::Invalid {
            op: "softmax_cross_entropy",
            detail: "empty batch".into(),
        });
    }
    let mut loss = T::zero();
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        // log-sum-exp with max shift
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[y];
    }
    Ok((loss / T::of(n as f64), softmax(logits)))
}
