//! Raw forward/backward kernels over slices. The tape wraps these with
//! shape validation and gradient bookkeeping.

use super::tensor::Scalar;

/// `c = a·b + beta·c` where `a` is `m×k` (or `k×m` if `ta`) and `b` is
/// `k×n` (or `n×k` if `tb`), all dense row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents checked above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How a convolution samples outside the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Edge replication; keeps constant inputs constant at the borders.
    Replicate,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Source pixel for padded coordinate `p` along an axis of length `len`.
    #[inline]
    fn src(&self, p: isize, len: usize) -> Option<usize> {
        if p >= 0 && (p as usize) < len {
            Some(p as usize)
        } else {
            match self.mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(p.clamp(0, len as isize - 1) as usize),
            }
        }
    }
}

/// Unfolds `x` (`c_in×h×w`) into a `(c_in·k·k) × (oh·ow)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    let mut out = vec![T::zero(); g.c_in * g.k * g.k * cols];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = g.src((oy * g.stride + ky) as isize - g.pad as isize, g.h);
                    let Some(iy) = iy else { continue };
                    for ox in 0..ow {
                        let ix = g.src((ox * g.stride + kx) as isize - g.pad as isize, g.w);
                        if let Some(ix) = ix {
                            dst[oy * ow + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = g.src((oy * g.stride + ky) as isize - g.pad as isize, g.h);
                    let Some(iy) = iy else { continue };
                    for ox in 0..ow {
                        let ix = g.src((ox * g.stride + kx) as isize - g.pad as isize, g.w);
                        if let Some(ix) = ix {
                            let d = &mut dx[(ci * g.h + iy) * g.w + ix];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One output coordinate of a corner-aligned linear resampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f64,
}

/// Corner-aligned sampling positions: output `0` maps to input `0` and
/// output `out-1` to input `len-1`.
pub fn resize_taps(len: usize, out: usize) -> Vec<Tap> {
    (0..out)
        .map(|o| {
            if len == 1 || out == 1 {
                return Tap {
                    lo: 0,
                    hi: 0,
                    w_hi: 0.0,
                };
            }
            let src = (o * (len - 1)) as f64 / (out - 1) as f64;
            let lo = (src.floor() as usize).min(len - 2);
            Tap {
                lo,
                hi: lo + 1,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

/// Exact at both endpoints and for equal inputs.
fn lerp<T: Scalar>(a: T, b: T, w: T) -> T {
    if w == T::zero() || a == b {
        a
    } else if w == T::one() {
        b
    } else {
        (T::one() - w) * a + w * b
    }
}

pub fn resize_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    ys: &[Tap],
    xs: &[Tap],
) -> Vec<T> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, ty) in ys.iter().enumerate() {
            let wy = T::of(ty.w_hi);
            let r0 = &plane[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &plane[ty.hi * w..(ty.hi + 1) * w];
            for (ox, tx) in xs.iter().enumerate() {
                let wx = T::of(tx.w_hi);
                let top = lerp(r0[tx.lo], r0[tx.hi], wx);
                let bot = lerp(r1[tx.lo], r1[tx.hi], wx);
                out[(ch * oh + oy) * ow + ox] = lerp(top, bot, wy);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn resize_backward<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    ys: &[Tap],
    xs: &[Tap],
    dx: &mut [T],
) {
    let (oh, ow) = (ys.len(), xs.len());
    let one = T::one();
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, ty) in ys.iter().enumerate() {
            let wy = T::of(ty.w_hi);
            for (ox, tx) in xs.iter().enumerate() {
                let wx = T::of(tx.w_hi);
                let go = g[(ch * oh + oy) * ow + ox];
                let gt = go * (one - wy);
                let gb = go * wy;
                plane[ty.lo * w + tx.lo] = plane[ty.lo * w + tx.lo] + gt * (one - wx);
                plane[ty.lo * w + tx.hi] = plane[ty.lo * w + tx.hi] + gt * wx;
                plane[ty.hi * w + tx.lo] = plane[ty.hi * w + tx.lo] + gb * (one - wx);
                plane[ty.hi * w + tx.hi] = plane[ty.hi * w + tx.hi] + gb * wx;
            }
        }
    }
}

/// Numerically stable softmax of one row, in place. Entries with
/// `allow[j] == false` get probability exactly zero.
pub fn softmax_row<T: Scalar>(row: &mut [T], allow: Option<&[bool]>) {
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allow.is_none_or(|a| a[j]) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allow.is_none_or(|a| a[j]) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Given probabilities `p` and upstream `g` for one row, writes the logit
/// gradient `p ⊙ (g − ⟨g, p⟩)` into `g`.
pub fn softmax_row_backward<T: Scalar>(p: &[T], g: &mut [T]) {
    let dot = p.iter().zip(g.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    for (gv, &pv) in g.iter_mut().zip(p) {
        *gv = pv * (*gv - dot);
    }
}

/// Attention over already-projected `q` (`mq×d`), `k`, `v` (`mk×d`).
/// Returns the head-concatenated output (`mq×d`) and the probabilities
/// (`heads×mq×mk`).
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    mq: usize,
    mk: usize,
    d: usize,
    heads: usize,
    allow: Option<&[bool]>,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); mq * d];
    let mut probs = vec![T::zero(); heads * mq * mk];
    for h in 0..heads {
        let p = &mut probs[h * mq * mk..(h + 1) * mq * mk];
        // SAFETY: head column windows lie inside the row-major q/k/v/out.
        unsafe {
            T::gemm(
                mq,
                dh,
                mk,
                scale,
                q.as_ptr().add(h * dh),
                d as isize,
                1,
                k.as_ptr().add(h * dh),
                1,
                d as isize,
                T::zero(),
                p.as_mut_ptr(),
                mk as isize,
                1,
            );
        }
        for i in 0..mq {
            softmax_row(
                &mut p[i * mk..(i + 1) * mk],
                allow.map(|a| &a[i * mk..(i + 1) * mk]),
            );
        }
        unsafe {
            T::gemm(
                mq,
                mk,
                dh,
                T::one(),
                p.as_ptr(),
                mk as isize,
                1,
                v.as_ptr().add(h * dh),
                d as isize,
                1,
                T::zero(),
                out.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
    }
    (out, probs)
}

pub struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    mq: usize,
    mk: usize,
    d: usize,
    heads: usize,
) -> AttentionGrads<T> {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); mq * d];
    let mut dk = vec![T::zero(); mk * d];
    let mut dv = vec![T::zero(); mk * d];
    let mut ds = vec![T::zero(); mq * mk];
    for h in 0..heads {
        let p = &probs[h * mq * mk..(h + 1) * mq * mk];
        // SAFETY: as in the forward pass; all buffers sized above.
        unsafe {
            // dV_h = Pᵀ · dO_h
            T::gemm(
                mk,
                mq,
                dh,
                T::one(),
                p.as_ptr(),
                1,
                mk as isize,
                g.as_ptr().add(h * dh),
                d as isize,
                1,
                T::zero(),
                dv.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
            // dP = dO_h · V_hᵀ
            T::gemm(
                mq,
                dh,
                mk,
                T::one(),
                g.as_ptr().add(h * dh),
                d as isize,
                1,
                v.as_ptr().add(h * dh),
                1,
                d as isize,
                T::zero(),
                ds.as_mut_ptr(),
                mk as isize,
                1,
            );
        }
        for i in 0..mq {
            softmax_row_backward(&p[i * mk..(i + 1) * mk], &mut ds[i * mk..(i + 1) * mk]);
        }
        unsafe {
            // dQ_h = scale · dS · K_h
            T::gemm(
                mq,
                mk,
                dh,
                scale,
                ds.as_ptr(),
                mk as isize,
                1,
                k.as_ptr().add(h * dh),
                d as isize,
                1,
                T::zero(),
                dq.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
            // dK_h = scale · dSᵀ · Q_h
            T::gemm(
                mk,
                mq,
                dh,
                scale,
                ds.as_ptr(),
                1,
                mk as isize,
                q.as_ptr().add(h * dh),
                d as isize,
                1,
                T::zero(),
                dk.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
    }
    AttentionGrads { dq, dk, dv }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Standardizes each length-`n` row of `x`, returning `(xhat, rstd)`.
pub fn layer_norm_rows<T: Scalar>(x: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_n = T::of(1.0 / n as f64);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) * inv_n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
            * inv_n;
        let rs = T::one() / (var + T::of(NORM_EPS)).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Backward of plain standardization: given `dxhat` over one group of
/// length `n`, returns `dx`.
pub fn standardize_backward<T: Scalar>(dxhat: &[T], xhat: &[T], rstd: T, dx: &mut [T]) {
    let n = T::of(dxhat.len() as f64);
    let s1 = dxhat.iter().fold(T::zero(), |a, &b| a + b);
    let s2 = dxhat
        .iter()
        .zip(xhat)
        .fold(T::zero(), |a, (&g, &xh)| a + g * xh);
    for ((o, &g), &xh) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = *o + rstd / n * (n * g - s1 - xh * s2);
    }
}
