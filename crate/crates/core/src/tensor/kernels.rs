//! Slice-level numeric kernels. Shapes are validated by the caller; every
//! reduction runs in a fixed sequential order so results are reproducible.

use crate::scalar::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aip * *bv;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_at<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aip * *bv;
            }
        }
    }
    c
}

/// Source taps along one axis for align-corners=false bilinear resampling.
#[derive(Clone, Copy, Debug)]
pub struct Tap<S> {
    pub lo: usize,
    pub hi: usize,
    pub frac: S,
}

pub fn bilinear_taps<S: Scalar>(src: usize, dst: usize) -> Vec<Tap<S>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if lo == hi { 0.0 } else { pos - lo as f64 };
            Tap {
                lo,
                hi,
                frac: S::lit(frac),
            }
        })
        .collect()
}

pub fn resample_bilinear<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
) -> Vec<S> {
    if h == h2 && w == w2 {
        return x.to_vec();
    }
    let ty = bilinear_taps::<S>(h, h2);
    let tx = bilinear_taps::<S>(w, w2);
    let one = S::one();
    let mut out = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in &ty {
            let r0 = &plane[y.lo * w..(y.lo + 1) * w];
            let r1 = &plane[y.hi * w..(y.hi + 1) * w];
            for t in &tx {
                let top = r0[t.lo] * (one - t.frac) + r0[t.hi] * t.frac;
                let bot = r1[t.lo] * (one - t.frac) + r1[t.hi] * t.frac;
                out.push(top * (one - y.frac) + bot * y.frac);
            }
        }
    }
    out
}

/// Adjoint of [`resample_bilinear`].
pub fn resample_bilinear_backward<S: Scalar>(
    dy: &[S],
    c: usize,
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
) -> Vec<S> {
    if h == h2 && w == w2 {
        return dy.to_vec();
    }
    let ty = bilinear_taps::<S>(h, h2);
    let tx = bilinear_taps::<S>(w, w2);
    let one = S::one();
    let mut dx = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let src = &dy[ch * h2 * w2..(ch + 1) * h2 * w2];
        for (yi, y) in ty.iter().enumerate() {
            for (xi, t) in tx.iter().enumerate() {
                let g = src[yi * w2 + xi];
                let gt = g * (one - y.frac);
                let gb = g * y.frac;
                plane[y.lo * w + t.lo] += gt * (one - t.frac);
                plane[y.lo * w + t.hi] += gt * t.frac;
                plane[y.hi * w + t.lo] += gb * (one - t.frac);
                plane[y.hi * w + t.hi] += gb * t.frac;
            }
        }
    }
    dx
}

/// Rearranges non-overlapping `k×k` patches into channels:
/// `[C, H, W] -> [C·k·k, H/k, W/k]`, channel index `c·k² + dy·k + dx`.
pub fn space_to_depth<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![S::zero(); c * k * k * ho * wo];
    for ch in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let oc = (ch * k + dy) * k + dx;
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[(oc * ho + oy) * wo + ox] = x[(ch * h + oy * k + dy) * w + ox * k + dx];
                    }
                }
            }
        }
    }
    out
}

pub fn depth_to_space<S: Scalar>(y: &[S], c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let oc = (ch * k + dy) * k + dx;
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[(ch * h + oy * k + dy) * w + ox * k + dx] = y[(oc * ho + oy) * wo + ox];
                    }
                }
            }
        }
    }
    out
}

/// Numerically stable softmax along the leading axis of a `[K, N]` layout.
pub fn softmax_leading<S: Scalar>(x: &[S], k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for p in 0..n {
        let mut mx = S::neg_infinity();
        for c in 0..k {
            mx = mx.max(x[c * n + p]);
        }
        let mut z = S::zero();
        for c in 0..k {
            let e = (x[c * n + p] - mx).exp();
            out[c * n + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * n + p] /= z;
        }
    }
    out
}

/// Tanh approximation of GELU and its derivative.
pub fn gelu<S: Scalar>(x: S) -> S {
    let k = S::lit(0.797_884_560_802_865_4);
    let a = S::lit(0.044_715);
    let half = S::lit(0.5);
    half * x * (S::one() + (k * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let k = S::lit(0.797_884_560_802_865_4);
    let a = S::lit(0.044_715);
    let half = S::lit(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let du = k * (S::one() + S::lit(3.0) * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
