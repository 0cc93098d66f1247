//! Scalar and slice kernels shared by the tape and the plain-value paths.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(y / (1 - y))` on `y` clamped to `[eps, 1 - eps]`.
pub fn inverse_sigmoid(y: f64, eps: f64) -> f64 {
    let y = y.clamp(eps, 1.0 - eps);
    (y / (1.0 - y)).ln()
}

/// `sigmoid(u + inverse_sigmoid(r, eps))`, evaluated as
/// `r / (r + (1 - r) e^{-u})` so that `u = 0` returns the clamped `r` exactly.
pub fn shifted_sigmoid(u: f64, r: f64, eps: f64) -> f64 {
    let r = r.clamp(eps, 1.0 - eps);
    if u >= 0.0 {
        r / (r + (1.0 - r) * (-u).exp())
    } else {
        let e = u.exp();
        r * e / (r * e + (1.0 - r))
    }
}

/// Binary cross-entropy of target `t` against `sigmoid(z)`, stable for any `z`.
pub fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[n,m] += a[n,k] · b[k,m]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[kk * m..(kk + 1) * m], orow);
            }
        }
    }
}

/// `out[n,m] += a[n,k] · b[m,k]ᵀ`
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let mut bt = vec![0.0; k * m];
    for j in 0..m {
        for kk in 0..k {
            bt[kk * m + j] = b[j * k + kk];
        }
    }
    matmul_acc(a, &bt, out, n, k, m);
}

/// `out[k,m] += a[n,k]ᵀ · b[n,m]`
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(av, brow, &mut out[kk * m..(kk + 1) * m]);
            }
        }
    }
}

/// In-place softmax over the middle axis of an `[outer, len, inner]` layout.
pub fn softmax_strided(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let max = (0..len).map(|t| data[base + t * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in 0..len {
                let e = (data[base + t * inner] - max).exp();
                data[base + t * inner] = e;
                total += e;
            }
            for t in 0..len {
                data[base + t * inner] /= total;
            }
        }
    }
}

/// One in-range neighbour of a bilinear sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corner {
    /// Row-major pixel index `y * width + x`.
    pub index: usize,
    pub weight: f64,
    /// Derivative of `weight` with respect to the sample's x coordinate.
    pub dx: f64,
    pub dy: f64,
}

/// The four neighbours of continuous pixel coordinate `(px, py)`, where pixel
/// `(i, j)` has its center at `(i, j)`. Neighbours outside the map are `None`.
pub fn bilinear_corners(px: f64, py: f64, height: usize, width: usize) -> [Option<Corner>; 4] {
    let mut out = [None; 4];
    if !px.is_finite() || !py.is_finite() {
        return out;
    }
    let x0 = px.floor();
    let y0 = py.floor();
    if x0 < -1.0 || y0 < -1.0 || x0 > width as f64 || y0 > height as f64 {
        return out;
    }
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let cand = [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (x0, y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (x0 + 1, y0 + 1, fx * fy, fy, fx),
    ];
    for (slot, &(x, y, weight, dx, dy)) in out.iter_mut().zip(&cand) {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            *slot = Some(Corner {
                index: y as usize * width + x as usize,
                weight,
                dx,
                dy,
            });
        }
    }
    out
}
