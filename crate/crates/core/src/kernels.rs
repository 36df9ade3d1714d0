//! Pure forward kernels shared by the tape ops, the prior builders, and the
//! data pipeline. All loops are plain scalar code; the inner loops run over
//! contiguous slices so the compiler can vectorize them.

use crate::scalar::Scalar;

/// c[m×n] = a[m×k] · b[k×n]
pub fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let f = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + f * brow[j];
            }
        }
    }
}

/// c[m×n] = a[m×k] · b[n×k]ᵀ (dot products of rows)
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for t in 0..k {
                acc = acc + arow[t] * brow[t];
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// c[m×n] = a[k×m]ᵀ · b[k×n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for t in 0..k {
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let f = a[t * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + f * brow[j];
            }
        }
    }
}

/// Row-stable softmax over the trailing dimension, in place over `out`.
pub fn softmax_rows<T: Scalar>(x: &[T], row_len: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    debug_assert_eq!(x.len() % row_len, 0);
    for (xr, or) in x.chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
        let mut mx = xr[0];
        for &v in xr {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in or.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// Cross-correlation: x[ci×h×w] * w[co×ci×kh×kw] -> out[co×ho×wo].
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    x: &[T],
    w: &[T],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), co * ho * wo);
    for oc in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ic in 0..ci {
                    let xo = ic * h * wd;
                    let ko = (oc * ci + ic) * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc = acc
                                + x[xo + iy as usize * wd + ix as usize]
                                    * w[ko + ky * kw + kx];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
}

/// Average pooling over a 2-D map.
#[allow(clippy::too_many_arguments)]
pub fn avg_pool2d<T: Scalar>(
    x: &[T],
    _h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let inv = T::from_f64(1.0 / (kh * kw) as f64);
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = T::zero();
            for ky in 0..kh {
                let row = &x[(oy * sh + ky) * w + ox * sw..];
                for kx in 0..kw {
                    acc = acc + row[kx];
                }
            }
            out[oy * wo + ox] = acc * inv;
        }
    }
}

/// Bilinear resize of one 2-D channel (align_corners = false).
///
/// A scale factor of exactly 1 copies the input bit-for-bit because the
/// source coordinates land on integers with zero fractional weight.
pub fn bilinear_resize2d<T: Scalar>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let v00 = src[y0 * w + x0].as_f64();
            let v01 = src[y0 * w + x1].as_f64();
            let v10 = src[y1 * w + x0].as_f64();
            let v11 = src[y1 * w + x1].as_f64();
            let top = v00 * (1.0 - wx) + v01 * wx;
            let bot = v10 * (1.0 - wx) + v11 * wx;
            out[oy * ow + ox] = T::from_f64(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Nearest-neighbor resize of one 2-D byte channel (labels).
pub fn nearest_resize2d_u8(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = vec![0u8; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).round().clamp(0.0, (h - 1) as f64);
        let y = fy as usize;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).round().clamp(0.0, (w - 1) as f64);
            out[oy * ow + ox] = src[y * w + fx as usize];
        }
    }
    out
}

/// GELU (tanh approximation) and its derivative.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    let half = T::from_f64(0.5);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_deriv<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let three_a = T::from_f64(3.0 * 0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let half = T::from_f64(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three_a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_matches_triple_loop() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.25 + 0.1).collect(); // 3x4
        let mut c = vec![0.0; 8];
        mm(&a, &b, 2, 3, 4, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for t in 0..3 {
                    acc += a[i * 3 + t] * b[t * 4 + j];
                }
                assert!((c[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_variants_agree_with_mm() {
        let a: Vec<f64> = (0..6).map(|v| (v as f64).sin()).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|v| (v as f64).cos()).collect(); // interpret per case
        // mm_nt: a[2x3] * b[2x3]^T == a * t(b)
        let mut c1 = vec![0.0; 4];
        mm_nt(&a, &b, 2, 3, 2, &mut c1);
        let mut bt = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                bt[j * 2 + i] = b[i * 3 + j];
            }
        }
        let mut c2 = vec![0.0; 4];
        mm(&a, &bt, 2, 3, 2, &mut c2);
        for (x, y) in c1.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // mm_tn: a[2x3] as (3x2 transposed) * b[2x3]
        let mut c3 = vec![0.0; 9];
        mm_tn(&a, &b, 3, 2, 3, &mut c3);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c4 = vec![0.0; 9];
        mm(&at, &b, 3, 2, 3, &mut c4);
        for (x, y) in c3.iter().zip(c4.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_handle_large_inputs() {
        let x = vec![1000.0f64, 0.0, -3.0, 2.0, 2.0, 2.0];
        let mut y = vec![0.0; 6];
        softmax_rows(&x, 3, &mut y);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!((y[3] - 1.0 / 3.0).abs() < 1e-12);
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bilinear_identity_is_exact() {
        let src: Vec<f64> = (0..20).map(|v| v as f64 * 0.37).collect();
        let out = bilinear_resize2d(&src, 4, 5, 4, 5);
        assert_eq!(src, out);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_deriv(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
