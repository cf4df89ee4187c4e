//! Orthonormal 8×8 type-II DCT and its inverse.

use crate::tensor::Real;

pub const BLOCK: usize = 8;

/// `basis[u][x] = α(u) · cos((2x + 1)uπ / 16)` with `α(0) = √(1/8)`, `α(u>0) = √(2/8)`.
fn basis<T: Real>() -> [[T; BLOCK]; BLOCK] {
    let mut m = [[T::zero(); BLOCK]; BLOCK];
    for (u, row) in m.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            let angle = (2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0;
            *v = T::lit(alpha * angle.cos());
        }
    }
    m
}

/// Row-major 8×8 block → row-major coefficients, `C · X · Cᵀ`.
pub fn dct8_forward<T: Real>(block: &[T; 64]) -> [T; 64] {
    let c = basis::<T>();
    transform(block, &c, false)
}

/// Inverse of [`dct8_forward`], `Cᵀ · F · C`.
pub fn dct8_inverse<T: Real>(coeffs: &[T; 64]) -> [T; 64] {
    let c = basis::<T>();
    transform(coeffs, &c, true)
}

fn transform<T: Real>(input: &[T; 64], c: &[[T; BLOCK]; BLOCK], inverse: bool) -> [T; 64] {
    // m(i, j) is C for the forward pass and Cᵀ for the inverse.
    let m = |i: usize, j: usize| if inverse { c[j][i] } else { c[i][j] };
    let mut tmp = [T::zero(); 64];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            let mut acc = T::zero();
            for k in 0..BLOCK {
                acc += m(i, k) * input[k * BLOCK + j];
            }
            tmp[i * BLOCK + j] = acc;
        }
    }
    let mut out = [T::zero(); 64];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            let mut acc = T::zero();
            for k in 0..BLOCK {
                acc += tmp[i * BLOCK + k] * m(j, k);
            }
            out[i * BLOCK + j] = acc;
        }
    }
    out
}

/// Applies the forward or inverse transform to every 8×8 block of every
/// channel of an `h × w × c` buffer; `h` and `w` must be multiples of 8.
pub(crate) fn blockwise<T: Real>(data: &[T], h: usize, w: usize, ch: usize, inverse: bool) -> Vec<T> {
    debug_assert!(h.is_multiple_of(BLOCK) && w.is_multiple_of(BLOCK));
    let c = basis::<T>();
    let mut out = vec![T::zero(); data.len()];
    let mut block = [T::zero(); 64];
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            for k in 0..ch {
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        block[i * BLOCK + j] = data[((by + i) * w + bx + j) * ch + k];
                    }
                }
                let t = transform(&block, &c, inverse);
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        out[((by + i) * w + bx + j) * ch + k] = t[i * BLOCK + j];
                    }
                }
            }
        }
    }
    out
}
