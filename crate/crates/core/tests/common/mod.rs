//! Helpers shared by the integration tests: an independent JPEG reference
//! and a finite-difference gradient checker.

#![allow(dead_code)]

use std::f64::consts::PI;

use invmark_core::Tensor;

const LUMA: [[f64; 8]; 8] = [
    [16., 11., 10., 16., 24., 40., 51., 61.],
    [12., 12., 14., 19., 26., 58., 60., 55.],
    [14., 13., 16., 24., 40., 57., 69., 56.],
    [14., 17., 22., 29., 51., 87., 80., 62.],
    [18., 22., 37., 56., 68., 109., 103., 77.],
    [24., 35., 55., 64., 81., 104., 113., 92.],
    [49., 64., 78., 87., 103., 121., 120., 101.],
    [72., 92., 95., 98., 112., 100., 103., 99.],
];

fn chroma(v: usize, u: usize) -> f64 {
    const TOP: [[f64; 4]; 4] = [[17., 18., 24., 47.], [18., 21., 26., 66.], [24., 26., 56., 99.], [47., 66., 99., 99.]];
    if v < 4 && u < 4 {
        TOP[v][u]
    } else {
        99.0
    }
}

/// IJG quality scaling of one table entry.
fn scaled(base: f64, q: u32) -> f64 {
    let s = if q < 50 { (5000 / q) as f64 } else { (200 - 2 * q) as f64 };
    ((base * s + 50.0) / 100.0).floor().clamp(1.0, 255.0)
}

fn round_half_away(x: f64) -> f64 {
    x.signum() * (x.abs() + 0.5).floor()
}

/// Textbook 2-D DCT-II of one block by direct summation.
fn fdct(block: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    let c = |k: usize| if k == 0 { (0.5f64).sqrt() } else { 1.0 };
    let mut out = [[0.0; 8]; 8];
    for (v, row) in out.iter_mut().enumerate() {
        for (u, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (y, brow) in block.iter().enumerate() {
                for (x, &f) in brow.iter().enumerate() {
                    s += f * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos() * ((2 * y + 1) as f64 * v as f64 * PI / 16.0).cos();
                }
            }
            *o = 0.25 * c(u) * c(v) * s;
        }
    }
    out
}

fn idct(coef: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    let c = |k: usize| if k == 0 { (0.5f64).sqrt() } else { 1.0 };
    let mut out = [[0.0; 8]; 8];
    for (y, row) in out.iter_mut().enumerate() {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (v, crow) in coef.iter().enumerate() {
                for (u, &f) in crow.iter().enumerate() {
                    s += c(u) * c(v) * f * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos() * ((2 * y + 1) as f64 * v as f64 * PI / 16.0).cos();
                }
            }
            *o = 0.25 * s;
        }
    }
    out
}

/// Baseline JPEG round trip with 4:4:4 sampling and exact rounding, written
/// from the JFIF formulas. Sides must be multiples of 8; values in [0, 1].
pub fn reference_jpeg(img: &Tensor<f64>, q: u32) -> Tensor<f64> {
    let (h, w) = (img.height(), img.width());
    assert!(h % 8 == 0 && w % 8 == 0);
    let mut planes = vec![vec![0.0; h * w]; 3];
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (img.at(y, x, 0) * 255.0, img.at(y, x, 1) * 255.0, img.at(y, x, 2) * 255.0);
            planes[0][y * w + x] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1][y * w + x] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
            planes[2][y * w + x] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
        }
    }
    for (ch, plane) in planes.iter_mut().enumerate() {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = plane[(by + y) * w + bx + x] - 128.0;
                    }
                }
                let mut coef = fdct(&block);
                for (v, row) in coef.iter_mut().enumerate() {
                    for (u, f) in row.iter_mut().enumerate() {
                        let step = scaled(if ch == 0 { LUMA[v][u] } else { chroma(v, u) }, q);
                        *f = round_half_away(*f / step) * step;
                    }
                }
                let back = idct(&coef);
                for (y, row) in back.iter().enumerate() {
                    for (x, v) in row.iter().enumerate() {
                        plane[(by + y) * w + bx + x] = v + 128.0;
                    }
                }
            }
        }
    }
    Tensor::from_fn(h, w, 3, |y, x, c| {
        let (yy, cb, cr) = (planes[0][y * w + x], planes[1][y * w + x] - 128.0, planes[2][y * w + x] - 128.0);
        let v = match c {
            0 => yy + 1.402 * cr,
            1 => yy - 0.344136 * cb - 0.714136 * cr,
            _ => yy + 1.772 * cb,
        };
        (v / 255.0).clamp(0.0, 1.0)
    })
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub failed: usize,
    pub worst: f64,
    pub worst_at: usize,
}

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares `analytic` against central differences of `f` at every
/// coordinate of `x`.
pub fn check_gradient(x: &[f64], analytic: &[f64], h: f64, tol: f64, mut f: impl FnMut(&[f64]) -> f64) -> GradCheck {
    assert_eq!(x.len(), analytic.len());
    let mut out = GradCheck::default();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let e = rel_err(analytic[i], (up - down) / (2.0 * h));
        out.checked += 1;
        if e >= tol {
            out.failed += 1;
        }
        if e > out.worst {
            out.worst = e;
            out.worst_at = i;
        }
    }
    out
}
