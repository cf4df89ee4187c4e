//! Procedural test images with natural-image statistics: smooth colour
//! gradients, a few sharp-edged shapes, and mild texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

pub fn natural_image<T: Real>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let mut img = vec![base; h * w];

    // low-frequency waves with 1/f amplitudes
    for _ in 0..6 {
        let freq = rng.gen_range(0.5..4.0);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = 0.12 / freq;
        let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
        let (dy, dx) = (angle.sin() * freq / h as f64, angle.cos() * freq / w as f64);
        for y in 0..h {
            for x in 0..w {
                let v = amp * (std::f64::consts::TAU * (dy * y as f64 + dx * x as f64) + phase).sin();
                for (c, t) in tint.iter().enumerate() {
                    img[y * w + x][c] += v * t;
                }
            }
        }
    }

    // flat-shaded discs and rectangles
    for _ in 0..rng.gen_range(2..6) {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        let alpha = rng.gen_range(0.4..0.9);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(0.1..0.35) * h as f64;
        let rx = rng.gen_range(0.1..0.35) * w as f64;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    let px = &mut img[y * w + x];
                    for c in 0..3 {
                        px[c] = (1.0 - alpha) * px[c] + alpha * (colour[c] + 0.1 * u);
                    }
                }
            }
        }
    }

    let grain = rng.gen_range(0.005..0.03);
    Tensor::from_fn(h, w, 3, |y, x, c| {
        let v = img[y * w + x][c] + grain * rng.gen_range(-1.0..1.0);
        T::lit((v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_quantized_and_varied() {
        let a: Tensor<f32> = natural_image(40, 30, 5);
        assert_eq!(a, natural_image(40, 30, 5));
        assert_ne!(a, natural_image(40, 30, 6));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.data().iter().all(|&v| ((v * 255.0).round() - v * 255.0).abs() < 1e-4));
        let mean = a.mean();
        let var = a.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / a.len() as f32;
        assert!(var > 1e-3);
    }
}
