//! Image folders, the training patch sampler and augmentation.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::load_image;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    /// Side of the square patch cut from each source image.
    pub patch_size: usize,
    /// Side of the square training image the patch is resized to.
    pub image_size: usize,
    pub augment: bool,
    /// Fraction of files, taken from the end of the sorted name list, kept
    /// out of training.
    pub heldout_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { patch_size: 480, image_size: 128, augment: true, heldout_fraction: 0.05 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size < 8 {
            return Err(Error::Config("patch size must be positive and image size at least 8".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config(format!("held-out fraction {} outside [0, 1)", self.heldout_fraction)));
        }
        Ok(())
    }

    /// Number of files held out of `n`.
    pub fn heldout_count(&self, n: usize) -> usize {
        ((n as f64 * self.heldout_fraction).ceil() as usize).min(n.saturating_sub(1))
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    train: Vec<(String, Tensor<f32>)>,
    heldout: Vec<(String, Tensor<f32>)>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files of `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

impl Dataset {
    /// Loads every image in `dir`. The lexicographically last files form
    /// the held-out split; unreadable files are skipped with a warning.
    pub fn open(dir: &Path, spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let files = list_images(dir)?;
        let split = files.len() - spec.heldout_count(files.len());
        let load = |paths: &[PathBuf]| {
            let mut out = Vec::new();
            for p in paths {
                match load_image::<f32>(p) {
                    Ok(img) => out.push((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), img)),
                    Err(e) => log::warn!("skipping {}: {e}", p.display()),
                }
            }
            out
        };
        let train = load(&files[..split]);
        let heldout = load(&files[split..]);
        if train.is_empty() {
            return Err(Error::Dataset(format!("no readable training images in {}", dir.display())));
        }
        Ok(Self { spec, train, heldout })
    }

    pub fn from_images(spec: DatasetSpec, train: Vec<Tensor<f32>>, heldout: Vec<Tensor<f32>>) -> Result<Self> {
        spec.validate()?;
        if train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let name = |prefix: &str, v: Vec<Tensor<f32>>| -> Vec<_> {
            v.into_iter().enumerate().map(|(i, t)| (format!("{prefix}{i:05}"), t)).collect()
        };
        Ok(Self { spec, train: name("train", train), heldout: name("heldout", heldout) })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn heldout_names(&self) -> impl Iterator<Item = &str> {
        self.heldout.iter().map(|(n, _)| n.as_str())
    }

    /// Random image → random patch (after upscaling small images) → resize →
    /// optional random flip/rotation.
    pub fn sample_training_item(&self, rng: &mut impl Rng) -> Tensor<f32> {
        let (_, img) = &self.train[rng.gen_range(0..self.train.len())];
        let src = upscale_to(img, self.spec.patch_size);
        let (h, w, _) = src.hwc().expect("images are 3-D");
        let ph = self.spec.patch_size.min(h);
        let pw = self.spec.patch_size.min(w);
        let top = rng.gen_range(0..=h - ph);
        let left = rng.gen_range(0..=w - pw);
        let patch = src.window(top, left, ph, pw).expect("patch lies inside");
        let out = resize_bilinear(&patch, self.spec.image_size, self.spec.image_size);
        if self.spec.augment {
            apply_symmetry(&out, rng.gen_range(0..8))
        } else {
            out
        }
    }

    /// Held-out images: centre patch, resized, never augmented.
    pub fn heldout_items(&self) -> Vec<Tensor<f32>> {
        self.heldout.iter().map(|(_, img)| center_item(&self.spec, img)).collect()
    }

    /// Every image (train then held-out) prepared like a held-out item.
    pub fn all_items(&self) -> Vec<Tensor<f32>> {
        self.train.iter().chain(&self.heldout).map(|(_, img)| center_item(&self.spec, img)).collect()
    }
}

/// Deterministic preparation for evaluation: centre patch, resized.
pub fn center_item(spec: &DatasetSpec, img: &Tensor<f32>) -> Tensor<f32> {
    let src = upscale_to(img, spec.patch_size);
    let (h, w, _) = src.hwc().expect("images are 3-D");
    let ph = spec.patch_size.min(h);
    let pw = spec.patch_size.min(w);
    let patch = src.window((h - ph) / 2, (w - pw) / 2, ph, pw).expect("patch lies inside");
    resize_bilinear(&patch, spec.image_size, spec.image_size)
}

/// Enlarges the image so its shorter side is at least `min_side`.
fn upscale_to(img: &Tensor<f32>, min_side: usize) -> Tensor<f32> {
    let (h, w, _) = img.hwc().expect("images are 3-D");
    let short = h.min(w);
    if short >= min_side {
        return img.clone();
    }
    let f = min_side as f64 / short as f64;
    let nh = ((h as f64 * f).ceil() as usize).max(min_side);
    let nw = ((w as f64 * f).ceil() as usize).max(min_side);
    resize_bilinear(img, nh, nw)
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(img: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (h, w, c) = img.hwc().expect("images are 3-D");
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let coord = |o: usize, out_n: usize, in_n: usize| {
        let s = ((o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5).clamp(0.0, (in_n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(in_n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..ow).map(|x| coord(x, ow, w)).collect();
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, h);
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - fx) + img.at(y0, x1, ch) * fx;
                let bot = img.at(y1, x0, ch) * (1.0 - fx) + img.at(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out).expect("sized above")
}

/// One of the eight square symmetries: `index % 4` quarter turns
/// counter-clockwise, preceded by a horizontal flip when `index >= 4`.
pub fn apply_symmetry<T: crate::Real>(img: &Tensor<T>, index: usize) -> Tensor<T> {
    let (h, w, c) = img.hwc().expect("images are 3-D");
    let flip = index >= 4;
    let turns = index % 4;
    let (oh, ow) = if turns.is_multiple_of(2) { (h, w) } else { (w, h) };
    Tensor::from_fn(oh, ow, c, |y, x, ch| {
        // map the output coordinate back through the rotation
        let (sy, sx) = match turns {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        };
        let sx = if flip { w - 1 - sx } else { sx };
        img.at(sy, sx, ch)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::save_image;
    use crate::synth::natural_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tagged(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(h, w, 3, |y, x, c| (y * 100 + x * 3 + c) as f32)
    }

    #[test]
    fn symmetries_are_distinct_and_invertible() {
        let img = tagged(4, 4);
        let all: Vec<_> = (0..8).map(|i| apply_symmetry(&img, i)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i], all[j]);
            }
        }
        // four quarter turns are the identity
        let mut t = img.clone();
        for _ in 0..4 {
            t = apply_symmetry(&t, 1);
        }
        assert_eq!(t, img);
        assert_eq!(apply_symmetry(&apply_symmetry(&img, 4), 4), img);
        assert_eq!(apply_symmetry(&tagged(2, 5), 1).shape(), &[5, 2, 3]);
        // counter-clockwise: the top-right corner moves to the top-left
        assert_eq!(apply_symmetry(&img, 1).at(0, 0, 0), img.at(0, 3, 0));
    }

    #[test]
    fn bilinear_resize() {
        let flat = Tensor::full(&[7, 9, 3], 0.25f32);
        assert_eq!(resize_bilinear(&flat, 20, 3), Tensor::full(&[20, 3, 3], 0.25));
        // a horizontal ramp stays a ramp when doubled
        let ramp = Tensor::from_fn(1, 4, 1, |_, x, _| x as f32);
        let big = resize_bilinear(&ramp, 1, 8);
        let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (a, b) in big.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn split_and_sampling() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..40 {
            save_image(&natural_image::<f32>(30, 50, i), &dir.path().join(format!("img{i:03}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let spec = DatasetSpec { patch_size: 40, image_size: 16, augment: true, heldout_fraction: 0.05 };
        let ds = Dataset::open(dir.path(), spec.clone()).unwrap();
        // 41 image files: the last three names are held out and "broken.png" sorts first
        assert_eq!(ds.heldout_names().collect::<Vec<_>>(), ["img037.png", "img038.png", "img039.png"]);
        assert_eq!(ds.train_len(), 37);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x = ds.sample_training_item(&mut a);
            assert_eq!(x.shape(), &[16, 16, 3]);
            assert_eq!(x, ds.sample_training_item(&mut b));
        }
        assert!(ds.heldout_items().iter().all(|t| t.shape() == [16, 16, 3]));
        let empty = tempfile::tempdir().unwrap();
        assert!(Dataset::open(empty.path(), spec).is_err());
    }
}
