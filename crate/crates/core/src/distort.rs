//! The noise layer: 8-bit quantization, the training attacks, the
//! differentiable JPEG simulator, real JPEG, and combined-noise sampling.
//!
//! Every training attack is built from tape operations, so the same code
//! serves the differentiable training path ([`attack_on`]) and plain tensor
//! evaluation ([`attack`]).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{from_rgb8, to_rgb8};
use crate::tape::{Axis, GradTape, Var};
use crate::tensor::{Real, Tensor};

/// Smallest side of a crop or cropout rectangle.
pub const MIN_REGION: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Identity,
    Crop,
    Cropout,
    Dropout,
    Gaussian,
    JpegSim,
    #[serde(alias = "jpeg")]
    JpegReal,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 7] = [
        NoiseKind::Identity,
        NoiseKind::Crop,
        NoiseKind::Cropout,
        NoiseKind::Dropout,
        NoiseKind::Gaussian,
        NoiseKind::JpegSim,
        NoiseKind::JpegReal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Identity => "identity",
            NoiseKind::Crop => "crop",
            NoiseKind::Cropout => "cropout",
            NoiseKind::Dropout => "dropout",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::JpegSim => "jpeg_sim",
            NoiseKind::JpegReal => "jpeg_real",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One concrete distortion. Each variant carries only the parameters its
/// kind uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Identity,
    Crop { p: f64, seed: u64 },
    Cropout { p: f64, seed: u64 },
    Dropout { p: f64, seed: u64 },
    Gaussian { sigma: f64 },
    JpegSim { q: u8 },
    JpegReal { q: u8 },
}

impl NoiseSpec {
    pub fn kind(&self) -> NoiseKind {
        match self {
            NoiseSpec::Identity => NoiseKind::Identity,
            NoiseSpec::Crop { .. } => NoiseKind::Crop,
            NoiseSpec::Cropout { .. } => NoiseKind::Cropout,
            NoiseSpec::Dropout { .. } => NoiseKind::Dropout,
            NoiseSpec::Gaussian { .. } => NoiseKind::Gaussian,
            NoiseSpec::JpegSim { .. } => NoiseKind::JpegSim,
            NoiseSpec::JpegReal { .. } => NoiseKind::JpegReal,
        }
    }

    /// The intensity scalar, if the kind has one.
    pub fn intensity(&self) -> Option<f64> {
        match *self {
            NoiseSpec::Identity => None,
            NoiseSpec::Crop { p, .. } | NoiseSpec::Cropout { p, .. } | NoiseSpec::Dropout { p, .. } => Some(p),
            NoiseSpec::Gaussian { sigma } => Some(sigma),
            NoiseSpec::JpegSim { q } | NoiseSpec::JpegReal { q } => Some(q as f64),
        }
    }

    /// Builds a spec of `kind` at `intensity`; the seed is ignored by
    /// deterministic kinds.
    pub fn with_intensity(kind: NoiseKind, intensity: f64, seed: u64) -> Result<Self> {
        let q = || -> Result<u8> {
            if intensity.fract() != 0.0 || !(1.0..=100.0).contains(&intensity) {
                return Err(Error::InvalidArgument(format!("JPEG quality {intensity} must be an integer in 1..=100")));
            }
            Ok(intensity as u8)
        };
        let spec = match kind {
            NoiseKind::Identity => NoiseSpec::Identity,
            NoiseKind::Crop => NoiseSpec::Crop { p: intensity, seed },
            NoiseKind::Cropout => NoiseSpec::Cropout { p: intensity, seed },
            NoiseKind::Dropout => NoiseSpec::Dropout { p: intensity, seed },
            NoiseKind::Gaussian => NoiseSpec::Gaussian { sigma: intensity },
            NoiseKind::JpegSim => NoiseSpec::JpegSim { q: q()? },
            NoiseKind::JpegReal => NoiseSpec::JpegReal { q: q()? },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Crop { p, .. } | NoiseSpec::Cropout { p, .. } | NoiseSpec::Dropout { p, .. } => check_ratio(p),
            NoiseSpec::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidArgument(format!("blur sigma {sigma} must be positive")))
            }
            NoiseSpec::JpegSim { q } | NoiseSpec::JpegReal { q } => check_quality(q),
            _ => Ok(()),
        }
    }
}

fn check_ratio(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("remaining ratio {p} outside (0, 1]")))
    }
}

fn check_quality(q: u8) -> Result<()> {
    if (1..=100).contains(&q) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("JPEG quality {q} outside 1..=100")))
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(h: usize, w: usize) -> Self {
        Self { top: 0, left: 0, height: h, width: w }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome<T> {
    pub noised: Tensor<T>,
    /// Present for crop and cropout.
    pub region: Option<Region>,
    /// Per-pixel keep mask (true = watermarked pixel), present for dropout.
    pub mask: Option<Vec<bool>>,
}

/// Tape-level counterpart of [`AttackOutcome`].
#[derive(Clone, Debug)]
pub struct Attacked {
    pub noised: Var,
    pub region: Option<Region>,
    pub mask: Option<Vec<bool>>,
}

/// Side lengths of a crop rectangle keeping the fraction `p` of an `h × w`
/// image: `round(√p · h) × round(√p · w)`.
pub fn crop_size(p: f64, h: usize, w: usize) -> Result<(usize, usize)> {
    check_ratio(p)?;
    let side = |n: usize| (p.sqrt() * n as f64).round() as usize;
    let (ch, cw) = (side(h).min(h), side(w).min(w));
    if ch < MIN_REGION || cw < MIN_REGION {
        return Err(Error::InvalidArgument(format!(
            "remaining ratio {p} leaves a {ch}×{cw} rectangle of a {h}×{w} image, below {MIN_REGION}×{MIN_REGION}"
        )));
    }
    Ok((ch, cw))
}

/// Random rectangle keeping the fraction `p`, placed uniformly over all
/// valid offsets.
pub fn crop_region(p: f64, h: usize, w: usize, seed: u64) -> Result<Region> {
    let (ch, cw) = crop_size(p, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    Ok(Region { top, left, height: ch, width: cw })
}

/// Independent per-pixel keep decisions with probability `p`.
pub fn dropout_mask(p: f64, pixels: usize, seed: u64) -> Result<Vec<bool>> {
    check_ratio(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..pixels).map(|_| rng.gen::<f64>() < p).collect())
}

/// Normalized 1-D Gaussian taps over `[-R, R]` with `R = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    NoiseSpec::Gaussian { sigma }.validate()?;
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Rounding used inside the JPEG simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rounding {
    /// Cubic surrogate `⌊x⌉ + (x − ⌊x⌉)³`, differentiable almost everywhere.
    Approx,
    /// True rounding (zero gradient); for comparison against reference codecs.
    Exact,
}

const LUMA_BASE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_BASE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Row-major 8×8 quantization tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTables {
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
}

impl QuantTables {
    pub fn base() -> Self {
        Self { luma: LUMA_BASE, chroma: CHROMA_BASE }
    }
}

/// Standard baseline tables scaled for quality `q`.
pub fn quality_scale(q: u8) -> Result<QuantTables> {
    check_quality(q)?;
    let q = q as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let apply = |base: &[u16; 64]| base.map(|e| ((e as u32 * scale + 50) / 100).clamp(1, 255) as u16);
    Ok(QuantTables { luma: apply(&LUMA_BASE), chroma: apply(&CHROMA_BASE) })
}

/// Full-range BT.601 RGB → YCbCr on the 0–255 scale.
pub const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];
pub const YCC_OFFSET: [f64; 3] = [0.0, 128.0, 128.0];
/// Inverse transform, applied after removing [`YCC_OFFSET`].
pub const YCC_TO_RGB: [[f64; 3]; 3] = [[1.0, 0.0, 1.402], [1.0, -0.344136, -0.714136], [1.0, 1.772, 0.0]];

fn lit3<T: Real>(m: [[f64; 3]; 3]) -> [[T; 3]; 3] {
    m.map(|row| row.map(T::lit))
}

/// Quantization steps tiled over an `h × w × 3` YCbCr plane.
fn tiled_steps<T: Real>(tables: &QuantTables, h: usize, w: usize, invert: bool) -> Tensor<T> {
    Tensor::from_fn(h, w, 3, |y, x, c| {
        let table = if c == 0 { &tables.luma } else { &tables.chroma };
        let step = table[(y % 8) * 8 + x % 8] as f64;
        T::lit(if invert { 1.0 / step } else { step })
    })
}

/// Differentiable JPEG simulation on the tape.
pub fn jpeg_simulate_on<T: Real>(tape: &mut GradTape<T>, wm: Var, q: u8, rounding: Rounding) -> Result<Var> {
    let tables = quality_scale(q)?;
    let (h, w, c) = tape.value(wm).hwc()?;
    if c != 3 {
        return Err(Error::Shape(format!("JPEG simulation needs 3 channels, got {c}")));
    }
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let x = tape.scale(wm, T::lit(255.0));
    let ycc = tape.color_mix(x, lit3(RGB_TO_YCC), YCC_OFFSET.map(T::lit))?;
    let padded = tape.pad_edge(ycc, ph, pw)?;
    let shifted = tape.add_scalar(padded, T::lit(-128.0));
    let coeffs = tape.dct8_blocks(shifted, false)?;
    let scaled = tape.mul_const(coeffs, tiled_steps(&tables, ph, pw, true))?;
    let rounded = match rounding {
        Rounding::Approx => tape.approx_round(scaled),
        Rounding::Exact => tape.round(scaled),
    };
    let restored = tape.mul_const(rounded, tiled_steps(&tables, ph, pw, false))?;
    let spatial = tape.dct8_blocks(restored, true)?;
    let unshifted = tape.add_scalar(spatial, T::lit(128.0));
    let cropped = tape.window(unshifted, 0, 0, h, w)?;
    let offset = std::array::from_fn(|r| -(0..3).map(|j| YCC_TO_RGB[r][j] * YCC_OFFSET[j]).sum::<f64>());
    let rgb = tape.color_mix(cropped, lit3(YCC_TO_RGB), offset.map(T::lit))?;
    let unit = tape.scale(rgb, T::lit(1.0 / 255.0));
    Ok(tape.clamp(unit, T::zero(), T::one()))
}

pub fn jpeg_simulate<T: Real>(wm: &Tensor<T>, q: u8, rounding: Rounding) -> Result<Tensor<T>> {
    let mut tape = GradTape::new();
    let v = tape.constant(wm.clone());
    let out = jpeg_simulate_on(&mut tape, v, q, rounding)?;
    Ok(tape.value(out).clone())
}

/// Baseline JPEG byte stream at quality `q`.
pub fn jpeg_encode<T: Real>(img: &Tensor<T>, q: u8) -> Result<Vec<u8>> {
    check_quality(q)?;
    let rgb = to_rgb8(img)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, q)
        .encode_image(&rgb)
        .map_err(|e| Error::Codec(format!("JPEG encoding failed: {e}")))?;
    Ok(buf)
}

pub fn jpeg_decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(format!("JPEG decoding failed: {e}")))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Real encode/decode round trip; not differentiable.
pub fn jpeg_real<T: Real>(wm: &Tensor<T>, q: u8) -> Result<Tensor<T>> {
    jpeg_decode(&jpeg_encode(wm, q)?)
}

fn blur_on<T: Real>(tape: &mut GradTape<T>, wm: Var, sigma: f64) -> Result<Var> {
    let taps: Vec<T> = gaussian_kernel(sigma)?.into_iter().map(T::lit).collect();
    let rows = tape.blur1d(wm, taps.clone(), Axis::Rows)?;
    tape.blur1d(rows, taps, Axis::Cols)
}

fn need_cover(cover: Option<Var>, kind: NoiseKind) -> Result<Var> {
    cover.ok_or_else(|| Error::InvalidArgument(format!("{kind} needs the cover image")))
}

/// Applies a training attack on the tape. `cover` is required by cropout
/// and dropout. Real JPEG is rejected because it has no gradient.
pub fn attack_on<T: Real>(tape: &mut GradTape<T>, spec: &NoiseSpec, wm: Var, cover: Option<Var>) -> Result<Attacked> {
    spec.validate()?;
    let (h, w, _) = tape.value(wm).hwc()?;
    if let Some(c) = cover {
        tape.value(c).check_same_shape(tape.value(wm))?;
    }
    let plain = |noised| Attacked { noised, region: None, mask: None };
    Ok(match *spec {
        NoiseSpec::Identity => plain(wm),
        NoiseSpec::Crop { p, seed } => {
            let region = crop_region(p, h, w, seed)?;
            let noised = tape.window(wm, region.top, region.left, region.height, region.width)?;
            Attacked { noised, region: Some(region), mask: None }
        }
        NoiseSpec::Cropout { p, seed } => {
            let cover = need_cover(cover, spec.kind())?;
            let region = crop_region(p, h, w, seed)?;
            let mask = (0..h * w).map(|i| region.contains(i / w, i % w)).collect();
            let noised = tape.select(mask, wm, cover)?;
            Attacked { noised, region: Some(region), mask: None }
        }
        NoiseSpec::Dropout { p, seed } => {
            let cover = need_cover(cover, spec.kind())?;
            let mask = dropout_mask(p, h * w, seed)?;
            let noised = tape.select(mask.clone(), wm, cover)?;
            Attacked { noised, region: None, mask: Some(mask) }
        }
        NoiseSpec::Gaussian { sigma } => plain(blur_on(tape, wm, sigma)?),
        NoiseSpec::JpegSim { q } => plain(jpeg_simulate_on(tape, wm, q, Rounding::Approx)?),
        NoiseSpec::JpegReal { .. } => {
            return Err(Error::InvalidArgument("real JPEG is not differentiable; use jpeg_sim for training".into()))
        }
    })
}

/// Applies any attack to plain tensors.
pub fn attack<T: Real>(spec: &NoiseSpec, wm: &Tensor<T>, cover: Option<&Tensor<T>>) -> Result<AttackOutcome<T>> {
    if let NoiseSpec::JpegReal { q } = *spec {
        return Ok(AttackOutcome { noised: jpeg_real(wm, q)?, region: None, mask: None });
    }
    let mut tape = GradTape::new();
    let wv = tape.constant(wm.clone());
    let cv = cover.map(|c| tape.constant(c.clone()));
    let out = attack_on(&mut tape, spec, wv, cv)?;
    Ok(AttackOutcome { noised: tape.value(out.noised).clone(), region: out.region, mask: out.mask })
}

pub fn crop<T: Real>(wm: &Tensor<T>, p: f64, seed: u64) -> Result<AttackOutcome<T>> {
    attack(&NoiseSpec::Crop { p, seed }, wm, None)
}

pub fn cropout<T: Real>(wm: &Tensor<T>, cover: &Tensor<T>, p: f64, seed: u64) -> Result<AttackOutcome<T>> {
    attack(&NoiseSpec::Cropout { p, seed }, wm, Some(cover))
}

pub fn dropout<T: Real>(wm: &Tensor<T>, cover: &Tensor<T>, p: f64, seed: u64) -> Result<AttackOutcome<T>> {
    attack(&NoiseSpec::Dropout { p, seed }, wm, Some(cover))
}

pub fn gaussian_blur<T: Real>(wm: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    Ok(attack(&NoiseSpec::Gaussian { sigma }, wm, None)?.noised)
}

/// Intensity settings used when a kind is drawn from a [`NoiseDistribution`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Intensities {
    pub crop_p: f64,
    pub cropout_p: f64,
    pub dropout_p: f64,
    pub sigma: f64,
    /// Qualities drawn uniformly for simulated JPEG.
    pub jpeg_qualities: Vec<u8>,
}

impl Default for Intensities {
    fn default() -> Self {
        Self {
            crop_p: 0.035,
            cropout_p: 0.3,
            dropout_p: 0.3,
            sigma: 2.0,
            jpeg_qualities: vec![50, 60, 70, 80, 90],
        }
    }
}

/// Categorical distribution over training attacks plus their intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDistribution {
    pub weights: BTreeMap<NoiseKind, f64>,
    #[serde(default)]
    pub intensities: Intensities,
}

impl NoiseDistribution {
    pub fn identity_only() -> Self {
        Self::from_weights(&[(NoiseKind::Identity, 1.0)])
    }

    pub fn from_weights(weights: &[(NoiseKind, f64)]) -> Self {
        Self { weights: weights.iter().copied().collect(), intensities: Intensities::default() }
    }

    /// True when only the identity attack can be drawn.
    pub fn is_identity_only(&self) -> bool {
        self.weights.iter().all(|(&k, &p)| k == NoiseKind::Identity || p == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let mut total = 0.0;
        for (&kind, &p) in &self.weights {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("probability {p} for {kind} is not a nonnegative number")));
            }
            if kind == NoiseKind::JpegReal && p > 0.0 {
                return Err(Error::Config("jpeg_real cannot be used for training".into()));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("noise probabilities sum to {total}, not 1")));
        }
        let i = &self.intensities;
        for p in [i.crop_p, i.cropout_p, i.dropout_p] {
            check_ratio(p).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.weights.get(&NoiseKind::JpegSim).copied().unwrap_or(0.0) > 0.0 && i.jpeg_qualities.is_empty() {
            return Err(Error::Config("jpeg_sim is enabled but no qualities are listed".into()));
        }
        for &q in &i.jpeg_qualities {
            check_quality(q).map_err(|e| Error::Config(e.to_string()))?;
        }
        NoiseSpec::Gaussian { sigma: i.sigma }.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

impl Default for NoiseDistribution {
    fn default() -> Self {
        Self::from_weights(&[
            (NoiseKind::Identity, 0.05),
            (NoiseKind::Crop, 0.05),
            (NoiseKind::Cropout, 0.10),
            (NoiseKind::Dropout, 0.15),
            (NoiseKind::JpegSim, 0.60),
            (NoiseKind::Gaussian, 0.05),
        ])
    }
}

/// Draws one attack: a kind from the categorical weights, then its
/// intensity and attack seed.
pub fn sample_noise(dist: &NoiseDistribution, rng: &mut impl Rng) -> Result<NoiseSpec> {
    dist.validate()?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = None;
    for (&kind, &p) in &dist.weights {
        if p > 0.0 {
            chosen = Some(kind);
            acc += p;
            if u < acc {
                break;
            }
        }
    }
    let kind = chosen.expect("validated weights sum to one");
    let seed: u64 = rng.gen();
    let i = &dist.intensities;
    Ok(match kind {
        NoiseKind::Identity => NoiseSpec::Identity,
        NoiseKind::Crop => NoiseSpec::Crop { p: i.crop_p, seed },
        NoiseKind::Cropout => NoiseSpec::Cropout { p: i.cropout_p, seed },
        NoiseKind::Dropout => NoiseSpec::Dropout { p: i.dropout_p, seed },
        NoiseKind::Gaussian => NoiseSpec::Gaussian { sigma: i.sigma },
        NoiseKind::JpegSim => NoiseSpec::JpegSim { q: i.jpeg_qualities[rng.gen_range(0..i.jpeg_qualities.len())] },
        NoiseKind::JpegReal => unreachable!("rejected by validate"),
    })
}
