//! Imperceptibility and robustness metrics, and the intensity sweep.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distort::{attack, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::image_io::{quantize, to_byte};
use crate::inn::CouplingStack;
use crate::msgcodec::{decode_message, message_tensor, BitMessage};
use crate::tensor::{Real, Tensor};
use crate::train::item_rng;

/// PSNR in dB, or a marker for two identical images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Identical => None,
            Psnr::Db(v) => Some(v),
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Identical => f.write_str("identical"),
            Psnr::Db(v) => write!(f, "{v:.2}"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Identical => s.serialize_str("identical"),
            Psnr::Db(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Db(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Db(v) => Ok(Psnr::Db(v)),
            Raw::Tag(t) if t == "identical" => Ok(Psnr::Identical),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unexpected PSNR value {t:?}"))),
        }
    }
}

/// `10·log10(255² / MSE)` over the 8-bit quantized values of both images.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Psnr> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::Shape("PSNR of empty images".into()));
    }
    let sse: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = to_byte(x) as i64 - to_byte(y) as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(Psnr::Identical);
    }
    let mse = sse as f64 / a.len() as f64;
    Ok(Psnr::Db(10.0 * (255.0f64 * 255.0 / mse).log10()))
}

/// Fraction of positions where the two messages agree.
pub fn bit_accuracy(m: &BitMessage, m_hat: &BitMessage) -> Result<f64> {
    if m.len() != m_hat.len() {
        return Err(Error::Message(format!("cannot compare {} bits with {} bits", m.len(), m_hat.len())));
    }
    let same = m.bits().iter().zip(m_hat.bits()).filter(|(a, b)| a == b).count();
    Ok(same as f64 / m.len() as f64)
}

/// Mean of the finite values; `Identical` only when every image was identical.
pub fn mean_psnr(values: &[Psnr]) -> Option<Psnr> {
    if values.is_empty() {
        return None;
    }
    let finite: Vec<f64> = values.iter().filter_map(|p| p.db()).collect();
    if finite.is_empty() {
        return Some(Psnr::Identical);
    }
    Some(Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64))
}

/// One row of a sweep grid. Kinds without an intensity take an empty list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    pub kind: NoiseKind,
    #[serde(default)]
    pub intensities: Vec<f64>,
}

pub type Grid = Vec<GridRow>;

/// Sweep over the five attack families at the intensities of the robustness plots.
pub fn default_grid() -> Grid {
    let row = |kind, v: &[f64]| GridRow { kind, intensities: v.to_vec() };
    vec![
        row(NoiseKind::Identity, &[]),
        row(NoiseKind::Crop, &[0.035, 0.1, 0.3, 0.5, 0.7, 0.9]),
        row(NoiseKind::Cropout, &[0.1, 0.3, 0.5, 0.7, 0.9]),
        row(NoiseKind::Dropout, &[0.1, 0.3, 0.5, 0.7, 0.9]),
        row(NoiseKind::Gaussian, &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0]),
        row(NoiseKind::JpegReal, &[50.0, 60.0, 70.0, 80.0, 90.0]),
    ]
}

pub fn parse_grid(text: &str) -> Result<Grid> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("bad grid: {e}")))
}

/// Result for one (kind, intensity) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub kind: NoiseKind,
    pub intensity: Option<f64>,
    /// Mean bit accuracy, absent when the cell failed.
    pub accuracy: Option<f64>,
    pub per_image: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub images: usize,
    pub bits: usize,
    pub groups: usize,
    pub psnr: Vec<Psnr>,
    pub mean_psnr: Option<Psnr>,
    pub cells: Vec<CellReport>,
}

impl EvalReport {
    /// A summary record followed by one record per grid cell.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'static str,
            model: &'a str,
            seed: u64,
            images: usize,
            bits: usize,
            groups: usize,
            mean_psnr: Option<Psnr>,
            psnr: &'a [Psnr],
        }
        #[derive(Serialize)]
        struct Cell<'a> {
            record: &'static str,
            #[serde(flatten)]
            cell: &'a CellReport,
        }
        let mut out = serde_json::to_string(&Summary {
            record: "summary",
            model: &self.model,
            seed: self.seed,
            images: self.images,
            bits: self.bits,
            groups: self.groups,
            mean_psnr: self.mean_psnr,
            psnr: &self.psnr,
        })
        .expect("summary serializes");
        out.push('\n');
        for cell in &self.cells {
            out.push_str(&serde_json::to_string(&Cell { record: "cell", cell }).expect("cell serializes"));
            out.push('\n');
        }
        out
    }

    /// Plain-text table: one line per cell, intensity against accuracy.
    pub fn table(&self) -> String {
        let mut out = format!(
            "model {}  seed {}  images {}  message {} bits / {} groups\nclean PSNR: {}\n\n",
            self.model,
            self.seed,
            self.images,
            self.bits,
            self.groups,
            self.mean_psnr.map_or("n/a".to_string(), |p| match p {
                Psnr::Db(v) => format!("{v:.2} dB"),
                Psnr::Identical => "identical".into(),
            })
        );
        out.push_str(&format!("{:<10} {:>10} {:>9}\n", "attack", "intensity", "accuracy"));
        for c in &self.cells {
            let intensity = c.intensity.map_or("-".to_string(), |v| format!("{v}"));
            let acc = match (&c.accuracy, &c.error) {
                (Some(a), _) => format!("{a:.4}"),
                (None, Some(e)) => format!("failed: {e}"),
                (None, None) => "n/a".into(),
            };
            out.push_str(&format!("{:<10} {:>10} {:>9}\n", c.kind.name(), intensity, acc));
        }
        out
    }
}

/// FNV-1a over the parameter names and values, as a short model identity.
pub fn model_fingerprint(stack: &CouplingStack<f32>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (_, name, t) in stack.params().iter() {
        feed(name.as_bytes());
        for v in t.data() {
            feed(&v.to_le_bytes());
        }
    }
    format!("{h:016x}")
}

/// Settings shared by every image of a sweep.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub bits: usize,
    pub groups: usize,
    pub seed: u64,
}

/// Embeds a random message into every image, attacks it with every grid cell
/// and measures recovery. Real JPEG replaces the simulator for JPEG cells.
pub fn sweep(stack: &CouplingStack<f32>, images: &[Tensor<f32>], grid: &[GridRow], cfg: &SweepConfig) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    crate::msgcodec::group_bits(cfg.bits, cfg.groups)?;

    let cells: Vec<(NoiseKind, Option<f64>)> = grid
        .iter()
        .flat_map(|row| {
            let kind = if row.kind == NoiseKind::JpegSim { NoiseKind::JpegReal } else { row.kind };
            if row.intensities.is_empty() {
                vec![(kind, None)]
            } else {
                row.intensities.iter().map(|&v| (kind, Some(v))).collect()
            }
        })
        .collect();
    let mut reports: Vec<CellReport> = cells
        .iter()
        .map(|&(kind, intensity)| CellReport { kind, intensity, accuracy: None, per_image: Vec::new(), error: None })
        .collect();

    let mut psnrs = Vec::with_capacity(images.len());
    for (i, cover) in images.iter().enumerate() {
        let cover = quantize(cover);
        let (h, w, _) = cover.hwc()?;
        let mut rng = item_rng(cfg.seed, 0, i as u64);
        let msg = BitMessage::random(&mut rng, cfg.bits, cfg.groups)?;
        let (_, wm) = stack.embed(&message_tensor(&msg, h, w), &cover)?;
        let wm = quantize(&wm);
        psnrs.push(psnr(&cover, &wm)?);

        for (j, (&(kind, intensity), report)) in cells.iter().zip(reports.iter_mut()).enumerate() {
            if report.error.is_some() {
                continue;
            }
            let attack_seed = rand::Rng::gen(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ ((i as u64) << 32) ^ j as u64));
            let result = (|| -> Result<f64> {
                let spec = match (kind, intensity) {
                    (NoiseKind::Identity, _) => NoiseSpec::Identity,
                    (_, Some(v)) => NoiseSpec::with_intensity(kind, v, attack_seed)?,
                    (_, None) => return Err(Error::InvalidArgument(format!("{kind} needs an intensity"))),
                };
                let noised = quantize(&attack(&spec, &wm, Some(&cover))?.noised);
                let (m_out, _) = stack.extract_blind(&noised)?;
                bit_accuracy(&msg, &decode_message(&m_out, cfg.bits, cfg.groups)?)
            })();
            match result {
                Ok(a) => report.per_image.push(a),
                Err(e) => {
                    log::warn!("sweep cell {kind} {intensity:?} failed: {e}");
                    report.per_image.clear();
                    report.error = Some(e.to_string());
                }
            }
        }
    }
    for r in &mut reports {
        if r.error.is_none() {
            r.accuracy = Some(r.per_image.iter().sum::<f64>() / r.per_image.len() as f64);
        }
    }
    Ok(EvalReport {
        model: model_fingerprint(stack),
        seed: cfg.seed,
        images: images.len(),
        bits: cfg.bits,
        groups: cfg.groups,
        mean_psnr: mean_psnr(&psnrs),
        psnr: psnrs,
        cells: reports,
    })
}
