//! Training losses.

use serde::{Deserialize, Serialize};

use crate::distort::Region;
use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{Real, Tensor};

/// Weights of the four loss terms. `w_w` is normally overwritten by the
/// stage schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_w: f64,
    pub w_m: f64,
    pub w_z: f64,
    pub w_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_w: 32.0, w_m: 1.0, w_z: 1.0, w_c: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_w", self.w_w), ("w_m", self.w_m), ("w_z", self.w_z), ("w_c", self.w_c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_w: f64,
    pub l_m: f64,
    pub l_z: f64,
    pub l_c: f64,
    pub l_total: f64,
}

/// `mean|a − b| + mean (a − b)²`
pub fn norm_l1l2<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let (mut l1, mut l2) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x - y).as_f64();
        l1 += d.abs();
        l2 += d * d;
    }
    let n = a.len() as f64;
    Ok(l1 / n + l2 / n)
}

/// Message loss, optionally restricted to the surviving `region` and scaled
/// by the ratio of the full area to the region area. `m_out` may be either
/// full size or already cropped to the region.
pub fn message_loss_on<T: Real>(tape: &mut GradTape<T>, m_out: Var, m_in: Var, region: Option<Region>) -> Result<Var> {
    let Some(r) = region else {
        return tape.l1l2(m_out, m_in);
    };
    if r.area() == 0 {
        return Err(Error::InvalidArgument("message loss region is empty".into()));
    }
    let (h, w, _) = tape.value(m_in).hwc()?;
    let (oh, ow, _) = tape.value(m_out).hwc()?;
    let target = tape.window(m_in, r.top, r.left, r.height, r.width)?;
    let pred = if (oh, ow) == (r.height, r.width) {
        m_out
    } else {
        tape.window(m_out, r.top, r.left, r.height, r.width)?
    };
    let loss = tape.l1l2(pred, target)?;
    Ok(tape.scale(loss, T::lit((h * w) as f64 / r.area() as f64)))
}

pub fn message_loss<T: Real>(m_out: &Tensor<T>, m_in: &Tensor<T>, region: Option<Region>) -> Result<f64> {
    let mut tape = GradTape::new();
    let a = tape.constant(m_out.clone());
    let b = tape.constant(m_in.clone());
    let l = message_loss_on(&mut tape, a, b, region)?;
    Ok(tape.value(l).data()[0].as_f64())
}

/// Tape handles of everything the total loss compares.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cover: Var,
    pub watermarked: Var,
    pub m_in: Var,
    pub m_out: Var,
    pub z_hat: Var,
    pub z: Var,
    pub cover_rec: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_w: Var,
    pub l_m: Var,
    pub l_z: Var,
    pub l_c: Var,
    pub total: Var,
}

impl LossVars {
    pub fn read<T: Real>(&self, tape: &GradTape<T>) -> LossComponents {
        let get = |v: Var| tape.value(v).data()[0].as_f64();
        LossComponents {
            l_w: get(self.l_w),
            l_m: get(self.l_m),
            l_z: get(self.l_z),
            l_c: get(self.l_c),
            l_total: get(self.total),
        }
    }
}

/// Weighted sum of the imperceptibility, message, lost-information and
/// cover-reconstruction terms. When the recovered cover is cropped to
/// `region`, it is compared with the same window of the cover.
pub fn total_loss_on<T: Real>(tape: &mut GradTape<T>, t: &LossTerms, weights: &LossWeights, region: Option<Region>) -> Result<LossVars> {
    let l_w = tape.l1l2(t.watermarked, t.cover)?;
    let l_m = message_loss_on(tape, t.m_out, t.m_in, region)?;
    let l_z = tape.l1l2(t.z_hat, t.z)?;
    let cover_shape = tape.value(t.cover).shape().to_vec();
    let l_c = match region {
        Some(r) if tape.value(t.cover_rec).shape() != cover_shape.as_slice() => {
            let target = tape.window(t.cover, r.top, r.left, r.height, r.width)?;
            tape.l1l2(t.cover_rec, target)?
        }
        _ => tape.l1l2(t.cover_rec, t.cover)?,
    };
    let parts = [(l_w, weights.w_w), (l_m, weights.w_m), (l_z, weights.w_z), (l_c, weights.w_c)];
    let mut total = tape.scale(parts[0].0, T::lit(parts[0].1));
    for &(v, wt) in &parts[1..] {
        let s = tape.scale(v, T::lit(wt));
        total = tape.add(total, s)?;
    }
    Ok(LossVars { l_w, l_m, l_z, l_c, total })
}

/// Plain-tensor inputs for [`total_loss`].
#[derive(Clone, Debug)]
pub struct LossInputs<T> {
    pub cover: Tensor<T>,
    pub watermarked: Tensor<T>,
    pub m_in: Tensor<T>,
    pub m_out: Tensor<T>,
    pub z_hat: Tensor<T>,
    pub z: Tensor<T>,
    pub cover_rec: Tensor<T>,
}

pub fn total_loss<T: Real>(inputs: &LossInputs<T>, weights: &LossWeights, region: Option<Region>) -> Result<LossComponents> {
    let mut tape = GradTape::new();
    let mut c = |t: &Tensor<T>| tape.constant(t.clone());
    let terms = LossTerms {
        cover: c(&inputs.cover),
        watermarked: c(&inputs.watermarked),
        m_in: c(&inputs.m_in),
        m_out: c(&inputs.m_out),
        z_hat: c(&inputs.z_hat),
        z: c(&inputs.z),
        cover_rec: c(&inputs.cover_rec),
    };
    let vars = total_loss_on(&mut tape, &terms, weights, region)?;
    Ok(vars.read(&tape))
}
