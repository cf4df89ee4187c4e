//! Bit message normalization.
//!
//! An `l`-bit message is split into `c` groups of `r = l / c` bits. Each
//! group, read most-significant bit first as an integer `k`, is stored in one
//! message channel as the 8-bit level `k · 2^(8−r) + 2^(7−r)`; the offset
//! centres the levels so that their mean is 128. Decoding snaps every element
//! of a channel to the nearest legal level and takes the spatial mode.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Bits per group must lie in `1..=MAX_GROUP_BITS`.
pub const MAX_GROUP_BITS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMessage {
    bits: Vec<u8>,
    groups: usize,
}

/// Validates `(l, c)` and returns `r = l / c`.
pub fn group_bits(len: usize, groups: usize) -> Result<usize> {
    if groups == 0 || len == 0 {
        return Err(Error::Message(format!(
            "message length ({len}) and group count ({groups}) must be positive"
        )));
    }
    if !len.is_multiple_of(groups) {
        return Err(Error::Message(format!(
            "group count {groups} does not divide message length {len}"
        )));
    }
    let r = len / groups;
    if r > MAX_GROUP_BITS {
        return Err(Error::Message(format!(
            "{r} bits per group exceeds the maximum of {MAX_GROUP_BITS}"
        )));
    }
    Ok(r)
}

impl BitMessage {
    pub fn new(bits: Vec<u8>, groups: usize) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Message(format!("bit value {b} is not 0 or 1")));
        }
        group_bits(bits.len(), groups)?;
        Ok(Self { bits, groups })
    }

    pub fn random(rng: &mut impl rand::Rng, len: usize, groups: usize) -> Result<Self> {
        group_bits(len, groups)?;
        let bits = (0..len).map(|_| rng.gen_range(0..=1u8)).collect();
        Ok(Self { bits, groups })
    }

    /// Parses a `0`/`1` string.
    pub fn from_bitstring(s: &str, groups: usize) -> Result<Self> {
        let bits = s
            .chars()
            .map(|ch| match ch {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Message(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits, groups)
    }

    /// Parses hex digits (most significant first) holding exactly `len` bits.
    /// The final digit may carry up to three zero padding bits on the right;
    /// any other length disagreement is rejected.
    pub fn from_hex(s: &str, len: usize, groups: usize) -> Result<Self> {
        let digits = s.trim_start_matches("0x").trim_start_matches("0X");
        if digits.len() != len.div_ceil(4) {
            return Err(Error::Message(format!(
                "{} hex digits cannot hold exactly {len} bits (need {})",
                digits.len(),
                len.div_ceil(4)
            )));
        }
        let mut bits = Vec::with_capacity(digits.len() * 4);
        for ch in digits.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::Message(format!("invalid hex digit {ch:?}")))?;
            bits.extend((0..4).rev().map(|i| ((v >> i) & 1) as u8));
        }
        if bits[len..].iter().any(|&b| b != 0) {
            return Err(Error::Message(format!(
                "hex value has non-zero bits beyond the declared length {len}"
            )));
        }
        bits.truncate(len);
        Self::new(bits, groups)
    }

    /// `0x`-prefixed input is hex, anything else a bitstring; either way it
    /// must hold exactly `len` bits.
    pub fn parse(s: &str, len: usize, groups: usize) -> Result<Self> {
        let s = s.trim();
        if s.starts_with("0x") || s.starts_with("0X") {
            return Self::from_hex(s, len, groups);
        }
        let msg = Self::from_bitstring(s, groups)?;
        if msg.len() != len {
            return Err(Error::Message(format!("message has {} bits, expected {len}", msg.len())));
        }
        Ok(msg)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_bits(&self) -> usize {
        self.bits.len() / self.groups
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }
}

/// One channel level per group, held as the group's integer value `k`.
///
/// The level itself is `k · 2^(8−r) + 2^(7−r)` in 8-bit units; for `r = 8`
/// the offset is one half, so levels are half-integers there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupCode {
    groups: Vec<u16>,
    group_bits: usize,
}

impl GroupCode {
    /// Builds a code from 8-bit-unit levels, rejecting anything that is not
    /// one of [`candidates`]`(group_bits)`.
    pub fn from_levels(levels: &[f64], group_bits: usize) -> Result<Self> {
        check_r(group_bits)?;
        let groups = levels
            .iter()
            .map(|&v| {
                let k = (v - offset(group_bits)) / step(group_bits);
                if k.fract() == 0.0 && k >= 0.0 && k < (1u32 << group_bits) as f64 {
                    Ok(k as u16)
                } else {
                    Err(Error::Message(format!(
                        "{v} is not a legal level for {group_bits} bits per group"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { groups, group_bits })
    }

    /// Channel levels in 8-bit units.
    pub fn levels(&self) -> Vec<f64> {
        self.groups.iter().map(|&k| level(k, self.group_bits)).collect()
    }

    /// Integer value of each group.
    pub fn group_values(&self) -> &[u16] {
        &self.groups
    }

    pub fn group_bits(&self) -> usize {
        self.group_bits
    }
}

fn check_r(r: usize) -> Result<()> {
    if (1..=MAX_GROUP_BITS).contains(&r) {
        Ok(())
    } else {
        Err(Error::Message(format!(
            "bits per group must be in 1..={MAX_GROUP_BITS}, got {r}"
        )))
    }
}

#[inline]
fn step(r: usize) -> f64 {
    (1u32 << (8 - r)) as f64
}

#[inline]
fn offset(r: usize) -> f64 {
    2f64.powi(7 - r as i32)
}

#[inline]
fn level(k: u16, r: usize) -> f64 {
    k as f64 * step(r) + offset(r)
}

/// Legal channel levels (8-bit units) for `r` bits per group, strictly
/// increasing with spacing `2^(8−r)` and mean 128.
pub fn candidates(r: usize) -> Result<Vec<f64>> {
    check_r(r)?;
    Ok((0..1u16 << r).map(|k| level(k, r)).collect())
}

pub fn encode_groups(msg: &BitMessage) -> GroupCode {
    let r = msg.group_bits();
    let groups = msg
        .bits
        .chunks_exact(r)
        .map(|g| g.iter().fold(0u16, |acc, &b| (acc << 1) | b as u16))
        .collect();
    GroupCode {
        groups,
        group_bits: r,
    }
}

/// Exact inverse of [`encode_groups`]: offset removal, right shift, binary
/// expansion.
pub fn decode_bits(code: &GroupCode, groups: usize) -> Result<BitMessage> {
    let r = code.group_bits;
    if code.groups.len() != groups {
        return Err(Error::Message(format!(
            "{} channel values for {groups} groups",
            code.groups.len()
        )));
    }
    let mut bits = Vec::with_capacity(groups * r);
    for &k in &code.groups {
        bits.extend((0..r).rev().map(|i| ((k >> i) & 1) as u8));
    }
    BitMessage::new(bits, groups)
}

/// `h × w × c` tensor whose channel `g` is the constant `code[g] / 255`.
pub fn broadcast<T: Real>(code: &GroupCode, h: usize, w: usize) -> Tensor<T> {
    let levels: Vec<T> = code.levels().into_iter().map(|v| T::lit(v / 255.0)).collect();
    Tensor::from_fn(h, w, levels.len(), |_, _, c| levels[c])
}

/// Index of the nearest candidate to `x` (in 8-bit units); ties go to the
/// smaller candidate.
fn snap(x: f64, r: usize) -> usize {
    let max = (1usize << r) - 1;
    // candidates are offset + k·step; a value exactly halfway between k and
    // k + 1 belongs to k
    let t = (x - offset(r)) / step(r);
    if t <= 0.0 {
        return 0;
    }
    let k = t.floor() as usize;
    if k >= max {
        return max;
    }
    let frac = t - k as f64;
    if frac <= 0.5 {
        k
    } else {
        k + 1
    }
}

/// Per-channel decoded level plus the share of pixels that voted for it.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedGroups {
    pub code: GroupCode,
    pub confidence: Vec<f64>,
}

/// Snap-and-vote decoding of a message tensor.
pub fn decode_groups_with_confidence<T: Real>(m: &Tensor<T>, r: usize) -> Result<DecodedGroups> {
    check_r(r)?;
    let (h, w, c) = m.hwc()?;
    if h * w == 0 || c == 0 {
        return Err(Error::Message("cannot decode an empty message tensor".into()));
    }
    let mut groups = Vec::with_capacity(c);
    let mut confidence = Vec::with_capacity(c);
    let mut votes = vec![0usize; 1 << r];
    for ch in 0..c {
        votes.iter_mut().for_each(|v| *v = 0);
        for px in m.data().chunks_exact(c) {
            votes[snap(px[ch].as_f64() * 255.0, r)] += 1;
        }
        // first maximum → smaller candidate wins ties
        let (best, count) = votes
            .iter()
            .enumerate()
            .fold((0, 0), |(bi, bc), (i, &n)| if n > bc { (i, n) } else { (bi, bc) });
        groups.push(best as u16);
        confidence.push(count as f64 / (h * w) as f64);
    }
    Ok(DecodedGroups {
        code: GroupCode {
            groups,
            group_bits: r,
        },
        confidence,
    })
}

pub fn decode_groups<T: Real>(m: &Tensor<T>, r: usize) -> Result<GroupCode> {
    Ok(decode_groups_with_confidence(m, r)?.code)
}

pub fn decode_message<T: Real>(m: &Tensor<T>, len: usize, groups: usize) -> Result<BitMessage> {
    let r = group_bits(len, groups)?;
    if m.channels() != groups {
        return Err(Error::Shape(format!(
            "message tensor has {} channels, expected {groups}",
            m.channels()
        )));
    }
    decode_bits(&decode_groups(m, r)?, groups)
}

/// Convenience: message → normalized tensor.
pub fn message_tensor<T: Real>(msg: &BitMessage, h: usize, w: usize) -> Tensor<T> {
    broadcast(&encode_groups(msg), h, w)
}
