//! The invertible coupling stack.
//!
//! Each block updates the image branch from the message branch and then the
//! message branch from the updated image branch:
//!
//! ```text
//! b2' = b2 + φ(b1)
//! b1' = b1 ⊙ exp(s) + η(b2'),   s = λ · tanh(ρ(b2') / λ)
//! ```
//!
//! and is undone exactly by
//!
//! ```text
//! b1 = (b1' − η(b2')) ⊙ exp(−s)
//! b2 = b2' − φ(b1)
//! ```
//!
//! Embedding runs the blocks forward on `(message, cover)`; extraction runs
//! them backward on `(Z, noised image)`. Both directions read the same
//! [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{GradTape, Var};
use crate::tensor::{Real, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
/// Smallest spatial extent extraction accepts.
pub const MIN_EXTENT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub blocks: usize,
    pub message_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Amplitude λ of the soft clamp on the scale exponent.
    pub clamp: f64,
    pub leaky_slope: f64,
}

impl Architecture {
    pub fn new(blocks: usize, message_channels: usize) -> Self {
        Self {
            blocks,
            message_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=32).contains(&self.blocks) {
            return Err(Error::InvalidArgument(format!(
                "block count {} outside 1..=32",
                self.blocks
            )));
        }
        if self.message_channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(
                "message channels and hidden width must be positive".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size {} must be odd",
                self.kernel
            )));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::InvalidArgument("clamp must be positive".into()));
        }
        Ok(())
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            blocks: 16,
            message_channels: 10,
            hidden: 32,
            kernel: 3,
            clamp: 2.0,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Every parameter zero: each block, and the stack, is the identity.
    Zeros,
    /// Kaiming-uniform hidden layers with zero final layers, so the stack
    /// starts as the identity but can learn immediately.
    IdentityStart { seed: u64 },
    /// All layers random; final layers drawn from `U(−final_scale, final_scale)`.
    Random { seed: u64, final_scale: f64 },
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

/// Three-layer convolutional sub-network: two leaky-ReLU hidden layers and a
/// linear output layer.
#[derive(Clone, Debug)]
pub struct SubNet {
    layers: Vec<ConvLayer>,
}

#[derive(Clone, Debug)]
pub struct CouplingBlock {
    phi: SubNet,
    rho: SubNet,
    eta: SubNet,
}

#[derive(Clone, Debug)]
pub struct CouplingStack<T> {
    arch: Architecture,
    blocks: Vec<CouplingBlock>,
    params: ParamStore<T>,
}

/// Parameter names in canonical order together with their shapes.
pub fn parameter_layout(arch: &Architecture) -> Vec<(String, Vec<usize>)> {
    let k = arch.kernel;
    let mut out = Vec::new();
    for b in 0..arch.blocks {
        for (net, cin, cout) in [
            ("phi", arch.message_channels, IMAGE_CHANNELS),
            ("rho", IMAGE_CHANNELS, arch.message_channels),
            ("eta", IMAGE_CHANNELS, arch.message_channels),
        ] {
            let widths = [cin, arch.hidden, arch.hidden, cout];
            for l in 0..3 {
                let prefix = format!("block{b:02}.{net}.conv{l}");
                out.push((format!("{prefix}.weight"), vec![k, k, widths[l], widths[l + 1]]));
                out.push((format!("{prefix}.bias"), vec![widths[l + 1]]));
            }
        }
    }
    out
}

impl<T: Real> CouplingStack<T> {
    pub fn new(arch: Architecture, init: Init) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(match init {
            Init::Zeros => 0,
            Init::IdentityStart { seed } | Init::Random { seed, .. } => seed,
        });
        let mut params = ParamStore::new();
        for (name, shape) in parameter_layout(&arch) {
            let is_final = name.contains(".conv2.");
            let is_bias = name.ends_with(".bias");
            let n: usize = shape.iter().product();
            let bound = match init {
                Init::Zeros => 0.0,
                Init::IdentityStart { .. } if is_final || is_bias => 0.0,
                Init::Random { final_scale, .. } if is_final => final_scale,
                Init::Random { .. } | Init::IdentityStart { .. } if is_bias => 0.0,
                _ => {
                    let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
                    let gain = 2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope);
                    (3.0 * gain / fan_in).sqrt()
                }
            };
            let data = (0..n)
                .map(|_| {
                    if bound > 0.0 {
                        T::lit(rng.gen_range(-bound..bound))
                    } else {
                        T::zero()
                    }
                })
                .collect();
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        Self::from_params(arch, params)
    }

    /// Rebuilds a stack around an existing parameter store, checking that
    /// names and shapes match the architecture.
    pub fn from_params(arch: Architecture, params: ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let layout = parameter_layout(&arch);
        if layout.len() != params.len() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameter tensors, store has {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (_, have_name, have)) in layout.iter().zip(params.iter()) {
            if name != have_name || shape.as_slice() != have.shape() {
                return Err(Error::Shape(format!(
                    "parameter {have_name} {:?} does not match expected {name} {shape:?}",
                    have.shape()
                )));
            }
        }
        let mut ids = params.ids();
        let mut subnet = || SubNet {
            layers: (0..3)
                .map(|_| ConvLayer {
                    weight: ids.next().expect("layout checked"),
                    bias: ids.next().expect("layout checked"),
                })
                .collect(),
        };
        let blocks = (0..arch.blocks)
            .map(|_| CouplingBlock {
                phi: subnet(),
                rho: subnet(),
                eta: subnet(),
            })
            .collect();
        Ok(Self {
            arch,
            blocks,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn cast<U: Real>(&self) -> CouplingStack<U> {
        CouplingStack {
            arch: self.arch,
            blocks: self.blocks.clone(),
            params: self.params.cast(),
        }
    }

    fn subnet(&self, tape: &mut GradTape<T>, net: &SubNet, x: Var) -> Result<Var> {
        let slope = T::lit(self.arch.leaky_slope);
        let mut h = x;
        for (i, layer) in net.layers.iter().enumerate() {
            let w = tape.param(&self.params, layer.weight);
            let b = tape.param(&self.params, layer.bias);
            h = tape.conv2d(h, w, b)?;
            if i + 1 < net.layers.len() {
                h = tape.leaky_relu(h, slope);
            }
        }
        Ok(h)
    }

    /// `λ · tanh(ρ(x) / λ)`
    fn log_scale(&self, tape: &mut GradTape<T>, blk: &CouplingBlock, x: Var) -> Result<Var> {
        let lambda = T::lit(self.arch.clamp);
        let r = self.subnet(tape, &blk.rho, x)?;
        let r = tape.scale(r, T::one() / lambda);
        let r = tape.tanh(r);
        Ok(tape.scale(r, lambda))
    }

    fn check_branches(&self, tape: &GradTape<T>, b1: Var, b2: Var) -> Result<()> {
        let (h1, w1, c1) = tape.value(b1).hwc()?;
        let (h2, w2, c2) = tape.value(b2).hwc()?;
        if c1 != self.arch.message_channels || c2 != IMAGE_CHANNELS || (h1, w1) != (h2, w2) {
            return Err(Error::Shape(format!(
                "branches {h1}×{w1}×{c1} and {h2}×{w2}×{c2} do not fit a stack with {} message channels",
                self.arch.message_channels
            )));
        }
        Ok(())
    }

    pub fn block_forward(&self, tape: &mut GradTape<T>, index: usize, b1: Var, b2: Var) -> Result<(Var, Var)> {
        self.check_branches(tape, b1, b2)?;
        let blk = &self.blocks[index];
        let phi = self.subnet(tape, &blk.phi, b1)?;
        let b2_next = tape.add(b2, phi)?;
        let s = self.log_scale(tape, blk, b2_next)?;
        let scale = tape.exp(s);
        let scaled = tape.mul(b1, scale)?;
        let eta = self.subnet(tape, &blk.eta, b2_next)?;
        let b1_next = tape.add(scaled, eta)?;
        Ok((b1_next, b2_next))
    }

    pub fn block_inverse(&self, tape: &mut GradTape<T>, index: usize, b1_next: Var, b2_next: Var) -> Result<(Var, Var)> {
        self.check_branches(tape, b1_next, b2_next)?;
        let blk = &self.blocks[index];
        let eta = self.subnet(tape, &blk.eta, b2_next)?;
        let shifted = tape.sub(b1_next, eta)?;
        let s = self.log_scale(tape, blk, b2_next)?;
        let neg = tape.scale(s, -T::one());
        let inv_scale = tape.exp(neg);
        let b1 = tape.mul(shifted, inv_scale)?;
        let phi = self.subnet(tape, &blk.phi, b1)?;
        let b2 = tape.sub(b2_next, phi)?;
        Ok((b1, b2))
    }

    /// Forward pass on the tape: `(message, cover) → (Ẑ, watermarked)`.
    pub fn embed_on(&self, tape: &mut GradTape<T>, message: Var, cover: Var) -> Result<(Var, Var)> {
        let (mut b1, mut b2) = (message, cover);
        for i in 0..self.blocks.len() {
            (b1, b2) = self.block_forward(tape, i, b1, b2)?;
        }
        Ok((b1, b2))
    }

    /// Reverse pass on the tape: `(Z, noised) → (recovered message, recovered cover)`.
    pub fn extract_on(&self, tape: &mut GradTape<T>, z: Var, noised: Var) -> Result<(Var, Var)> {
        let (h, w, _) = tape.value(noised).hwc()?;
        if h < MIN_EXTENT || w < MIN_EXTENT {
            return Err(Error::Shape(format!(
                "{h}×{w} is below the {MIN_EXTENT}×{MIN_EXTENT} minimum for extraction"
            )));
        }
        let (mut b1, mut b2) = (z, noised);
        for i in (0..self.blocks.len()).rev() {
            (b1, b2) = self.block_inverse(tape, i, b1, b2)?;
        }
        Ok((b1, b2))
    }

    /// Returns `(Ẑ, watermarked)`; the watermarked image is not clamped or
    /// quantized.
    pub fn embed(&self, message: &Tensor<T>, cover: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = GradTape::new();
        let m = tape.constant(message.clone());
        let c = tape.constant(cover.clone());
        let (z, w) = self.embed_on(&mut tape, m, c)?;
        Ok((tape.value(z).clone(), tape.value(w).clone()))
    }

    /// Returns `(recovered message, recovered cover)`.
    pub fn extract(&self, z: &Tensor<T>, noised: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = GradTape::new();
        let zv = tape.constant(z.clone());
        let n = tape.constant(noised.clone());
        let (m, c) = self.extract_on(&mut tape, zv, n)?;
        Ok((tape.value(m).clone(), tape.value(c).clone()))
    }

    /// Extraction with the constant `Z = 0.5`, sized to the input.
    pub fn extract_blind(&self, noised: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w, _) = noised.hwc()?;
        let z = Tensor::full(&[h, w, self.arch.message_channels], T::lit(Z_CONSTANT));
        self.extract(&z, noised)
    }
}

/// Value of every element of the constant `Z` fed to extraction.
pub const Z_CONSTANT: f64 = 0.5;
