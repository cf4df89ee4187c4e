//! Quick built-in checks: codec round trips, invertibility and a sampled
//! gradient check against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distort::NoiseSpec;
use crate::error::Result;
use crate::inn::{Architecture, CouplingStack, Init};
use crate::loss::LossWeights;
use crate::msgcodec::{decode_message, message_tensor, BitMessage};
use crate::params::ParamStore;
use crate::tape::GradTape;
use crate::tensor::Tensor;
use crate::train::item_loss_on;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(u64) -> Result<(bool, String)>;

pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let checks: [(&'static str, Check); 3] =
        [("codec round trip", codec), ("invertibility", invertibility), ("gradient check", gradients)];
    checks
        .iter()
        .map(|&(name, f)| match f(seed) {
            Ok((passed, detail)) => CheckOutcome { name, passed, detail },
            Err(e) => CheckOutcome { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}

fn codec(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut total = 0;
    for r in 1..=8 {
        for groups in [1, 3, 10] {
            for _ in 0..20 {
                let msg = BitMessage::random(&mut rng, r * groups, groups)?;
                let back = decode_message(&message_tensor::<f32>(&msg, 4, 4), msg.len(), groups)?;
                failures += usize::from(back != msg);
                total += 1;
            }
        }
    }
    Ok((failures == 0, format!("{failures} of {total} messages differ")))
}

fn invertibility(seed: u64) -> Result<(bool, String)> {
    let stack = CouplingStack::<f64>::new(Architecture::new(3, 4), Init::Random { seed, final_scale: 0.1 })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let m = Tensor::from_fn(16, 16, 4, |_, _, _| rng.gen::<f64>());
    let x = Tensor::from_fn(16, 16, 3, |_, _, _| rng.gen::<f64>());
    let (z, wm) = stack.embed(&m, &x)?;
    let (m_back, x_back) = stack.extract(&z, &wm)?;
    let err = m_back.max_abs_diff(&m)?.max(x_back.max_abs_diff(&x)?);
    Ok((err < 1e-10, format!("max reconstruction error {err:.3e}")))
}

/// Central differences on a random sample of parameter coordinates.
fn gradients(seed: u64) -> Result<(bool, String)> {
    let arch = Architecture::new(1, 2);
    let stack = CouplingStack::<f64>::new(arch, Init::Random { seed, final_scale: 0.2 })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let cover = Tensor::from_fn(8, 8, 3, |_, _, _| rng.gen::<f64>());
    let msg = BitMessage::random(&mut rng, 4, 2)?;
    let weights = LossWeights { w_w: 1.0, ..LossWeights::default() };
    let loss = |params: &ParamStore<f64>| -> Result<(f64, Vec<Tensor<f64>>)> {
        let stack = CouplingStack::from_params(arch, params.clone())?;
        let mut tape = GradTape::new();
        let c = tape.constant(cover.clone());
        let m = tape.constant(message_tensor(&msg, 8, 8));
        let item = item_loss_on(&stack, &mut tape, c, m, &NoiseSpec::Identity, &weights, false)?;
        let value = tape.value(item.loss.total).data()[0];
        Ok((value, tape.backward(item.loss.total)?.for_store(params)))
    };
    let base = stack.params().clone();
    let ids: Vec<_> = base.ids().collect();
    let (_, analytic) = loss(&base)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    let samples = 24;
    for _ in 0..samples {
        let t = rng.gen_range(0..base.len());
        let i = rng.gen_range(0..analytic[t].len());
        let mut plus = base.clone();
        plus.get_mut(ids[t]).data_mut()[i] += h;
        let mut minus = base.clone();
        minus.get_mut(ids[t]).data_mut()[i] -= h;
        let numeric = (loss(&plus)?.0 - loss(&minus)?.0) / (2.0 * h);
        let a = analytic[t].data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        failed += usize::from(rel >= 1e-3);
    }
    Ok((failed == 0, format!("{failed} of {samples} coordinates off; worst relative error {worst:.2e}")))
}
