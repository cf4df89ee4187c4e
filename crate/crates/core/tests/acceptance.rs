//! One test per acceptance criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line straight to stderr (bypassing the test
//! harness capture) and then asserts.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{reference_jpeg, rel_err};
use invmark_core::checkpoint::Checkpoint;
use invmark_core::dataset::{Dataset, DatasetSpec};
use invmark_core::distort::{
    attack, crop_size, cropout, dropout_mask, gaussian_blur, jpeg_simulate, NoiseDistribution, NoiseKind, NoiseSpec,
    Rounding,
};
use invmark_core::eval::{sweep, GridRow, Psnr, SweepConfig};
use invmark_core::image_io::quantize;
use invmark_core::loss::LossWeights;
use invmark_core::msgcodec::{broadcast, candidates, decode_bits, decode_groups, decode_message, encode_groups, message_tensor, BitMessage};
use invmark_core::synth::natural_image;
use invmark_core::tape::approx_round;
use invmark_core::train::{bit_agreement, item_loss_on, TrainConfig, Trainer};
use invmark_core::{Architecture, CouplingStack, GradTape, Init, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n}: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

#[test]
fn criterion_01_codec_exactness() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut errors = 0usize;
    let mut total = 0usize;
    let check = |msg: BitMessage, errors: &mut usize| {
        let groups = msg.groups();
        let m: Tensor<f32> = broadcast(&encode_groups(&msg), 8, 8);
        let back = decode_bits(&decode_groups(&m, msg.group_bits()).unwrap(), groups).unwrap();
        *errors += usize::from(back != msg);
    };
    for r in 1..=8 {
        for i in 0..1000 {
            let groups = 1 + i % 10;
            check(BitMessage::random(&mut rng, r * groups, groups).unwrap(), &mut errors);
            total += 1;
        }
    }
    for r in 1..=4 {
        for groups in 1..=12 / r {
            let l = r * groups;
            for word in 0u32..1 << l {
                let bits = (0..l).map(|i| ((word >> i) & 1) as u8).collect();
                check(BitMessage::new(bits, groups).unwrap(), &mut errors);
                total += 1;
            }
        }
    }
    let elapsed = t.elapsed();
    verdict(
        1,
        errors == 0 && elapsed < Duration::from_secs(10),
        &format!("{errors} decoding errors in {total} messages, {} (limit 10 s)", secs(elapsed)),
    );
}

#[test]
fn criterion_02_candidate_invariants() {
    let mut bad = Vec::new();
    for r in 1..=8 {
        let c = candidates(r).unwrap();
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        let spacing = (1u32 << (8 - r)) as f64;
        if mean != 128.0 || c.windows(2).any(|w| w[1] - w[0] != spacing) || c.len() != 1 << r {
            bad.push(r);
        }
    }
    verdict(2, bad.is_empty(), &format!("mean 128 and spacing 2^(8-r) exact for r = 1..8; failing r: {bad:?}"));
}

#[test]
fn criterion_03_bijectivity() {
    let t = Instant::now();
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for trial in 0..100u64 {
        let c = if trial % 2 == 0 { 2 } else { 10 };
        let stack = CouplingStack::<f64>::new(Architecture::new(4, c), Init::Random { seed: trial, final_scale: 0.05 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let m = Tensor::from_fn(16, 16, c, |_, _, _| rng.gen::<f64>());
        let x = Tensor::from_fn(16, 16, 3, |_, _, _| rng.gen::<f64>());

        let (z, wm) = stack.embed(&m, &x).unwrap();
        let (m2, x2) = stack.extract(&z, &wm).unwrap();
        worst64 = worst64.max(m2.max_abs_diff(&m).unwrap().max(x2.max_abs_diff(&x).unwrap()));

        let single = stack.cast::<f32>();
        let (m, x) = (m.cast::<f32>(), x.cast::<f32>());
        let (z, wm) = single.embed(&m, &x).unwrap();
        let (m2, x2) = single.extract(&z, &wm).unwrap();
        worst32 = worst32.max(m2.max_abs_diff(&m).unwrap().max(x2.max_abs_diff(&x).unwrap()) as f64);
    }
    let elapsed = t.elapsed();
    verdict(
        3,
        worst32 < 1e-4 && worst64 < 1e-10 && elapsed < Duration::from_secs(30),
        &format!(
            "max inverse error {worst32:.2e} single (< 1e-4), {worst64:.2e} double (< 1e-10), {} (limit 30 s)",
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_04_identity_at_zero() {
    let stack = CouplingStack::<f32>::new(Architecture::new(16, 5), Init::Zeros).unwrap();
    let msg = BitMessage::random(&mut ChaCha8Rng::seed_from_u64(4), 10, 5).unwrap();
    let m = message_tensor::<f32>(&msg, 32, 32);
    let x = natural_image::<f32>(32, 32, 4);
    let (z, wm) = stack.embed(&m, &x).unwrap();
    verdict(4, z == m && wm == x, "zero-initialized 16-block stack returns (m, x) bit for bit");
}

#[test]
fn criterion_05_gradient_suite() {
    let t = Instant::now();
    let arch = Architecture::new(2, 2);
    let stack = CouplingStack::<f64>::new(arch, Init::Random { seed: 5, final_scale: 0.1 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cover = Tensor::from_fn(8, 8, 3, |_, _, _| rng.gen::<f64>());
    let msg = BitMessage::random(&mut rng, 4, 2).unwrap();
    let weights = LossWeights::default();
    let base = stack.params().clone();
    let ids: Vec<_> = base.ids().collect();

    let unflatten = |flat: &[f64]| {
        let mut p = base.clone();
        let mut at = 0;
        for &id in &ids {
            let t = p.get_mut(id).data_mut();
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
        p
    };
    let record = |params: ParamStore<f64>| {
        let stack = CouplingStack::from_params(arch, params).unwrap();
        let mut tape = GradTape::new();
        let c = tape.constant(cover.clone());
        let m = tape.constant(message_tensor(&msg, 8, 8));
        let item = item_loss_on(&stack, &mut tape, c, m, &NoiseSpec::Identity, &weights, false).unwrap();
        (stack, tape, item.loss.total)
    };
    let eval = |flat: &[f64]| {
        let (_, tape, total) = record(unflatten(flat));
        (tape.value(total).data()[0], tape.branch_pattern())
    };

    let flat: Vec<f64> = ids.iter().flat_map(|&id| base.get(id).data().iter().copied()).collect();
    let (stack0, tape0, total0) = record(base.clone());
    let analytic: Vec<f64> =
        tape0.backward(total0).unwrap().for_store(stack0.params()).iter().flat_map(|t| t.data().to_vec()).collect();
    let pattern0 = tape0.branch_pattern();

    // Central differences are only a valid reference when θ ± h stay on the
    // smooth piece of θ. A miss whose stencil crosses a leaky-ReLU or |·| kink
    // is re-measured with the largest smaller step that does not.
    let h = 1e-5;
    let tol = 1e-3;
    let (mut direct, mut straddled, mut smooth_misses, mut unresolved) = (0usize, 0usize, 0usize, 0usize);
    let mut worst_smooth = 0.0f64;
    let mut probe = flat.clone();
    let mut central = |i: usize, step: f64| {
        probe[i] = flat[i] + step;
        let up = eval(&probe);
        probe[i] = flat[i] - step;
        let down = eval(&probe);
        probe[i] = flat[i];
        let smooth = up.1 == pattern0 && down.1 == pattern0;
        (rel_err(analytic[i], (up.0 - down.0) / (2.0 * step)), smooth)
    };
    for i in 0..flat.len() {
        let (e, smooth) = central(i, h);
        if smooth {
            worst_smooth = worst_smooth.max(e);
        }
        if e < tol {
            direct += 1;
        } else if smooth {
            smooth_misses += 1;
        } else {
            straddled += 1;
            let mut step = h / 10.0;
            let ok = loop {
                let (e, smooth) = central(i, step);
                if smooth {
                    break e < tol;
                }
                step /= 10.0;
                if step < 1e-9 {
                    break false;
                }
            };
            unresolved += usize::from(!ok);
        }
    }
    let elapsed = t.elapsed();
    verdict(
        5,
        smooth_misses == 0 && unresolved == 0 && elapsed < Duration::from_secs(300),
        &format!(
            "{} parameters: {direct} match at h = 1e-5; {straddled} straddle a kink at h = 1e-5 and {} of them match at a smaller kink-free step; \
             {smooth_misses} misses on smooth stencils (worst smooth error {worst_smooth:.2e}); {} (limit 300 s)",
            flat.len(),
            straddled - unresolved,
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_06_approx_round_bound() {
    let mut sup = 0.0f64;
    let mut off_half = Vec::new();
    let points: Vec<f64> = (0..=8000).map(|k| (k as f64 - 4000.0) / 1000.0).collect();
    let dev = |x: f64| (approx_round(x) - x.signum() * (x.abs() + 0.5).floor()).abs();
    for &x in &points {
        sup = sup.max(dev(x));
    }
    for &x in &points {
        if dev(x) > sup - 1e-9 && (x.abs().fract() - 0.5).abs() > 1e-12 {
            off_half.push(x);
        }
    }
    verdict(
        6,
        (sup - 0.125).abs() <= 1e-6 && off_half.is_empty(),
        &format!("sup |approx_round(x) - round(x)| = {sup} over [-4, 4], maxima off half-integers: {off_half:?}"),
    );
}

#[test]
fn criterion_07_jpeg_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut qualities = Vec::new();
    for i in 0..10 {
        let source = natural_image::<f64>(160, 160, 700 + i);
        let (top, left) = (rng.gen_range(0..=96), rng.gen_range(0..=96));
        let patch = source.window(top, left, 64, 64).unwrap();
        let q = rng.gen_range(10u8..=95);
        qualities.push(q);
        let ours = jpeg_simulate(&patch, q, Rounding::Exact).unwrap();
        let reference = reference_jpeg(&patch, q as u32);
        worst = worst.max(ours.max_abs_diff(&reference).unwrap());
    }
    verdict(
        7,
        worst <= 1.0 / 255.0 + 1e-9,
        &format!("max per-pixel gap to the reference transform {:.4}/255 (limit 1/255) at qualities {qualities:?}", worst * 255.0),
    );
}

#[test]
fn criterion_08_attack_geometry() {
    let mut problems = Vec::new();
    for (h, w) in [(64usize, 64usize), (128, 128), (100, 72)] {
        for p in [0.035, 0.1, 0.3, 0.5, 0.8, 1.0] {
            let Ok((ch, cw)) = crop_size(p, h, w) else { continue };
            let gap = ((ch * cw) as f64 - p * (h * w) as f64).abs();
            if gap > h.max(w) as f64 {
                problems.push(format!("crop {h}x{w} p {p}: {ch}x{cw}, area off by {gap:.1}"));
            }
        }
    }
    let n = 128 * 128;
    for (i, p) in [0.3, 0.5, 0.8].into_iter().enumerate() {
        let kept = dropout_mask(p, n, 80 + i as u64).unwrap().iter().filter(|&&k| k).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        if (kept - n as f64 * p).abs() > 3.0 * sigma {
            problems.push(format!("dropout p {p}: kept {kept} of {n}"));
        }
    }
    for sigma in [0.5, 1.0, 2.0, 3.0] {
        for v in [0.0, 0.3, 80.0 / 255.0, 1.0] {
            let flat = Tensor::<f64>::full(&[20, 17, 3], v);
            if gaussian_blur(&flat, sigma).unwrap() != flat {
                problems.push(format!("blur sigma {sigma} changed a constant {v}"));
            }
        }
    }
    let wm = natural_image::<f64>(64, 64, 1);
    let cover = natural_image::<f64>(64, 64, 2);
    let out = cropout(&wm, &cover, 0.3, 9).unwrap();
    let region = out.region.unwrap();
    for y in 0..64 {
        for x in 0..64 {
            for c in 0..3 {
                let expect = if region.contains(y, x) { wm.at(y, x, c) } else { cover.at(y, x, c) };
                if out.noised.at(y, x, c) != expect {
                    problems.push(format!("cropout pixel ({y}, {x}) wrong"));
                }
            }
        }
    }
    let whole = attack(&NoiseSpec::Crop { p: 1.0, seed: 3 }, &wm, None).unwrap();
    if whole.noised != wm {
        problems.push("crop at p = 1 is not the full image".into());
    }
    verdict(8, problems.is_empty(), &format!("crop area, dropout 3-sigma, blur of constants, cropout region; issues: {problems:?}"));
}

#[test]
fn criterion_09_untrained_chance_level() {
    let stack = CouplingStack::<f32>::new(Architecture::new(4, 10), Init::Random { seed: 9, final_scale: 0.05 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut acc = 0.0;
    for i in 0..200 {
        let msg = BitMessage::random(&mut rng, 30, 10).unwrap();
        let cover = natural_image::<f32>(32, 32, 900 + i);
        let (_, wm) = stack.embed(&message_tensor(&msg, 32, 32), &cover).unwrap();
        let (m_out, _) = stack.extract_blind(&quantize(&wm)).unwrap();
        acc += bit_agreement(&msg, &decode_message(&m_out, 30, 10).unwrap());
    }
    acc /= 200.0;
    verdict(9, (acc - 0.5).abs() <= 0.08, &format!("random stack bit accuracy {acc:.3} over 200 messages (need 0.5 +/- 0.08)"));
}

const SMOKE_SEED: u64 = 2024;
const EVAL_EVERY: u64 = 250;

fn smoke_data() -> Dataset {
    let images: Vec<Tensor<f32>> = (0..160).map(|i| natural_image(96, 96, 5000 + i)).collect();
    let spec = DatasetSpec { patch_size: 96, image_size: 64, augment: true, heldout_fraction: 0.05 };
    Dataset::from_images(spec, images[..152].to_vec(), images[152..].to_vec()).unwrap()
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        lr: 2e-4,
        batch_size: 4,
        blocks: 4,
        bits: 10,
        groups: 5,
        image_size: 64,
        patch_size: 96,
        noise: NoiseDistribution::identity_only(),
        max_steps: 2000,
        seed: SMOKE_SEED,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

/// Held-out accuracy under one attack row, plus the clean PSNR.
fn held_out(stack: &CouplingStack<f32>, data: &Dataset, row: GridRow) -> (f64, Option<Psnr>) {
    let cfg = SweepConfig { bits: 10, groups: 5, seed: 77 };
    let report = sweep(stack, &data.heldout_items(), &[row], &cfg).unwrap();
    (report.cells[0].accuracy.unwrap_or(0.0), report.mean_psnr)
}

fn psnr_at_least(p: Option<Psnr>, db: f64) -> bool {
    match p {
        Some(Psnr::Identical) => true,
        Some(Psnr::Db(v)) => v >= db,
        None => false,
    }
}

fn show(p: Option<Psnr>) -> String {
    p.map_or_else(|| "n/a".into(), |p| p.to_string())
}

struct SmokeRun {
    accuracy: f64,
    psnr: Option<Psnr>,
    steps: u64,
    elapsed: Duration,
    log: Vec<String>,
    checkpoint: Vec<u8>,
}

/// Identity-noise training, stopping early once both targets hold at an
/// evaluation point.
fn smoke_run(data: &Dataset) -> SmokeRun {
    let t = Instant::now();
    let mut trainer = Trainer::new(smoke_config()).unwrap();
    let mut log = Vec::new();
    let identity = GridRow { kind: NoiseKind::Identity, intensities: Vec::new() };
    let (mut accuracy, mut psnr) = (0.0, None);
    while trainer.step_count() < 2000 {
        log.push(trainer.train_step(data).unwrap().to_json_line());
        if trainer.step_count().is_multiple_of(EVAL_EVERY) {
            (accuracy, psnr) = held_out(trainer.stack(), data, identity.clone());
            eprintln!("smoke step {}: held-out accuracy {accuracy:.3}, PSNR {}", trainer.step_count(), show(psnr));
            if accuracy >= 0.9 && psnr_at_least(psnr, 25.0) {
                break;
            }
        }
    }
    SmokeRun {
        accuracy,
        psnr,
        steps: trainer.step_count(),
        elapsed: t.elapsed(),
        log,
        checkpoint: trainer.checkpoint().to_bytes(),
    }
}

fn first_smoke_run() -> &'static SmokeRun {
    static RUN: OnceLock<SmokeRun> = OnceLock::new();
    RUN.get_or_init(|| smoke_run(&smoke_data()))
}

#[test]
fn criterion_10_smoke_training() {
    let run = first_smoke_run();
    let pass = run.accuracy >= 0.9 && psnr_at_least(run.psnr, 25.0) && run.elapsed < Duration::from_secs(30 * 60);
    verdict(
        10,
        pass,
        &format!(
            "held-out bit accuracy {:.3} (need >= 0.90), PSNR {} (need >= 25 dB), {} steps in {} (limit 1800 s)",
            run.accuracy,
            show(run.psnr),
            run.steps,
            secs(run.elapsed)
        ),
    );
}

#[test]
fn criterion_11_smoke_robustness() {
    let base = first_smoke_run();
    let data = smoke_data();
    let t = Instant::now();
    let ckpt = Checkpoint::from_bytes(&base.checkpoint).unwrap();
    let mut noise = NoiseDistribution::from_weights(&[(NoiseKind::Identity, 0.5), (NoiseKind::Gaussian, 0.5)]);
    noise.intensities.sigma = 1.0;
    let config = TrainConfig { noise, max_steps: base.steps + 3000, ..smoke_config() };
    let mut trainer = Trainer::resume(&ckpt, config).unwrap();
    let blur = GridRow { kind: NoiseKind::Gaussian, intensities: vec![1.0] };
    let mut accuracy = held_out(trainer.stack(), &data, blur.clone()).0;
    let mut extra = 0;
    while extra < 3000 && accuracy < 0.75 {
        trainer.train_step(&data).unwrap();
        extra += 1;
        if extra % EVAL_EVERY == 0 {
            accuracy = held_out(trainer.stack(), &data, blur.clone()).0;
            eprintln!("robustness step {extra}: blur accuracy {accuracy:.3}");
        }
    }
    let elapsed = t.elapsed();
    verdict(
        11,
        accuracy >= 0.75 && elapsed < Duration::from_secs(60 * 60),
        &format!("bit accuracy under sigma = 1 blur {accuracy:.3} (need >= 0.75) after {extra} further steps in {} (limit 3600 s)", secs(elapsed)),
    );
}

#[test]
fn criterion_12_determinism() {
    let a = first_smoke_run();
    let b = smoke_run(&smoke_data());
    let logs = a.log == b.log;
    let ckpts = a.checkpoint == b.checkpoint;
    verdict(
        12,
        logs && ckpts && !a.log.is_empty(),
        &format!(
            "two seeded runs: {} log lines each, logs identical {logs}, checkpoints identical {ckpts} ({} bytes)",
            a.log.len(),
            a.checkpoint.len()
        ),
    );
}
