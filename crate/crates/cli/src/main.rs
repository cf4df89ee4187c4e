use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use invmark_core::checkpoint::Checkpoint;
use invmark_core::dataset::{center_item, list_images, Dataset};
use invmark_core::distort::{attack, jpeg_encode, NoiseSpec};
use invmark_core::eval::{default_grid, parse_grid, sweep, SweepConfig};
use invmark_core::image_io::{load_image, quantize, save_image};
use invmark_core::msgcodec::{decode_bits, decode_groups_with_confidence, group_bits, message_tensor, BitMessage};
use invmark_core::train::{load_config, train, TrainConfig, TrainOutputs};
use invmark_core::{selftest, CouplingStack, Tensor};

/// Invertible-network image watermarking.
#[derive(Parser)]
#[command(name = "invmark", version)]
struct Cli {
    /// Seed for every random choice (overrides the config seed when training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config on a folder of images.
    Train(TrainArgs),
    /// Hide a message in a cover image.
    Embed(EmbedArgs),
    /// Recover a message from a (possibly attacked) image.
    Extract(ExtractArgs),
    /// Apply one distortion to an image.
    Attack(AttackArgs),
    /// Measure PSNR and bit accuracy over an attack grid.
    Eval(EvalArgs),
    /// Run the built-in codec, invertibility and gradient checks.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Metric log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct MessageShape {
    /// Message length l.
    #[arg(long)]
    bits: usize,
    /// Message channels c; must divide l.
    #[arg(long)]
    groups: usize,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Bitstring of 0/1, or hex with a 0x prefix.
    #[arg(long)]
    msg: String,
    #[command(flatten)]
    shape: MessageShape,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    shape: MessageShape,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackType {
    Identity,
    Crop,
    Cropout,
    Dropout,
    Gaussian,
    Jpeg,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long = "type", value_enum)]
    kind: AttackType,
    /// Remaining ratio for crop, cropout and dropout.
    #[arg(long)]
    p: Option<f64>,
    /// Blur width.
    #[arg(long)]
    sigma: Option<f64>,
    /// JPEG quality.
    #[arg(long)]
    q: Option<u8>,
    #[arg(long = "in")]
    input: PathBuf,
    /// PNG output; a .jpg/.jpeg path keeps the JPEG stream for `--type jpeg`.
    #[arg(long)]
    out: PathBuf,
    /// Cover image, needed by cropout and dropout.
    #[arg(long)]
    cover: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON grid of `{"kind", "intensities"}` rows; a standard sweep when absent.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Where to write the JSON-lines report.
    #[arg(long)]
    report: PathBuf,
    /// Message length; taken from the checkpoint config when absent.
    #[arg(long)]
    bits: Option<usize>,
    /// Evaluation size; taken from the checkpoint config when absent.
    #[arg(long)]
    size: Option<usize>,
}

/// Bad invocation; reported with exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => cmd_train(a, seed)?,
        Command::Embed(a) => cmd_embed(a)?,
        Command::Extract(a) => cmd_extract(a)?,
        Command::Attack(a) => cmd_attack(a, seed.unwrap_or(0))?,
        Command::Eval(a) => cmd_eval(a, seed.unwrap_or(0))?,
        Command::Selftest => return Ok(cmd_selftest(seed.unwrap_or(0))),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut config = load_config(&a.config).map_err(|e| usage(e.to_string()))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    let data = Dataset::open(&a.data, config.dataset_spec())?;
    let log = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    let outputs = TrainOutputs { checkpoint: Some(a.out.clone()), log: Some(log.clone()) };
    let (trainer, reports) = train(&config, &data, &outputs)?;
    let last = reports.last();
    println!(
        "trained {} steps; final bit accuracy {}; checkpoint {}; log {}",
        trainer.step_count(),
        last.map_or("n/a".into(), |r| format!("{:.3}", r.bit_acc)),
        a.out.display(),
        log.display()
    );
    Ok(())
}

/// Loads a checkpoint and checks that its message channels match `groups`.
fn load_stack(path: &Path, shape: &MessageShape) -> anyhow::Result<CouplingStack<f32>> {
    group_bits(shape.bits, shape.groups).map_err(|e| usage(e.to_string()))?;
    let ckpt = Checkpoint::load(path)?;
    let stack = ckpt.stack()?;
    let c = stack.architecture().message_channels;
    if c != shape.groups {
        return Err(usage(format!("checkpoint has {c} message channels but --groups is {}", shape.groups)));
    }
    Ok(stack)
}

fn cmd_embed(a: EmbedArgs) -> anyhow::Result<()> {
    group_bits(a.shape.bits, a.shape.groups).map_err(|e| usage(e.to_string()))?;
    let msg = BitMessage::parse(&a.msg, a.shape.bits, a.shape.groups).map_err(|e| usage(e.to_string()))?;
    let stack = load_stack(&a.ckpt, &a.shape)?;
    let cover: Tensor<f32> = load_image(&a.input)?;
    let (h, w, _) = cover.hwc()?;
    let (_, wm) = stack.embed(&message_tensor(&msg, h, w), &cover)?;
    save_image(&wm, &a.out)?;
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> anyhow::Result<()> {
    let stack = load_stack(&a.ckpt, &a.shape)?;
    let img: Tensor<f32> = load_image(&a.input)?;
    let (m_out, _) = stack.extract_blind(&img)?;
    let r = group_bits(a.shape.bits, a.shape.groups)?;
    let decoded = decode_groups_with_confidence(&m_out, r)?;
    let msg = decode_bits(&decoded.code, a.shape.groups)?;
    println!("{}", msg.to_bitstring());
    let conf: Vec<String> = decoded.confidence.iter().map(|c| format!("{c:.4}")).collect();
    println!("confidence {}", conf.join(" "));
    Ok(())
}

fn cmd_attack(a: AttackArgs, seed: u64) -> anyhow::Result<()> {
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| usage(format!("this attack needs --{flag}")));
    let spec = match a.kind {
        AttackType::Identity => NoiseSpec::Identity,
        AttackType::Crop => NoiseSpec::Crop { p: need(a.p, "p")?, seed },
        AttackType::Cropout => NoiseSpec::Cropout { p: need(a.p, "p")?, seed },
        AttackType::Dropout => NoiseSpec::Dropout { p: need(a.p, "p")?, seed },
        AttackType::Gaussian => NoiseSpec::Gaussian { sigma: need(a.sigma, "sigma")? },
        AttackType::Jpeg => NoiseSpec::JpegReal { q: a.q.ok_or_else(|| usage("this attack needs --q"))? },
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let img: Tensor<f32> = load_image(&a.input)?;
    let cover = match (&a.cover, a.kind) {
        (Some(p), _) => Some(load_image::<f32>(p)?),
        (None, AttackType::Cropout | AttackType::Dropout) => return Err(usage("cropout and dropout need --cover")),
        (None, _) => None,
    };

    let jpeg_out = a
        .out
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("jpg") || e.eq_ignore_ascii_case("jpeg"));
    if let NoiseSpec::JpegReal { q } = spec {
        if jpeg_out {
            fs::write(&a.out, jpeg_encode(&img, q)?).with_context(|| format!("writing {}", a.out.display()))?;
            return Ok(());
        }
    } else if jpeg_out {
        bail!("only --type jpeg writes JPEG output; use a .png path");
    }
    let out = attack(&spec, &img, cover.as_ref())?;
    if let Some(r) = out.region {
        log::info!("region top {} left {} size {}×{}", r.top, r.left, r.height, r.width);
    }
    save_image(&quantize(&out.noised), &a.out)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, seed: u64) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let stack = ckpt.stack()?;
    let groups = stack.architecture().message_channels;
    let config = match &ckpt.config {
        Some(text) => Some(TrainConfig::from_json(text)?),
        None => None,
    };
    let bits = a
        .bits
        .or(config.as_ref().map(|c| c.bits))
        .ok_or_else(|| usage("checkpoint has no config; pass --bits"))?;
    group_bits(bits, groups).map_err(|e| usage(e.to_string()))?;
    let mut spec = config.as_ref().map(TrainConfig::dataset_spec).unwrap_or_default();
    if let Some(s) = a.size {
        spec.image_size = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let grid = match &a.grid {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_grid(&text).map_err(|e| usage(e.to_string()))?
        }
        None => default_grid(),
    };

    let mut images = Vec::new();
    for p in list_images(&a.data)? {
        match load_image::<f32>(&p) {
            Ok(img) => images.push(center_item(&spec, &img)),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    let report = sweep(&stack, &images, &grid, &SweepConfig { bits, groups, seed })?;
    fs::write(&a.report, report.to_jsonl()).with_context(|| format!("writing {}", a.report.display()))?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_selftest(seed: u64) -> ExitCode {
    let results = selftest::run_all(seed);
    for r in &results {
        println!("{} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
