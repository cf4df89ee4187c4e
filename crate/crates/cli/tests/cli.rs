use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use invmark_core::checkpoint::Checkpoint;
use invmark_core::image_io::{load_image, save_image, to_rgb8};
use invmark_core::msgcodec::{decode_message, message_tensor, BitMessage};
use invmark_core::synth::natural_image;
use invmark_core::{Architecture, CouplingStack, Init, Tensor};

fn invmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invmark"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
    cover: PathBuf,
}

/// A random 2-block model with 5 message channels and a 32×32 cover.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let stack = CouplingStack::<f32>::new(Architecture::new(2, 5), Init::Random { seed: 3, final_scale: 0.05 }).unwrap();
    let ckpt = root.join("model.iwn");
    Checkpoint::new(&stack, 0).save(&ckpt).unwrap();
    let cover = root.join("cover.png");
    save_image(&natural_image::<f32>(32, 32, 1), &cover).unwrap();
    Fixture { _dir: dir, root, ckpt, cover }
}

#[test]
fn groups_must_divide_bits() {
    let f = fixture();
    let out = invmark(&["extract", "--ckpt", s(&f.ckpt), "--in", s(&f.cover), "--bits", "30", "--groups", "7"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("30"));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(invmark(&["embed", "--nope"]).status.code(), Some(2));
    assert_eq!(invmark(&["attack", "--type", "sharpen", "--in", "a", "--out", "b"]).status.code(), Some(2));
    let f = fixture();
    let out = f.root.join("x.png");
    let cropout = invmark(&["attack", "--type", "cropout", "--p", "0.5", "--in", s(&f.cover), "--out", s(&out)]);
    assert_eq!(cropout.status.code(), Some(2));
    let no_q = invmark(&["attack", "--type", "jpeg", "--in", s(&f.cover), "--out", s(&out)]);
    assert_eq!(no_q.status.code(), Some(2));
}

#[test]
fn missing_files_fail_with_a_diagnostic() {
    let f = fixture();
    let out = invmark(&["extract", "--ckpt", s(&f.root.join("absent.iwn")), "--in", s(&f.cover), "--bits", "10", "--groups", "5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.iwn"));
}

#[test]
fn selftest_passes() {
    let out = invmark(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
}

#[test]
fn embed_and_extract_match_the_library() {
    let f = fixture();
    let wm_path = f.root.join("wm.png");
    let bits = "1011001110";
    let out = invmark(&[
        "embed", "--ckpt", s(&f.ckpt), "--in", s(&f.cover), "--msg", bits, "--bits", "10", "--groups", "5", "--out",
        s(&wm_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let stack = Checkpoint::load(&f.ckpt).unwrap().stack().unwrap();
    let cover: Tensor<f32> = load_image(&f.cover).unwrap();
    let msg = BitMessage::from_bitstring(bits, 5).unwrap();
    let (_, wm) = stack.embed(&message_tensor(&msg, 32, 32), &cover).unwrap();
    let from_cli: Tensor<f32> = load_image(&wm_path).unwrap();
    assert_eq!(to_rgb8(&from_cli).unwrap(), to_rgb8(&wm).unwrap());

    let out = invmark(&["extract", "--ckpt", s(&f.ckpt), "--in", s(&wm_path), "--bits", "10", "--groups", "5"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    let (m_out, _) = stack.extract_blind(&from_cli).unwrap();
    let expected = decode_message(&m_out, 10, 5).unwrap().to_bitstring();
    assert_eq!(lines.next(), Some(expected.as_str()));
    let conf: Vec<f64> = lines.next().unwrap().trim_start_matches("confidence ").split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(conf.len(), 5);
    assert!(conf.iter().all(|c| (0.0..=1.0).contains(c)));
}

#[test]
fn hex_messages_are_accepted() {
    let f = fixture();
    let a = f.root.join("a.png");
    let b = f.root.join("b.png");
    let run = |msg: &str, out: &Path| {
        invmark(&["embed", "--ckpt", s(&f.ckpt), "--in", s(&f.cover), "--msg", msg, "--bits", "12", "--groups", "4", "--out", s(out)])
    };
    // a 4-channel model is needed for 12 bits in 4 groups
    let stack = CouplingStack::<f32>::new(Architecture::new(1, 4), Init::Random { seed: 5, final_scale: 0.05 }).unwrap();
    Checkpoint::new(&stack, 0).save(&f.ckpt).unwrap();
    assert!(run("0xA5C", &a).status.success());
    assert!(run("101001011100", &b).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(run("0xA5", &a).status.code(), Some(2));
}

#[test]
fn attacks_write_images() {
    let f = fixture();
    let cases: [&[&str]; 5] = [
        &["--type", "identity"],
        &["--type", "crop", "--p", "0.25"],
        &["--type", "dropout", "--p", "0.5", "--cover"],
        &["--type", "gaussian", "--sigma", "1"],
        &["--type", "jpeg", "--q", "50"],
    ];
    for (i, extra) in cases.iter().enumerate() {
        let out = f.root.join(format!("att{i}.png"));
        let mut args = vec!["attack", "--in", s(&f.cover), "--out", s(&out)];
        args.extend_from_slice(extra);
        if extra.last() == Some(&"--cover") {
            args.push(s(&f.cover));
        }
        let res = invmark(&args);
        assert!(res.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&res.stderr));
        let img: Tensor<f32> = load_image(&out).unwrap();
        let expected = if i == 1 { 16 } else { 32 };
        assert_eq!(img.height(), expected, "{extra:?}");
    }
    let jpg = f.root.join("att.jpg");
    let res = invmark(&["attack", "--type", "jpeg", "--q", "75", "--in", s(&f.cover), "--out", s(&jpg)]);
    assert!(res.status.success());
    assert_eq!(&fs::read(&jpg).unwrap()[..3], &[0xFF, 0xD8, 0xFF]);
}

#[test]
fn attack_seed_controls_crop_position() {
    let f = fixture();
    let run = |seed: &str, name: &str| {
        let out = f.root.join(name);
        let res = invmark(&["--seed", seed, "attack", "--type", "crop", "--p", "0.3", "--in", s(&f.cover), "--out", s(&out)]);
        assert!(res.status.success());
        fs::read(out).unwrap()
    };
    assert_eq!(run("4", "a.png"), run("4", "b.png"));
    let differs = (0..8).any(|k| run(&k.to_string(), "c.png") != run("4", "d.png"));
    assert!(differs);
}

fn write_dataset(dir: &Path, n: u64) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        save_image(&natural_image::<f32>(24, 24, 100 + i), &dir.join(format!("img{i:02}.png"))).unwrap();
    }
}

#[test]
fn train_is_reproducible_and_eval_reports() {
    let f = fixture();
    let data = f.root.join("data");
    write_dataset(&data, 6);
    let config = f.root.join("config.json");
    fs::write(
        &config,
        r#"{"batch_size": 2, "blocks": 1, "bits": 4, "groups": 2, "image_size": 16, "patch_size": 24,
            "noise": {"weights": {"identity": 0.5, "gaussian": 0.5}}, "max_steps": 3, "checkpoint_every": 2}"#,
    )
    .unwrap();
    let train = |seed: &str, name: &str| {
        let out = f.root.join(name);
        let res = invmark(&["--seed", seed, "train", "--config", s(&config), "--data", s(&data), "--out", s(&out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let mut log = out.clone().into_os_string();
        log.push(".log.jsonl");
        (fs::read(&out).unwrap(), fs::read_to_string(PathBuf::from(log)).unwrap())
    };
    let (ck_a, log_a) = train("9", "a.iwn");
    let (ck_b, log_b) = train("9", "b.iwn");
    assert_eq!(ck_a, ck_b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 3);
    let (ck_c, _) = train("10", "c.iwn");
    assert_ne!(ck_a, ck_c);

    let grid = f.root.join("grid.json");
    fs::write(&grid, r#"[{"kind": "identity"}, {"kind": "jpeg", "intensities": [50, 90]}, {"kind": "crop", "intensities": [2.0]}]"#).unwrap();
    let report = f.root.join("report.jsonl");
    let res = invmark(&["eval", "--ckpt", s(&f.root.join("a.iwn")), "--data", s(&data), "--grid", s(&grid), "--report", s(&report)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().next().unwrap().contains("\"images\":6"));
    assert!(text.contains("jpeg_real"));
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("failed"), "{stdout}");
}
