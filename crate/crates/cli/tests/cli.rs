use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fadenoise(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fadenoise"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FADENOISE_OUT")
        .output()
        .expect("spawn fadenoise")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

const TINY: &[&str] = &[
    "--set",
    "train.patch=16",
    "--set",
    "train.batch=2",
    "--set",
    "train.data.synthetic_count=12",
    "--set",
    "train.data.synthetic_height=40",
    "--set",
    "train.data.synthetic_width=40",
    "--set",
    "synth.count=12",
    "--set",
    "synth.height=40",
    "--set",
    "synth.width=40",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn macs_prints_one_json_object() {
    let d = tempfile::tempdir().unwrap();
    let o = fadenoise(&["macs", "--config", "default"], d.path());
    ok(&o);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let g = v["gmacs_per_mp"].as_f64().unwrap();
    assert!(g > 0.0 && g < 10.0, "{g}");
    assert!(v["teacher_gmacs_per_mp"].as_f64().unwrap() >= 10.0 * g);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let o = fadenoise(&["train", "--bogus-flag"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(fadenoise(&["frobnicate"], d.path()).status.code(), Some(2));

    let o = fadenoise(&["macs", "--set", "train.batch=0"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch must be >= 1"));

    let o = fadenoise(&["macs", "--set", "train.noise.a_min=0.5"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("a_min"));

    let o = fadenoise(&["macs", "--config", "missing.toml"], d.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_zero_iterations_then_eval_identity_and_determinism() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    ok(&fadenoise(&with_tiny(&["synth", "--out", "synth"]), root));
    assert!(root.join("synth/pairs/pairs.json").exists());
    assert!(root.join("synth/manifest.json").exists());

    ok(&fadenoise(
        &with_tiny(&["train", "--iterations", "0", "--out", "run"]),
        root,
    ));
    assert!(root.join("run/final/weights.fdt").exists());
    assert!(root.join("run/manifest.json").exists());
    assert!(!root.join("run/checkpoints").exists());

    // fresh models have a zero output head, so they reproduce the input rows
    ok(&fadenoise(
        &[
            "eval",
            "--model",
            "run/final",
            "--pairs",
            "synth/pairs",
            "--out",
            "ev1",
        ],
        root,
    ));
    let r: Value =
        serde_json::from_str(&fs::read_to_string(root.join("ev1/report.json")).unwrap()).unwrap();
    for k in ["raw_psnr", "raw_ssim", "rgb_psnr", "rgb_ssim"] {
        let (m, i) = (
            r["model"][k].as_f64().unwrap(),
            r["input"][k].as_f64().unwrap(),
        );
        assert!((m - i).abs() < 1e-3 * i.abs().max(1.0), "{k}: {m} vs {i}");
    }
    let csv = fs::read_to_string(root.join("ev1/report.csv")).unwrap();
    assert!(csv.starts_with("name,kind,raw_psnr,raw_ssim,rgb_psnr,rgb_ssim,gmacs_per_mp\n"));

    ok(&fadenoise(
        &[
            "eval",
            "--model",
            "run/final",
            "--pairs",
            "synth/pairs",
            "--out",
            "ev2",
        ],
        root,
    ));
    assert_eq!(
        fs::read(root.join("ev1/report.json")).unwrap(),
        fs::read(root.join("ev2/report.json")).unwrap()
    );

    fs::create_dir_all(root.join("empty")).unwrap();
    fs::write(root.join("empty/pairs.json"), "[]").unwrap();
    let o = fadenoise(
        &[
            "eval",
            "--model",
            "run/final",
            "--pairs",
            "empty",
            "--out",
            "ev3",
        ],
        root,
    );
    assert_ne!(o.status.code(), Some(0));
    assert!(!root.join("ev3/report.json").exists());
}

#[test]
fn output_root_env_and_denoise() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    let o = Command::new(env!("CARGO_BIN_EXE_fadenoise"))
        .args(with_tiny(&["train", "--iterations", "2"]))
        .current_dir(root)
        .env("FADENOISE_OUT", root.join("outroot"))
        .output()
        .unwrap();
    ok(&o);
    assert!(root.join("outroot/train/final/config.json").exists());
    let m: Value = serde_json::from_str(
        &fs::read_to_string(root.join("outroot/train/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["train"]["iterations"], 2);

    ok(&fadenoise(&with_tiny(&["synth", "--out", "s"]), root));
    let pairs: Value =
        serde_json::from_str(&fs::read_to_string(root.join("s/pairs/pairs.json")).unwrap())
            .unwrap();
    let noisy = pairs[0]["noisy"].as_str().unwrap().to_string();
    let input = format!("s/pairs/{noisy}");
    ok(&fadenoise(
        &[
            "denoise",
            "--model",
            "outroot/train/final",
            "--input",
            &input,
            "--out",
            "dn",
        ],
        root,
    ));
    let stem = Path::new(&noisy)
        .file_stem()
        .unwrap()
        .to_str()
        .unwrap()
        .to_string();
    assert!(root.join(format!("dn/{stem}_denoised.pgm")).exists());
    assert!(root.join(format!("dn/{stem}_denoised.ppm")).exists());
}

#[test]
fn align_writes_pair_and_flow() {
    use fadenoise::bayer::io::write_raw;
    use fadenoise::bayer::{BayerImage, CfaPattern};
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    let tex = |y: f64, x: f64| {
        let mut v = 0.3;
        for k in 0..30 {
            let k = k as f64;
            let (cy, cx) = ((k * 37.3) % 110.0 + 8.0, (k * 53.9) % 110.0 + 8.0);
            v += 0.25 * (-((y - cy).powi(2) + (x - cx).powi(2)) / 12.0).exp();
        }
        v as f32
    };
    let clean = BayerImage::from_fn(256, 256, CfaPattern::Rggb, |y, x| {
        tex(y as f64 / 2.0, x as f64 / 2.0)
    });
    let noisy = BayerImage::from_fn(256, 256, CfaPattern::Rggb, |y, x| {
        tex((y as f64 - 2.0) / 2.0, (x as f64 - 4.0) / 2.0)
    });
    write_raw(&clean, &root.join("c.pgm")).unwrap();
    write_raw(&noisy, &root.join("n.pgm")).unwrap();
    ok(&fadenoise(
        &[
            "align", "--noisy", "n.pgm", "--clean", "c.pgm", "--out", "al",
        ],
        root,
    ));
    let f: Value =
        serde_json::from_str(&fs::read_to_string(root.join("al/flow.json")).unwrap()).unwrap();
    assert_eq!(f["shift"], serde_json::json!([4, 2]));
    assert!(root.join("al/noisy.pgm").exists() && root.join("al/manifest.json").exists());
}
