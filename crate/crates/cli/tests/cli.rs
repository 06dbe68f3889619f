use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fgst::model::{FgstModel, ModelConfig};
use fgst::numerics::io;
use fgst::Tensor;

fn fgst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgst")).args(args).output().expect("spawning fgst")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

// small enough for the gradient check to finish quickly
const SMALL: &[&str] = &[
    "--set",
    "check_cases=12",
    "--set",
    "channels=4",
    "--set",
    "grad_size=8",
    "--set",
    "grad_frames=2",
    "--set",
    "io_res_blocks=1",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: &[String]) -> Output {
    fgst(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn check_passes_and_reports_every_check() {
    let o = run(&with(&["check"], SMALL));
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for name in ["oracle", "reduction", "gradient", "identity", "extent"] {
        assert!(text.contains(&format!("check {name} pass")), "{text}");
    }
    assert!(text.contains("summary pass=5 fail=0"));
}

#[test]
fn injected_fault_fails_the_check() {
    let o = run(&with(&["check"], &[SMALL, &["--set", "fault=drop_key"]].concat()));
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).contains("check oracle fail"));
}

#[test]
fn usage_and_validation_errors() {
    assert_eq!(code(&fgst(&["check", "--config", "/nonexistent/run.cfg"])), 2);
    assert_eq!(code(&fgst(&["check", "--set", "no_such_key=1"])), 2);
    assert_eq!(code(&fgst(&["check", "--set", "window=abc"])), 2);
    assert_eq!(code(&fgst(&["check", "--set", "window=2"])), 3);
    assert_eq!(code(&fgst(&["frobnicate"])), 2);
    assert_eq!(code(&fgst(&["--help"])), 0);
    assert_eq!(code(&fgst(&["deblur"])), 2);
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# sweep\nbench_tokens = 512\nbench_repeats = 1\n").unwrap();
    let o = fgst(&["bench", "--config", cfg.to_str().unwrap(), "--set", "bench_side=8"]);
    assert_eq!(code(&o), 0);
    let rows: Vec<_> = stdout(&o).lines().filter(|l| l.starts_with("fgs ")).map(String::from).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("fgs 512 "));
}

#[test]
fn empty_bench_sweep_prints_only_the_header() {
    let o = fgst(&["bench", "--set", "bench_tokens=none"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1, "{text}");
    assert!(text.starts_with("kind tokens analytic_macs measured_macs time_ms"));
}

#[test]
fn sparse_cost_doubles_with_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let o = fgst(&[
        "bench",
        "--set",
        "bench_tokens=512,1024,2048",
        "--set",
        "bench_repeats=1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let table = fs::read_to_string(dir.path().join("bench.txt")).unwrap();
    for kind in ["fgs", "fgsw"] {
        let macs: Vec<u64> = table
            .lines()
            .filter(|l| l.starts_with(&format!("{kind} ")))
            .map(|l| {
                let f: Vec<&str> = l.split_whitespace().collect();
                assert_eq!(f[2], f[3], "analytic and measured differ: {l}");
                f[2].parse().unwrap()
            })
            .collect();
        assert_eq!(macs.len(), 3);
        assert_eq!((macs[1], macs[2]), (2 * macs[0], 4 * macs[0]), "{kind}");
    }
    let global: Vec<u64> = table
        .lines()
        .filter(|l| l.starts_with("global "))
        .map(|l| l.split_whitespace().nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(global[1] > 3 * global[0]);
}

fn zero_checkpoint(dir: &Path, cfg: &ModelConfig) {
    FgstModel::zeros(cfg.clone()).unwrap().save(dir).unwrap();
}

fn ramp_video(t: usize, h: usize, w: usize) -> Tensor {
    let n = t * 3 * h * w;
    Tensor::new(vec![t, 3, h, w], (0..n).map(|i| ((i * 7) % 256) as f64 / 255.0).collect()).unwrap()
}

#[test]
fn zero_checkpoint_deblur_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        frames: 3,
        channels: 4,
        height: 16,
        width: 16,
        levels: 1,
        fgabs_per_stage: 1,
        io_res_blocks: 1,
        ..ModelConfig::default()
    };
    let ckpt = dir.path().join("ckpt");
    zero_checkpoint(&ckpt, &cfg);
    let video = ramp_video(3, 16, 16);

    let input = dir.path().join("in.fgt");
    io::save(&input, &video).unwrap();
    let out = dir.path().join("out");
    let o = fgst(&[
        "deblur",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--target",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(out.join("restored.fgt")).unwrap(), fs::read(&input).unwrap());
    // identity restores the target exactly: capped PSNR, unit SSIM
    assert!(fs::read_to_string(out.join("metrics.txt")).unwrap().contains("mean 100.000000 1.000000"));

    // the same video as a directory of PPM frames
    let frames = dir.path().join("frames");
    fs::create_dir(&frames).unwrap();
    for t in 0..3 {
        let f = video.slice_outer(t).unwrap();
        let (_, h, w) = f.dims3().unwrap();
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        for p in 0..h * w {
            for c in 0..3 {
                bytes.push((f.data()[c * h * w + p] * 255.0).round() as u8);
            }
        }
        fs::write(frames.join(format!("f{t}.ppm")), bytes).unwrap();
    }
    let out2 = dir.path().join("out2");
    let o = fgst(&[
        "deblur",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        frames.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for t in 0..3 {
        assert_eq!(
            fs::read(out2.join("restored").join(format!("frame_{t:04}.ppm"))).unwrap(),
            fs::read(frames.join(format!("f{t}.ppm"))).unwrap()
        );
    }
}

#[test]
fn deblur_rejects_mismatched_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        frames: 3,
        channels: 4,
        height: 16,
        width: 16,
        levels: 1,
        fgabs_per_stage: 1,
        io_res_blocks: 1,
        ..ModelConfig::default()
    };
    let ckpt = dir.path().join("ckpt");
    zero_checkpoint(&ckpt, &cfg);
    let input = dir.path().join("in.fgt");
    io::save(&input, &ramp_video(3, 16, 16)).unwrap();
    let target = dir.path().join("target.fgt");
    io::save(&target, &ramp_video(3, 8, 8)).unwrap();
    let out = dir.path().join("out");
    let args = |t: &Path| {
        fgst(&[
            "deblur",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--target",
            t.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
    };
    assert_eq!(code(&args(&target)), 3);
    assert_eq!(code(&args(&dir.path().join("missing.fgt"))), 2);
    // a checkpoint directory without a manifest
    let o = fgst(&[
        "deblur",
        "--checkpoint",
        dir.path().to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unit_window_dump_has_one_record_per_pixel() {
    let o = fgst(&["dump-attention", "--set", "window=1", "--set", "radius=2", "--frame", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let records: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(records.len(), 32 * 32);
    for r in records {
        let parts: Vec<&str> = r.split('|').collect();
        assert_eq!(parts.len(), 3, "{r}");
        assert!(parts[0].trim().starts_with("2 "));
        let keys = parts[1].split_whitespace().count();
        let weights = parts[2].split_whitespace().count();
        assert!((1..=5).contains(&keys), "{r}");
        assert_eq!(keys, weights);
        let sum: f64 = parts[2].split_whitespace().map(|w| w.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

fn short_train(out: &Path) -> Output {
    fgst(&[
        "train",
        "--set",
        "iterations=3",
        "--set",
        "train_sequences=2",
        "--set",
        "heldout_sequences=1",
        "--set",
        "batch=2",
        "--set",
        "channels=4",
        "--set",
        "frames=3",
        "--set",
        "height=16",
        "--set",
        "width=16",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn training_artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = short_train(&a);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(code(&short_train(&b)), 0);
    assert!(stdout(&oa).starts_with("train iterations=3 "));
    let mut files = vec![
        "run.cfg".to_string(),
        "train.log".into(),
        "eval.txt".into(),
        "heldout/blurry.fgt".into(),
        "heldout/sharp.fgt".into(),
    ];
    for entry in fs::read_dir(a.join("checkpoint")).unwrap() {
        files.push(format!("checkpoint/{}", entry.unwrap().file_name().to_string_lossy()));
    }
    assert!(files.len() > 8);
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    // the trained checkpoint restores its own held-out sequence
    let out = dir.path().join("restored");
    let o = fgst(&[
        "deblur",
        "--checkpoint",
        a.join("checkpoint").to_str().unwrap(),
        "--input",
        a.join("heldout/blurry.fgt").to_str().unwrap(),
        "--target",
        a.join("heldout/sharp.fgt").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("restored.fgt").is_file());
}

#[test]
fn train_requires_an_output_directory() {
    assert_eq!(code(&fgst(&["train", "--set", "iterations=1"])), 2);
}
