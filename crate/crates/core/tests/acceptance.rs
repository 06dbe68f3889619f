//! Acceptance suite. Each criterion is its own test and prints one
//! `criterion N PASS|FAIL ...` line, straight to stdout so it shows even when
//! the harness captures test output.
//! Criteria run one at a time so wall-time measurements are not disturbed by
//! neighbouring tests.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fgst::attention::{
    build_omega, build_psi, fgsw_msa_padded, mac_count, receptive_extent, AttentionKind, AttentionParams, Bounds,
    KeyCoord,
};
use fgst::evaluation::checks::{
    linear_fit, oracle_deviation, random_point_gradient_check, unit_window_reduction, AttentionCase, GradProbe,
};
use fgst::evaluation::{toy_model_config, ToyOutcome, ToyTask, TrainConfig};
use fgst::flow::{neighbour_frames, rescale_to_level, round_offset, FlowField, FlowSet};
use fgst::model::{FgstModel, ModelConfig};
use fgst::Tensor;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, ok: bool, detail: String) {
    let line = format!("criterion {n} {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn cases(n: usize, seed: u64) -> Vec<AttentionCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| AttentionCase::random(&mut rng).unwrap()).collect()
}

#[test]
fn criterion_01_oracle_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let cases = cases(60, 1);
    let worst = cases.iter().map(|c| oracle_deviation(c, false).unwrap()).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let bm = cases.iter().filter(|c| c.block_matching).count();
    verdict(
        1,
        worst < 1e-10 && elapsed < Duration::from_secs(30) && bm > 0 && bm < cases.len(),
        format!(
            "cases={} block_matching={bm} max_dev={worst:.3e} secs={:.2}",
            cases.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_unit_window_reduction() {
    let _g = serial();
    let cases = cases(60, 1);
    let bad = cases.iter().filter(|c| !unit_window_reduction(c).unwrap()).count();
    verdict(2, bad == 0, format!("cases={} mismatches={bad}", cases.len()));
}

#[test]
fn criterion_03_gradient_soundness() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ModelConfig {
        frames: 3,
        channels: 8,
        height: 16,
        width: 16,
        levels: 1,
        ..toy_model_config()
    };
    let model = FgstModel::new(cfg).unwrap();
    let (checks, point) = random_point_gradient_check(&model, 3, 1e-5, GradProbe::TopEntries(3), 0, 8).unwrap();
    let elapsed = start.elapsed();
    let worst = checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    let all_params = checks.len() == model.params().len();
    verdict(
        3,
        worst.rel_error < 1e-5 && all_params && elapsed < Duration::from_secs(300),
        format!(
            "tensors={} worst={} rel_err={:.3e} point={point} secs={:.1}",
            checks.len(),
            worst.name,
            worst.rel_error,
            elapsed.as_secs_f64()
        ),
    );
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> T) -> (T, f64) {
    let mut best: Option<(T, f64)> = None;
    for _ in 0..repeats {
        let start = Instant::now();
        let v = f();
        let s = start.elapsed().as_secs_f64();
        if best.as_ref().is_none_or(|(_, b)| s < *b) {
            best = Some((v, s));
        }
    }
    best.unwrap()
}

#[test]
fn criterion_04_complexity() {
    let _g = serial();
    let (side, c, r, m) = (16, 8, 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = AttentionParams::random(2, c, &mut rng).unwrap();
    let sizes = [512, 1024, 2048, 4096];
    let mut counters_match = true;
    let mut analytic = Vec::new();
    let mut secs = Vec::new();
    for &tokens in &sizes {
        let frames = tokens / (side * side);
        let video: Vec<Tensor> = (0..frames)
            .map(|_| Tensor::new(vec![c, side, side], (0..c * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect::<Result<_, _>>()
            .unwrap();
        let flows = FlowSet::uniform(frames, side, side, r, (1.0, -1.0));
        for (kind, window) in [(AttentionKind::Fgs { r }, 1), (AttentionKind::Fgsw { r, window: m }, m)] {
            let (measured, s) = timed(3, || {
                (0..frames)
                    .map(|t| fgsw_msa_padded(&video[t], &video, t, &flows, &params, window, r).unwrap().1.macs)
                    .sum::<u64>()
            });
            let want = mac_count(kind, frames, side, side, c);
            counters_match &= measured == want;
            if window == m {
                analytic.push(want);
                secs.push(s);
            }
        }
    }
    let ratios: Vec<u64> = analytic.iter().map(|&a| a / analytic[0]).collect();
    let exact = analytic.iter().zip([1, 2, 4, 8]).all(|(&a, k)| a == k * analytic[0]);
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let (_, _, r2) = linear_fit(&xs, &secs);
    verdict(
        4,
        counters_match && exact && r2 >= 0.95,
        format!("counters_match={counters_match} ratios={ratios:?} r2={r2:.4}"),
    );
}

#[test]
fn criterion_05_receptive_extent() {
    let _g = serial();
    let (a, b) = (receptive_extent(40, 3).unwrap(), receptive_extent(38, 3).unwrap());
    verdict(5, a == 83 && b == 79, format!("extent(40,3)={a} extent(38,3)={b}"));
}

#[test]
fn criterion_06_residual_identity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let configs = [
        toy_model_config(),
        ModelConfig {
            frames: 3,
            channels: 4,
            height: 16,
            width: 24,
            levels: 2,
            ..toy_model_config()
        },
        ModelConfig {
            frames: 2,
            channels: 4,
            height: 8,
            width: 8,
            recurrent: false,
            ..toy_model_config()
        },
    ];
    let mut all = true;
    for cfg in configs.clone() {
        let shape = vec![cfg.frames, 3, cfg.height, cfg.width];
        let n = shape.iter().product();
        // values outside [0, 1] too: the identity must not depend on the range
        let video = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect()).unwrap();
        let model = FgstModel::zeros(cfg).unwrap();
        all &= model.infer(&video).unwrap().bit_eq(&video);
    }
    verdict(6, all, format!("configs={} bitwise_identity={all}", configs.len()));
}

/// The default toy run and its wall time, shared by criteria 7 and 8.
fn toy_outcome() -> &'static (ToyOutcome, Duration) {
    static OUTCOME: OnceLock<(ToyOutcome, Duration)> = OnceLock::new();
    OUTCOME.get_or_init(|| {
        let start = Instant::now();
        let outcome = ToyTask::default().run().unwrap();
        (outcome, start.elapsed())
    })
}

#[test]
fn criterion_07_toy_training() {
    let _g = serial();
    let (outcome, elapsed) = toy_outcome();
    let gain = outcome.mean_gain();
    let first = outcome.log.entries.first().unwrap().loss;
    let last = outcome.log.entries.last().unwrap().loss;
    verdict(
        7,
        gain >= 1.0 && *elapsed < Duration::from_secs(15 * 60),
        format!(
            "iterations={} gain_db={gain:.4} first_loss={first:.5} last_loss={last:.5} secs={:.0}",
            outcome.log.entries.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_ablation_direction() {
    let _g = serial();
    let full = &toy_outcome().0;
    let task = ToyTask::default();
    let ablated = ToyTask {
        model: ModelConfig {
            window: 1,
            recurrent: false,
            ..task.model.clone()
        },
        ..task
    }
    .run()
    .unwrap();
    verdict(
        8,
        full.heldout_l1 <= ablated.heldout_l1,
        format!("full_l1={:.6e} ablated_l1={:.6e}", full.heldout_l1, ablated.heldout_l1),
    );
}

fn flows_with(h: usize, w: usize, pairs: &[((usize, usize), (f64, f64))]) -> FlowSet {
    let mut set = FlowSet::new(0);
    for &((t, f), (dx, dy)) in pairs {
        set.insert(FlowField::constant(h, w, dx, dy).with_pair(t, f)).unwrap();
    }
    set
}

#[test]
fn criterion_09_hand_examples() {
    let _g = serial();
    let b = Bounds::new(3, 8, 8);
    let mut failures = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    expect("round (0,0)", round_offset((0.0, 0.0)).unwrap() == (0, 0));
    expect("round (2.4,-1.6)", round_offset((2.4, -1.6)).unwrap() == (2, -2));
    expect("round half away", round_offset((0.5, -0.5)).unwrap() == (1, -1));
    expect("round (2.5,-2.5)", round_offset((2.5, -2.5)).unwrap() == (3, -3));
    expect("round NaN", round_offset((f64::NAN, 0.0)).is_err());

    let r1 = rescale_to_level(&FlowField::constant(8, 8, 4.0, -2.0), 1).unwrap();
    expect("rescale shape", (r1.height(), r1.width()) == (4, 4));
    expect("rescale (4,-2)", (0..4).all(|i| (0..4).all(|j| r1.at(i, j) == (2.0, -1.0))));

    expect("neighbours t=0", neighbour_frames(0, 1, 3) == vec![0, 0, 1]);
    expect("neighbours t=2", neighbour_frames(2, 1, 3) == vec![1, 2, 2]);

    let flows = flows_with(8, 8, &[((1, 2), (2.0, -1.0)), ((1, 0), (-2.0, 1.0))]);
    let omega = build_omega((4, 4), 1, &flows, 1, b).unwrap();
    expect("omega (4,4)", omega.triples() == vec![(0, 2, 5), (1, 4, 4), (2, 6, 3)]);
    let psi1 = build_psi((4, 4), 1, 1, &flows, 1, b).unwrap();
    expect("psi M=1 is omega", psi1.coords() == omega.coords());

    let clamped = flows_with(8, 8, &[((1, 2), (2.4, -1.6)), ((1, 0), (40.0, -9.0))]);
    let omega = build_omega((4, 4), 1, &clamped, 1, b).unwrap();
    expect("omega rounds and clamps", omega.triples() == vec![(0, 7, 0), (1, 4, 4), (2, 6, 2)]);

    let edge = flows_with(8, 8, &[((0, 1), (1.0, 0.0))]);
    let omega = build_omega((4, 4), 0, &edge, 1, b).unwrap();
    expect("omega temporal clamp", omega.triples() == vec![(0, 4, 4), (1, 5, 4)]);

    let shifted = flows_with(8, 8, &[((1, 2), (1.0, 0.0)), ((1, 0), (-1.0, 0.0))]);
    let psi = build_psi((4, 4), 1, 3, &shifted, 1, b).unwrap();
    expect("psi 27 keys", psi.len() == 27);
    expect("psi contains", psi.contains(&KeyCoord::new(0, 2, 3)) && psi.contains(&KeyCoord::new(2, 6, 5)));
    expect("psi excludes", !psi.contains(&KeyCoord::new(0, 5, 4)));

    expect("macs global", mac_count(AttentionKind::Global, 2, 4, 4, 8) == 24576);
    expect("macs fgs", mac_count(AttentionKind::Fgs { r: 1 }, 2, 4, 4, 8) == 17920);
    expect("macs fgsw", mac_count(AttentionKind::Fgsw { r: 1, window: 3 }, 2, 4, 4, 8) == 30208);

    verdict(9, failures.is_empty(), format!("failures={failures:?}"));
}

fn short_task() -> ToyTask {
    let task = ToyTask::default();
    ToyTask {
        model: ModelConfig {
            frames: 3,
            height: 16,
            width: 16,
            ..task.model.clone()
        },
        train_sequences: 4,
        heldout_sequences: 2,
        train: TrainConfig {
            iterations: 6,
            batch: 2,
            ..task.train.clone()
        },
        ..task
    }
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let outcome = short_task().run().unwrap();
    outcome.model.save(dir.join("checkpoint")).unwrap();
    let mut eval = String::new();
    for (r, b) in &outcome.reports {
        eval.push_str(&r.to_text());
        eval.push_str(&b.to_text());
    }
    fs::write(dir.join("train.log"), outcome.log.to_text()).unwrap();
    fs::write(dir.join("eval.txt"), eval).unwrap();
    let mut files: Vec<_> = fs::read_dir(dir.join("checkpoint"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .chain([dir.join("train.log"), dir.join("eval.txt")])
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let a = artifacts(&dir.path().join("a"));
    let b = artifacts(&dir.path().join("b"));
    let same = a == b;
    verdict(10, same && a.len() > 3, format!("files={} byte_identical={same}", a.len()));
}
