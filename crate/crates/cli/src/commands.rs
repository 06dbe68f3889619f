use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fgst::attention::{
    fgsw_msa_padded, global_msa, mac_count, receptive_extent, window_records, AttentionKind, AttentionParams,
};
use fgst::blocks::{conv, eval_block, residual_stack};
use fgst::evaluation::checks::{
    linear_fit, oracle_deviation, random_point_gradient_check, unit_window_reduction, AttentionCase, GradProbe,
};
use fgst::evaluation::{generate_sequence, EvalReport, SyntheticConfig};
use fgst::flow::FlowSet;
use fgst::model::{FgstModel, ModelConfig};
use fgst::numerics::{io, layer_norm, LN_EPS};
use fgst::Tensor;

use crate::config::{Fault, RunConfig};
use crate::error::CliError;
use crate::frames::{read_video, write_video};

fn emit(out: &mut impl Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(CliError::io("writing output"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))
}

fn require_out(out: Option<&Path>, command: &str) -> Result<PathBuf, CliError> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| CliError::Usage(format!("{command} needs --out DIR")))
}

fn synthetic_for(cfg: &RunConfig, model: &ModelConfig) -> SyntheticConfig {
    SyntheticConfig {
        frames: model.frames,
        height: model.height,
        width: model.width,
        ..cfg.data.clone()
    }
}

/// Evaluation points tried before the gradient check settles for one where
/// some step crosses a kink.
const GRAD_ATTEMPTS: usize = 8;

/// Runs the self-checks, printing one `check NAME pass|fail key=value...`
/// line each, then a summary line.
pub fn check(cfg: &RunConfig, out: &mut impl Write) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cases = (0..cfg.check_cases)
        .map(|_| AttentionCase::random(&mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let mut failed = Vec::new();
    let mut report = |out: &mut dyn FnMut(&str) -> Result<(), CliError>, name: &str, ok: bool, detail: String| {
        if !ok {
            failed.push(name.to_string());
        }
        out(&format!("check {name} {} {detail}", if ok { "pass" } else { "fail" }))
    };
    let mut say = |line: &str| emit(out, line);

    let mut worst = 0.0f64;
    for case in &cases {
        worst = worst.max(oracle_deviation(case, cfg.fault == Fault::DropKey)?);
    }
    report(
        &mut say,
        "oracle",
        worst < cfg.oracle_tol,
        format!("cases={} max_dev={worst:.3e} tol={:e}", cases.len(), cfg.oracle_tol),
    )?;

    let mut mismatches = 0;
    for case in &cases {
        if !unit_window_reduction(case)? {
            mismatches += 1;
        }
    }
    report(&mut say, "reduction", mismatches == 0, format!("cases={} mismatches={mismatches}", cases.len()))?;

    let gcfg = ModelConfig {
        frames: cfg.grad_frames,
        height: cfg.grad_size,
        width: cfg.grad_size,
        ..cfg.model.clone()
    };
    gcfg.validate().map_err(|e| CliError::Validation(format!("gradient check model: {e}")))?;
    let model = FgstModel::new(gcfg.clone())?;
    let probe = match cfg.grad_entries {
        0 => GradProbe::SignDirection,
        k => GradProbe::TopEntries(k),
    };
    let (grads, attempt) =
        random_point_gradient_check(&model, gcfg.frames, cfg.grad_step, probe, cfg.seed, GRAD_ATTEMPTS)?;
    let worst_grad = grads.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    let skipped: usize = grads.iter().map(|g| g.skipped).sum();
    report(
        &mut say,
        "gradient",
        worst_grad < cfg.grad_tol,
        format!(
            "tensors={} max_rel_err={worst_grad:.3e} tol={:e} kink_skipped={skipped} point={attempt}",
            grads.len(),
            cfg.grad_tol
        ),
    )?;
    for g in grads.iter().filter(|g| g.rel_error >= cfg.grad_tol) {
        say(&format!(
            "  {} analytic={:e} numeric={:e} rel_err={:.3e}",
            g.name, g.analytic, g.numeric, g.rel_error
        ))?;
    }

    let zero = FgstModel::zeros(gcfg.clone())?;
    let n = gcfg.frames * 3 * gcfg.height * gcfg.width;
    let video = Tensor::new(
        vec![gcfg.frames, 3, gcfg.height, gcfg.width],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )?;
    let flows = zero.estimate_flows(&video)?;
    let identity = zero.forward(&video, &flows)? == video;
    report(&mut say, "identity", identity, "zero_model_output_equals_input".into())?;

    let (a, b) = (receptive_extent(40, 3)?, receptive_extent(38, 3)?);
    report(&mut say, "extent", a == 83 && b == 79, format!("extent_40_3={a} extent_38_3={b}"))?;

    let total = 5;
    say(&format!("summary pass={} fail={}", total - failed.len(), failed.len()))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

struct BenchRow {
    kind: &'static str,
    tokens: usize,
    analytic: u64,
    measured: u64,
    millis: f64,
}

fn time_min<T>(repeats: usize, mut f: impl FnMut() -> Result<T, CliError>) -> Result<(T, f64), CliError> {
    let mut best: Option<(T, f64)> = None;
    for _ in 0..repeats {
        let start = Instant::now();
        let v = f()?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if best.as_ref().is_none_or(|(_, b)| ms < *b) {
            best = Some((v, ms));
        }
    }
    Ok(best.expect("at least one repeat"))
}

/// Analytic and instrumented attention cost over a sweep of token counts, with
/// wall time (minimum over repeats) in the `time_ms` column and the `fit`
/// lines; every other field is deterministic.
pub fn bench(cfg: &RunConfig, out: &mut impl Write) -> Result<String, CliError> {
    let (side, c, r, m) = (cfg.bench_side, cfg.model.channels, cfg.model.radius, cfg.model.window);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = AttentionParams::random(cfg.model.heads, c, &mut rng)?;
    let mut rows = Vec::new();
    for &tokens in &cfg.bench_tokens {
        let frames = tokens / (side * side);
        let video: Vec<Tensor> = (0..frames)
            .map(|_| Tensor::new(vec![c, side, side], (0..c * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect::<Result<_, _>>()?;
        let flows = FlowSet::uniform(frames, side, side, r, (1.0, -1.0));
        for (kind, name) in [
            (AttentionKind::Global, "global"),
            (AttentionKind::Fgs { r }, "fgs"),
            (AttentionKind::Fgsw { r, window: m }, "fgsw"),
        ] {
            let window = if name == "fgs" { 1 } else { m };
            let (measured, millis) = time_min(cfg.bench_repeats, || {
                if name == "global" {
                    return Ok(global_msa(&video, &params)?.1.macs);
                }
                let mut macs = 0;
                for t in 0..frames {
                    macs += fgsw_msa_padded(&video[t], &video, t, &flows, &params, window, r)?.1.macs;
                }
                Ok(macs)
            })?;
            rows.push(BenchRow {
                kind: name,
                tokens,
                analytic: mac_count(kind, frames, side, side, c),
                measured,
                millis,
            });
        }
    }
    let mut text = String::from("kind tokens analytic_macs measured_macs time_ms\n");
    for row in &rows {
        let _ = writeln!(
            text,
            "{} {} {} {} {:.3}",
            row.kind, row.tokens, row.analytic, row.measured, row.millis
        );
    }
    if cfg.bench_tokens.len() >= 2 {
        for name in ["fgs", "fgsw"] {
            let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.kind == name).collect();
            let xs: Vec<f64> = sel.iter().map(|r| r.tokens as f64).collect();
            let ts: Vec<f64> = sel.iter().map(|r| r.millis).collect();
            let per_token = sel[0].analytic as f64 / sel[0].tokens as f64;
            let exact = sel.iter().all(|r| r.analytic as f64 == per_token * r.tokens as f64);
            let (slope, _, r2) = linear_fit(&xs, &ts);
            let _ = writeln!(text, "linear {name} macs_per_token={per_token} exact={exact}");
            let _ = writeln!(text, "fit {name} time_ms_per_token={slope:.6e} r2={r2:.4}");
        }
        let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.kind == "global").collect();
        let xs: Vec<f64> = sel.iter().map(|r| (r.tokens as f64).powi(2)).collect();
        let ts: Vec<f64> = sel.iter().map(|r| r.millis).collect();
        let last = sel.last().expect("non-empty sweep");
        let n = last.tokens as u64;
        let share = (2 * n * n * c as u64) as f64 / last.analytic as f64;
        let (slope, _, r2) = linear_fit(&xs, &ts);
        let _ = writeln!(text, "quadratic global tokens={n} quadratic_share={share:.4}");
        let _ = writeln!(text, "fit global time_ms_per_token2={slope:.6e} r2={r2:.4}");
    }
    out.write_all(text.as_bytes()).map_err(CliError::io("writing output"))?;
    Ok(text)
}

/// Trains on generated data and writes the checkpoint, log, held-out scores
/// and the first held-out sequence.
pub fn train(cfg: &RunConfig, dir: Option<&Path>, out: &mut impl Write) -> Result<(), CliError> {
    let dir = require_out(dir, "train")?;
    create_dir(&dir)?;
    let outcome = cfg.toy_task().run()?;
    outcome.model.save(dir.join("checkpoint"))?;
    write_file(&dir.join("run.cfg"), &cfg.to_text())?;
    write_file(&dir.join("train.log"), &outcome.log.to_text())?;
    let mut eval = String::new();
    for (i, (restored, blurry)) in outcome.reports.iter().enumerate() {
        let _ = write!(eval, "sequence {i} restored\n{}sequence {i} blurry\n{}", restored.to_text(), blurry.to_text());
    }
    write_file(&dir.join("eval.txt"), &eval)?;
    let held = dir.join("heldout");
    create_dir(&held)?;
    io::save(held.join("blurry.fgt"), &outcome.heldout[0].input)?;
    io::save(held.join("sharp.fgt"), &outcome.heldout[0].target)?;

    let n = outcome.reports.len() as f64;
    let restored = outcome.reports.iter().map(|(r, _)| r.mean_psnr()).sum::<f64>() / n;
    let blurry = outcome.reports.iter().map(|(_, b)| b.mean_psnr()).sum::<f64>() / n;
    let final_loss = outcome.log.entries.last().map_or(f64::NAN, |e| e.loss);
    emit(
        out,
        &format!(
            "train iterations={} final_loss={final_loss:.6e} heldout_l1={:.6e} heldout_psnr={restored:.4} blurry_psnr={blurry:.4} gain_db={:.4}",
            outcome.log.entries.len(),
            outcome.heldout_l1,
            outcome.mean_gain()
        ),
    )
}

fn load_checkpoint(path: Option<&Path>) -> Result<FgstModel, CliError> {
    let path = path.ok_or_else(|| CliError::Usage("no checkpoint given".into()))?;
    if !path.join("manifest.txt").is_file() {
        return Err(CliError::Usage(format!("{} is not a checkpoint directory", path.display())));
    }
    Ok(FgstModel::load(path)?)
}

/// Restores a video with a checkpoint; with a target, also scores the input
/// and the restoration.
pub fn deblur(cfg: &RunConfig, dir: Option<&Path>, out: &mut impl Write) -> Result<(), CliError> {
    let dir = require_out(dir, "deblur")?;
    let input = cfg.input.as_deref().ok_or_else(|| CliError::Usage("deblur needs an input".into()))?;
    let model = load_checkpoint(cfg.checkpoint.as_deref())?;
    let (video, format) = read_video(input)?;
    let target = cfg.target.as_deref().map(read_video).transpose()?;
    let (_, _, h, w) = video.dims4()?;
    model
        .config()
        .check_extents(h, w)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some((t, _)) = &target {
        if t.shape() != video.shape() {
            return Err(CliError::Validation(format!(
                "target shape {:?} differs from input {:?}",
                t.shape(),
                video.shape()
            )));
        }
    }
    create_dir(&dir)?;
    let restored = model.infer(&video)?;
    let written = write_video(&dir, "restored", &restored, format)?;
    emit(out, &format!("deblur frames={} written={}", video.shape()[0], written.display()))?;
    if let Some((t, _)) = target {
        let (r, b) = (EvalReport::compute(&restored, &t)?, EvalReport::compute(&video, &t)?);
        write_file(&dir.join("metrics.txt"), &format!("restored\n{}input\n{}", r.to_text(), b.to_text()))?;
        emit(
            out,
            &format!(
                "metrics psnr={:.4} ssim={:.4} input_psnr={:.4} input_ssim={:.4}",
                r.mean_psnr(),
                r.mean_ssim(),
                b.mean_psnr(),
                b.mean_ssim()
            ),
        )?;
    }
    Ok(())
}

/// Keys and weights of every window of the first attention block, evaluated on
/// the normalised stem features of one frame. Without a checkpoint a freshly
/// initialised model is used; without an input a synthetic sequence.
pub fn dump_attention(cfg: &RunConfig, dir: Option<&Path>, out: &mut impl Write) -> Result<(), CliError> {
    let model = match cfg.checkpoint.as_deref() {
        Some(p) => load_checkpoint(Some(p))?,
        None => FgstModel::new(cfg.model.clone())?,
    };
    let mc = model.config().clone();
    let video = match cfg.input.as_deref() {
        Some(p) => read_video(p)?.0,
        None => generate_sequence(cfg.seed, &synthetic_for(cfg, &mc))?.blurry,
    };
    let (frames, _, h, w) = video.dims4()?;
    mc.check_extents(h, w).map_err(|e| CliError::Validation(e.to_string()))?;
    if cfg.dump_frame >= frames {
        return Err(CliError::Validation(format!(
            "dump_frame {} outside a {frames}-frame video",
            cfg.dump_frame
        )));
    }
    let store = model.params();
    let block = if mc.levels > 0 { "enc0.fgab0" } else { "mid.fgab0" };
    let get = |suffix: &str| store.get(&format!("{block}.{suffix}")).cloned();
    let params = AttentionParams::new(
        mc.heads,
        mc.channels,
        get("attn.u")?,
        get("attn.v")?,
        get("attn.value")?,
        get("attn.out")?,
    )?;
    let (gain, bias) = (get("ln.gain")?, get("ln.bias")?);
    let features: Vec<Tensor> = (0..frames)
        .map(|t| {
            let stem = eval_block(store, &video.slice_outer(t)?, |g, p, x| {
                let a = conv(g, p, "in.conv", x, 1, 1)?;
                residual_stack(g, p, "in.res", mc.io_res_blocks, a)
            })?;
            layer_norm(&stem, &gain, &bias, LN_EPS)
        })
        .collect::<Result<_, _>>()?;
    let flows = model.estimate_flows(&video)?;
    let records = window_records(&features, cfg.dump_frame, flows.level(0)?, &params, mc.window, mc.radius)?;
    let mut text = String::new();
    for r in &records {
        let _ = writeln!(text, "{r}");
    }
    match dir {
        Some(d) => {
            create_dir(d)?;
            let path = d.join("attention.txt");
            write_file(&path, &text)?;
            emit(out, &format!("dump-attention windows={} written={}", records.len(), path.display()))
        }
        None => out.write_all(text.as_bytes()).map_err(CliError::io("writing output")),
    }
}
