use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{psnr, ssim};
use super::optim::{adam_step, AdamState, LrSchedule};
use super::synthetic::SyntheticSequence;
use crate::error::{arg_err, FgstError, Result};
use crate::flow::FlowPyramid;
use crate::model::FgstModel;
use crate::numerics::{Graph, Tensor, Var};

/// A blurry input, its sharp target, and the flows estimated on the input.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub input: Tensor,
    pub target: Tensor,
    pub flows: FlowPyramid,
}

impl TrainSample {
    pub fn from_sequence(model: &FgstModel, seq: &SyntheticSequence) -> Result<Self> {
        Ok(Self {
            input: seq.blurry.clone(),
            target: seq.sharp.clone(),
            flows: model.estimate_flows(&seq.blurry)?,
        })
    }
}

pub fn prepare(model: &FgstModel, seqs: &[SyntheticSequence]) -> Result<Vec<TrainSample>> {
    seqs.par_iter().map(|s| TrainSample::from_sequence(model, s)).collect()
}

fn record_loss(g: &mut Graph, model: &FgstModel, sample: &TrainSample, p: &crate::numerics::Bound) -> Result<Var> {
    let out = model.build(g, p, &sample.input, &sample.flows)?;
    let frames = out.len();
    let mut total: Option<Var> = None;
    for (t, &y) in out.iter().enumerate() {
        let target = g.constant(sample.target.slice_outer(t)?);
        let l = g.l1_loss(y, target)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| FgstError::InvalidArgument("empty sequence".into()))?;
    g.scale(total, 1.0 / frames as f64)
}

/// Mean per-frame L1 loss of the restored sequence.
pub fn sequence_loss(model: &FgstModel, sample: &TrainSample) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind_constant(&mut g);
    let l = record_loss(&mut g, model, sample, &p)?;
    g.value(l).item()
}

/// Loss and gradients keyed by parameter name.
pub fn loss_and_grads(model: &FgstModel, sample: &TrainSample) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let l = record_loss(&mut g, model, sample, &p)?;
    let grads = g.backward(l)?;
    Ok((g.value(l).item()?, p.collect_grads(&g, &grads)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub schedule: LrSchedule,
    /// Sequences per iteration.
    pub batch: usize,
    /// Seeds the order in which sequences are visited.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    /// One `iter loss lr` line per iteration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{} {:.17e} {:.17e}", e.iteration, e.loss, e.lr);
        }
        s
    }
}

/// Adam on mean L1 loss over mini-batches drawn without replacement from a
/// seeded shuffle of `data`. Per-sequence work runs in parallel; gradients are
/// summed in batch order so the result does not depend on scheduling.
pub fn train_toy(model: &mut FgstModel, data: &[TrainSample], cfg: &TrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return arg_err("empty training set");
    }
    if cfg.batch == 0 {
        return arg_err("batch size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut state = AdamState::new(model.params());
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let shared: &FgstModel = model;
        let results: Vec<(f64, BTreeMap<String, Vec<f64>>)> = batch
            .par_iter()
            .map(|&i| loss_and_grads(shared, &data[i]))
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(FgstError::Diverged { iteration: it, loss });
        }
        let mut grads = results[0].1.clone();
        for (_, g) in &results[1..] {
            for (name, acc) in grads.iter_mut() {
                acc.iter_mut().zip(&g[name]).for_each(|(a, b)| *a += b);
            }
        }
        grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v /= n));
        let lr = cfg.schedule.at(it);
        adam_step(model.params_mut(), &grads, &mut state, lr)?;
        log.entries.push(LogEntry {
            iteration: it,
            loss,
            lr,
        });
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScore {
    pub t: usize,
    pub psnr: f64,
    pub ssim: f64,
}

fn score(pred: &Tensor, gt: &Tensor) -> Result<Vec<FrameScore>> {
    let (frames, _, _, _) = gt.dims4()?;
    (0..frames)
        .map(|t| {
            let (p, g) = (pred.slice_outer(t)?, gt.slice_outer(t)?);
            Ok(FrameScore {
                t,
                psnr: psnr(&p, &g, 1.0)?.db,
                ssim: ssim(&p, &g)?,
            })
        })
        .collect()
}

/// Per-frame quality of a restoration against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
}

impl EvalReport {
    pub fn compute(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        Ok(Self {
            frames: score(pred, gt)?,
        })
    }

    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.frames.iter().map(|f| f.ssim).sum::<f64>() / self.frames.len() as f64
    }

    /// `t psnr ssim` per frame, then `mean psnr ssim`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in &self.frames {
            let _ = writeln!(s, "{} {:.6} {:.6}", f.t, f.psnr, f.ssim);
        }
        let _ = writeln!(s, "mean {:.6} {:.6}", self.mean_psnr(), self.mean_ssim());
        s
    }
}

/// Restored and blurry-baseline reports for one held-out sample.
pub fn evaluate(model: &FgstModel, sample: &TrainSample) -> Result<(EvalReport, EvalReport)> {
    let restored = model.forward(&sample.input, &sample.flows)?;
    Ok((
        EvalReport::compute(&restored, &sample.target)?,
        EvalReport::compute(&sample.input, &sample.target)?,
    ))
}
