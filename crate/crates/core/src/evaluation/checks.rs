//! Self-checks shared by the command-line `check` command and the test suites.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::oracle::{fgsw_mask, masked_dense_attention};
use crate::attention::{build_omega, fgs_msa, fgsw_msa, AttentionParams, Bounds};
use crate::error::Result;
use crate::flow::{BlockMatching, FlowPyramid, FlowSet};
use crate::model::FgstModel;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// A random attention problem.
#[derive(Clone, Debug)]
pub struct AttentionCase {
    pub frames: Vec<Tensor>,
    pub flows: FlowSet,
    pub params: AttentionParams,
    pub window: usize,
    pub radius: usize,
    pub block_matching: bool,
}

impl AttentionCase {
    /// T <= 3, H, W <= 8, C in {4, 8}, N in {1, 2}, M in {1, 3}, r in {0, 1};
    /// flows are random reals or block-matching estimates.
    pub fn random(rng: &mut impl Rng) -> Result<Self> {
        let t = rng.gen_range(1..=3);
        let (h, w) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let c = if rng.gen_bool(0.5) { 4 } else { 8 };
        let heads = rng.gen_range(1..=2);
        let window = if rng.gen_bool(0.5) { 1 } else { 3 };
        let radius = rng.gen_range(0..=1);
        let frames: Vec<Tensor> = (0..t)
            .map(|_| Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect::<Result<_>>()?;
        let block_matching = rng.gen_bool(0.5);
        let flows = if block_matching {
            let video = Tensor::stack(&frames)?;
            FlowPyramid::estimate(&video, &BlockMatching::new(2, 2), radius, 0)?.level(0)?.clone()
        } else {
            let mut set = FlowSet::new(0);
            for (a, b) in crate::flow::required_pairs(t, radius) {
                let data = if a == b {
                    vec![0.0; 2 * h * w]
                } else {
                    (0..2 * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect()
                };
                set.insert(crate::flow::FlowField::new(a, b, 0, Tensor::new(vec![2, h, w], data)?)?)?;
            }
            set
        };
        let params = AttentionParams::random(heads, c, rng)?;
        Ok(Self {
            frames,
            flows,
            params,
            window,
            radius,
            block_matching,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames[0].shape();
        (self.frames.len(), s[0], s[1], s[2])
    }
}

/// Largest deviation between the sparse kernel and the masked dense
/// reference over every reference frame. `drop_key` removes one key from the
/// reference mask of pixel 0 (fault injection).
pub fn oracle_deviation(case: &AttentionCase, drop_key: bool) -> Result<f64> {
    let (t_len, _, h, w) = case.dims();
    let mut worst = 0.0f64;
    for t in 0..t_len {
        let mut mask = fgsw_mask(t, t_len, h, w, &case.flows, case.radius, case.window)?;
        if drop_key {
            let first: Option<usize> = mask[0].iter().next().copied();
            if let Some(k) = first {
                if mask[0].len() > 1 {
                    mask[0].remove(&k);
                } else {
                    // a single key cannot be dropped; move it instead
                    mask[0] = BTreeSet::from([(k + 1) % (t_len * h * w)]);
                }
            }
        }
        let want = masked_dense_attention(&case.frames[t], &case.frames, &case.params, &mask)?;
        let got = fgsw_msa(&case.frames, t, &case.flows, &case.params, case.window, case.radius)?;
        worst = worst.max(got.max_abs_diff(&want)?);
    }
    Ok(worst)
}

/// Whether the windowed kernel at `M = 1` equals the per-query kernel bit for
/// bit at every pixel of every frame.
pub fn unit_window_reduction(case: &AttentionCase) -> Result<bool> {
    let (t_len, c, h, w) = case.dims();
    let bounds = Bounds::new(t_len, h, w);
    for t in 0..t_len {
        let out = fgsw_msa(&case.frames, t, &case.flows, &case.params, 1, case.radius)?;
        for i in 0..h {
            for j in 0..w {
                let keys = build_omega((i, j), t, &case.flows, case.radius, bounds)?;
                let q: Vec<f64> = (0..c).map(|ch| case.frames[t].data()[(ch * h + i) * w + j]).collect();
                let want = fgs_msa(&q, &keys, &case.frames, &case.params)?;
                for ch in 0..c {
                    if out.data()[(ch * h + i) * w + j].to_bits() != want[ch].to_bits() {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

/// Gradient agreement of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Values of the worst probe.
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Probes compared.
    pub probes: usize,
    /// Candidate probes discarded because a `+-h` step moved some activation
    /// or L1 residual across its kink.
    pub skipped: usize,
    /// False when every candidate crossed a kink and the reported probes are
    /// such crossings.
    pub kink_free: bool,
}

fn model_loss(model: &FgstModel, video: &Tensor, flows: &FlowPyramid, target: &Tensor) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let p = model.params().bind_constant(&mut g);
    let l = loss_var(&mut g, model, &p, video, flows, target)?;
    Ok((g.value(l).item()?, g.kink_pattern()))
}

fn loss_var(
    g: &mut Graph,
    model: &FgstModel,
    p: &crate::numerics::Bound,
    video: &Tensor,
    flows: &FlowPyramid,
    target: &Tensor,
) -> Result<Var> {
    let out = model.build(g, p, video, flows)?;
    let mut total: Option<Var> = None;
    for (t, &y) in out.iter().enumerate() {
        let tv = g.constant(target.slice_outer(t)?);
        let l = g.l1_loss(y, tv)?;
        total = Some(match total {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    Ok(total.expect("video has at least one frame"))
}

fn perturbed(store: &ParamStore, name: &str, dir: &[(usize, f64)], step: f64) -> Result<ParamStore> {
    let mut s = store.clone();
    let data = s.get_mut(name)?.data_mut();
    for &(i, d) in dir {
        data[i] += step * d;
    }
    Ok(s)
}

/// Directions along which [`model_gradient_check`] differentiates each
/// parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradProbe {
    /// One direction per tensor with every entry a random `+-1`. Opposing
    /// entries can cancel to a derivative near the rounding floor of the
    /// difference quotient, so prefer [`GradProbe::TopEntries`] for tight
    /// tolerances.
    SignDirection,
    /// The `k` entries of largest analytic gradient, each on its own.
    TopEntries(usize),
}

/// Candidate directions tried per probe before giving up on finding one that
/// stays clear of every kink.
const MAX_CANDIDATES: usize = 16;

/// For every parameter tensor, compares analytic directional derivatives of
/// `sum_t L1(V'_t, target_t)` with central differences of step `h`; the
/// reported error is the worst over the tensor's probes.
///
/// The loss is piecewise smooth, and a central difference across a kink
/// measures a blend of two slopes. Candidate directions whose `+-h`
/// evaluations change any kink side are therefore discarded in favour of the
/// next candidate (the next largest entry, or a fresh sign draw). If no
/// candidate is clean, the kink-crossing ones are compared anyway.
pub fn model_gradient_check(
    model: &FgstModel,
    video: &Tensor,
    flows: &FlowPyramid,
    target: &Tensor,
    h: f64,
    probe: GradProbe,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let l = loss_var(&mut g, model, &p, video, flows, target)?;
    let base = g.kink_pattern();
    let grads = p.collect_grads(&g, &g.backward(l)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, t) in model.params().iter() {
        let grad = &grads[name];
        let (wanted, candidates): (usize, Vec<Vec<(usize, f64)>>) = match probe {
            GradProbe::SignDirection => (
                1,
                (0..MAX_CANDIDATES)
                    .map(|_| (0..t.len()).map(|i| (i, if rng.gen_bool(0.5) { 1.0 } else { -1.0 })).collect())
                    .collect(),
            ),
            GradProbe::TopEntries(k) => {
                let mut idx: Vec<usize> = (0..t.len()).collect();
                idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
                let k = k.max(1).min(t.len());
                (k, idx.into_iter().take(k * MAX_CANDIDATES).map(|i| vec![(i, 1.0)]).collect())
            }
        };
        let mut clean = Vec::new();
        let mut kinked = Vec::new();
        for dir in candidates {
            if clean.len() == wanted {
                break;
            }
            let analytic: f64 = dir.iter().map(|&(i, d)| grad[i] * d).sum();
            let eval = |step: f64| -> Result<(f64, Vec<bool>)> {
                let m = FgstModel::from_parts(model.config().clone(), perturbed(model.params(), name, &dir, step)?)?;
                model_loss(&m, video, flows, target)
            };
            let ((up, up_kinks), (down, down_kinks)) = (eval(h)?, eval(-h)?);
            let numeric = (up - down) / (2.0 * h);
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if up_kinks == base && down_kinks == base {
                clean.push((analytic, numeric, rel_error));
            } else {
                kinked.push((analytic, numeric, rel_error));
            }
        }
        let skipped = kinked.len();
        let kink_free = !clean.is_empty();
        let used = if kink_free { clean } else { kinked };
        let &(analytic, numeric, rel_error) = used
            .iter()
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .expect("every tensor has at least one candidate");
        out.push(GradCheck {
            name: name.to_string(),
            analytic,
            numeric,
            rel_error,
            probes: used.len(),
            skipped,
            kink_free,
        });
    }
    Ok(out)
}

/// [`model_gradient_check`] at a random point: a uniform-noise video and a
/// target 2 above it, so every L1 residual sits far from its kink. Noise
/// avoids the flat regions of rendered scenes, where many activations tie and
/// cross a kink together. When some tensor has no kink-free probe at a point
/// (an activation lies within reach of every step), a fresh point is drawn,
/// up to `attempts` times. Returns the checks and the attempt used.
pub fn random_point_gradient_check(
    model: &FgstModel,
    frames: usize,
    h: f64,
    probe: GradProbe,
    seed: u64,
    attempts: usize,
) -> Result<(Vec<GradCheck>, usize)> {
    let cfg = model.config();
    let shape = vec![frames, crate::model::IMAGE_CHANNELS, cfg.height, cfg.width];
    let n: usize = shape.iter().product();
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        let video = Tensor::new(shape.clone(), (0..n).map(|_| rng.gen::<f64>()).collect())?;
        let target = video.map(|v| v + 2.0);
        let flows = model.estimate_flows(&video)?;
        let checks = model_gradient_check(model, &video, &flows, &target, h, probe, seed)?;
        if checks.iter().all(|c| c.kink_free) {
            return Ok((checks, attempt));
        }
        last = Some((checks, attempt));
    }
    Ok(last.expect("at least one attempt"))
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}
