//! Reference computation of windowed flow-guided attention as dense attention
//! over every token of the sequence with logits masked outside the allowed set.
//!
//! Shares no code with the sparse kernels: the mask is enumerated directly
//! from the flow offsets and the per-head products are folded into `C x C`
//! matrices (`U_n^T V_n` and `W_n W'_n`) before use.

use std::collections::BTreeSet;

use super::params::AttentionParams;
use crate::error::{arg_err, shape_err, Result};
use crate::flow::FlowSet;
use crate::numerics::Tensor;

/// For each pixel `i * W + j` of frame `t`, the allowed keys as global token
/// indices `f * H * W + row * W + col`.
pub fn fgsw_mask(
    t: usize,
    frames: usize,
    height: usize,
    width: usize,
    flows: &FlowSet,
    r: usize,
    window: usize,
) -> Result<Vec<BTreeSet<usize>>> {
    if window == 0 || window.is_multiple_of(2) {
        return arg_err(format!("window size must be odd and positive, got {window}"));
    }
    if t >= frames {
        return arg_err(format!("frame {t} outside a {frames}-frame sequence"));
    }
    let plane = height * width;
    let sample = |i: usize, j: usize, set: &mut BTreeSet<usize>| -> Result<()> {
        for delta in -(r as i64)..=(r as i64) {
            let f = (t as i64 + delta).clamp(0, frames as i64 - 1) as usize;
            let (di, dj) = if f == t {
                (0.0, 0.0)
            } else {
                let flow = flows.get(t, f)?.offsets();
                if flow.shape() != [2, height, width] {
                    return shape_err(format!("flow ({t}, {f}) has shape {:?}", flow.shape()));
                }
                (flow.data()[i * width + j].round(), flow.data()[plane + i * width + j].round())
            };
            let row = (i as f64 + di).clamp(0.0, (height - 1) as f64) as usize;
            let col = (j as f64 + dj).clamp(0.0, (width - 1) as f64) as usize;
            set.insert(f * plane + row * width + col);
        }
        Ok(())
    };
    let mut out = vec![BTreeSet::new(); plane];
    for wi in (0..height).step_by(window) {
        for wj in (0..width).step_by(window) {
            let rows = wi..(wi + window).min(height);
            let cols = wj..(wj + window).min(width);
            let mut union = BTreeSet::new();
            for i in rows.clone() {
                for j in cols.clone() {
                    sample(i, j, &mut union)?;
                }
            }
            for i in rows.clone() {
                for j in cols.clone() {
                    out[i * width + j] = union.clone();
                }
            }
        }
    }
    Ok(out)
}

/// Dense attention of each query pixel over all tokens of `frames`, with
/// logits outside `mask[pixel]` set to negative infinity.
pub fn masked_dense_attention(
    query: &Tensor,
    frames: &[Tensor],
    params: &AttentionParams,
    mask: &[BTreeSet<usize>],
) -> Result<Tensor> {
    params.validate()?;
    let (c, h, w) = query.dims3()?;
    if c != params.channels || frames.iter().any(|f| f.shape() != query.shape()) {
        return shape_err("query and frames must share [C, H, W] with the attention width");
    }
    let plane = h * w;
    if mask.len() != plane {
        return shape_err(format!("mask covers {} pixels, frame has {plane}", mask.len()));
    }
    let (heads, d) = (params.heads, params.head_dim());
    let (u, v, wv, wo) = (params.u.data(), params.v.data(), params.value.data(), params.out.data());

    // logit[n] = U_n^T V_n, proj[n] = W_n W'_n, both C x C
    let mut logit = vec![vec![0.0; c * c]; heads];
    let mut proj = vec![vec![0.0; c * c]; heads];
    for n in 0..heads {
        for a in 0..c {
            for b in 0..c {
                let mut m = 0.0;
                let mut pm = 0.0;
                for e in 0..d {
                    m += u[(n * d + e) * c + a] * v[(n * d + e) * c + b];
                    pm += wo[(n * c + a) * d + e] * wv[(n * d + e) * c + b];
                }
                logit[n][a * c + b] = m;
                proj[n][a * c + b] = pm;
            }
        }
    }
    let token = |g: usize| -> Vec<f64> {
        let (f, p) = (g / plane, g % plane);
        (0..c).map(|ch| frames[f].data()[ch * plane + p]).collect()
    };
    let total = frames.len() * plane;
    let tokens: Vec<Vec<f64>> = (0..total).map(token).collect();
    let scale = (d as f64).sqrt();

    let mut out = vec![0.0; c * plane];
    for p in 0..plane {
        if mask[p].is_empty() || mask[p].iter().any(|&g| g >= total) {
            return arg_err(format!("mask of pixel {p} is empty or out of range"));
        }
        let q: Vec<f64> = (0..c).map(|ch| query.data()[ch * plane + p]).collect();
        for n in 0..heads {
            // q^T M_n
            let qm: Vec<f64> = (0..c).map(|b| (0..c).map(|a| q[a] * logit[n][a * c + b]).sum()).collect();
            let logits: Vec<f64> = tokens
                .iter()
                .enumerate()
                .map(|(g, x)| {
                    if mask[p].contains(&g) {
                        qm.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = ex.iter().sum();
            let mut mixed = vec![0.0; c];
            for (e, x) in ex.iter().zip(&tokens) {
                if *e == 0.0 {
                    continue;
                }
                mixed.iter_mut().zip(x).for_each(|(m, xi)| *m += e / z * xi);
            }
            for a in 0..c {
                out[a * plane + p] += (0..c).map(|b| proj[n][a * c + b] * mixed[b]).sum::<f64>();
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}
