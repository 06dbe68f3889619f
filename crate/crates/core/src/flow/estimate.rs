use std::cmp::Ordering;

use crate::error::{arg_err, shape_err, Result};
use crate::numerics::Tensor;

/// Maps an ordered frame pair `(reference t, neighbour f)` to a level-0
/// `[2, H, W]` offset map.
pub trait FlowEstimator: Send + Sync {
    fn estimate(&self, t: usize, f: usize, reference: &Tensor, neighbour: &Tensor) -> Result<Tensor>;
}

fn spatial(frame: &Tensor) -> Result<(usize, usize, usize)> {
    frame.dims3()
}

/// Always zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroFlow;

impl FlowEstimator for ZeroFlow {
    fn estimate(&self, _t: usize, _f: usize, reference: &Tensor, _neighbour: &Tensor) -> Result<Tensor> {
        let (_, h, w) = spatial(reference)?;
        Ok(Tensor::zeros(&[2, h, w]))
    }
}

/// Deterministic oracle: uniform motion of `velocity` pixels per frame, so the
/// flow from `t` to `f` is `(f - t) * velocity` everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantVelocity {
    pub dx: f64,
    pub dy: f64,
}

impl ConstantVelocity {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }
}

impl FlowEstimator for ConstantVelocity {
    fn estimate(&self, t: usize, f: usize, reference: &Tensor, _neighbour: &Tensor) -> Result<Tensor> {
        let (_, h, w) = spatial(reference)?;
        let k = f as f64 - t as f64;
        let plane = h * w;
        let mut data = vec![k * self.dx; 2 * plane];
        data[plane..].iter_mut().for_each(|v| *v = k * self.dy);
        Tensor::new(vec![2, h, w], data)
    }
}

/// Exhaustive integer block matching under the sum of absolute differences.
#[derive(Clone, Copy, Debug)]
pub struct BlockMatching {
    pub block: usize,
    pub search_radius: usize,
}

impl BlockMatching {
    pub fn new(block: usize, search_radius: usize) -> Self {
        Self { block, search_radius }
    }
}

impl FlowEstimator for BlockMatching {
    fn estimate(&self, _t: usize, _f: usize, reference: &Tensor, neighbour: &Tensor) -> Result<Tensor> {
        estimate_block_matching(reference, neighbour, self.block, self.search_radius)
    }
}

/// Per-block integer offset minimising SAD between the reference block and
/// the displaced block in `neighbour`. Candidates whose displaced block leaves
/// the frame are skipped. Ties go to the smallest `|Δx| + |Δy|`, then to the
/// lexicographically smallest `(Δx, Δy)`.
pub fn estimate_block_matching(
    reference: &Tensor,
    neighbour: &Tensor,
    block: usize,
    search_radius: usize,
) -> Result<Tensor> {
    if block == 0 || search_radius == 0 {
        return arg_err("block and search_radius must be at least 1");
    }
    if reference.shape() != neighbour.shape() {
        return shape_err(format!(
            "frames of unequal size {:?} and {:?}",
            reference.shape(),
            neighbour.shape()
        ));
    }
    let (c, h, w) = spatial(reference)?;
    let (rd, nd) = (reference.data(), neighbour.data());
    let plane = h * w;
    let radius = search_radius as i64;
    let mut out = vec![0.0; 2 * plane];

    for bi in (0..h).step_by(block) {
        for bj in (0..w).step_by(block) {
            let (bh, bw) = ((h - bi).min(block), (w - bj).min(block));
            // (sad, manhattan, dx, dy)
            let mut best: Option<(f64, i64, i64, i64)> = None;
            for dx in -radius..=radius {
                let top = bi as i64 + dx;
                if top < 0 || top + bh as i64 > h as i64 {
                    continue;
                }
                for dy in -radius..=radius {
                    let left = bj as i64 + dy;
                    if left < 0 || left + bw as i64 > w as i64 {
                        continue;
                    }
                    let mut sad = 0.0;
                    for ch in 0..c {
                        for a in 0..bh {
                            let rrow = ch * plane + (bi + a) * w + bj;
                            let nrow = ch * plane + (top as usize + a) * w + left as usize;
                            for b in 0..bw {
                                sad += (rd[rrow + b] - nd[nrow + b]).abs();
                            }
                        }
                    }
                    let cand = (sad, dx.abs() + dy.abs(), dx, dy);
                    let better = match best {
                        None => true,
                        Some(cur) => {
                            let ord = cand
                                .0
                                .partial_cmp(&cur.0)
                                .unwrap_or(Ordering::Greater)
                                .then(cand.1.cmp(&cur.1))
                                .then(cand.2.cmp(&cur.2))
                                .then(cand.3.cmp(&cur.3));
                            ord == Ordering::Less
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            let (_, _, dx, dy) = best.expect("zero offset is always a candidate");
            for a in 0..bh {
                for b in 0..bw {
                    let p = (bi + a) * w + bj + b;
                    out[p] = dx as f64;
                    out[plane + p] = dy as f64;
                }
            }
        }
    }
    Tensor::new(vec![2, h, w], out)
}
