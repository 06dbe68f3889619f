use crate::error::{shape_err, Result};
use crate::flow::FlowField;
use crate::numerics::{CustomOp, Graph, Tensor, Var};

/// Source taps of one output pixel: four flat plane offsets and weights.
#[derive(Clone, Copy)]
struct Taps {
    idx: [usize; 4],
    wt: [f64; 4],
}

fn taps(flow: &FlowField, h: usize, w: usize) -> Vec<Taps> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (dx, dy) = flow.at(i, j);
            let y = (i as f64 + dx).clamp(0.0, (h - 1) as f64);
            let x = (j as f64 + dy).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            out.push(Taps {
                idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                wt: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
            });
        }
    }
    out
}

fn check(features: &Tensor, flow: &FlowField) -> Result<(usize, usize, usize)> {
    let (c, h, w) = features.dims3()?;
    if flow.height() != h || flow.width() != w {
        return shape_err(format!(
            "flow is {}x{}, features are {h}x{w}",
            flow.height(),
            flow.width()
        ));
    }
    Ok((c, h, w))
}

fn apply(src: &[f64], c: usize, plane: usize, taps: &[Taps]) -> Vec<f64> {
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        let s = &src[ch * plane..(ch + 1) * plane];
        for (p, t) in taps.iter().enumerate() {
            out[ch * plane + p] =
                t.wt[0] * s[t.idx[0]] + t.wt[1] * s[t.idx[1]] + t.wt[2] * s[t.idx[2]] + t.wt[3] * s[t.idx[3]];
        }
    }
    out
}

/// Backward warp: `out(i, j)` samples `features` bilinearly at
/// `(i + Δx, j + Δy)`, with the sample point clamped to the frame.
pub fn warp_feature(features: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (c, h, w) = check(features, flow)?;
    let t = taps(flow, h, w);
    Tensor::new(vec![c, h, w], apply(features.data(), c, h * w, &t))
}

struct WarpOp {
    taps: Vec<Taps>,
    channels: usize,
}

impl CustomOp for WarpOp {
    fn name(&self) -> &'static str {
        "warp_feature"
    }

    fn backward(&self, grad_out: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let plane = self.taps.len();
        let mut g = vec![0.0; self.channels * plane];
        for ch in 0..self.channels {
            let base = ch * plane;
            for (p, t) in self.taps.iter().enumerate() {
                let go = grad_out[base + p];
                for k in 0..4 {
                    g[base + t.idx[k]] += t.wt[k] * go;
                }
            }
        }
        vec![Some(g)]
    }
}

/// [`warp_feature`] on the tape; the flow is a constant.
pub fn warp_feature_var(g: &mut Graph, features: Var, flow: &FlowField) -> Result<Var> {
    let x = g.value(features);
    let (c, h, w) = check(x, flow)?;
    let t = taps(flow, h, w);
    let value = Tensor::new(vec![c, h, w], apply(x.data(), c, h * w, &t))?;
    g.custom(&[features], value, Box::new(WarpOp { taps: t, channels: c }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let x = noise(3, 5, 6, 1);
        assert!(warp_feature(&x, &FlowField::zero(5, 6)).unwrap().bit_eq(&x));
    }

    #[test]
    fn integer_flow_shifts() {
        let x = noise(2, 6, 6, 2);
        let y = warp_feature(&x, &FlowField::constant(6, 6, 1.0, 0.0)).unwrap();
        for ch in 0..2 {
            for i in 0..5 {
                for j in 0..6 {
                    assert_eq!(y.data()[(ch * 6 + i) * 6 + j], x.data()[(ch * 6 + i + 1) * 6 + j]);
                }
            }
        }
    }

    #[test]
    fn half_pixel_on_ramp_is_midpoint() {
        // value = 3i + j
        let x = Tensor::new(vec![1, 5, 5], (0..25).map(|p| (3 * (p / 5) + p % 5) as f64).collect()).unwrap();
        let y = warp_feature(&x, &FlowField::constant(5, 5, 0.5, 0.0)).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let want = 3.0 * (i as f64 + 0.5) + j as f64;
                assert!((y.data()[i * 5 + j] - want).abs() < 1e-12);
            }
        }
        assert!(warp_feature(&x, &FlowField::zero(4, 5)).is_err());
    }

    #[test]
    fn tape_gradient_is_adjoint() {
        let x = noise(2, 4, 5, 3);
        let r = noise(2, 4, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flow = FlowField::new(
            0,
            0,
            0,
            Tensor::new(vec![2, 4, 5], (0..40).map(|_| rng.gen_range(-2.5..2.5)).collect()).unwrap(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = warp_feature_var(&mut g, xv, &flow).unwrap();
        // <warp(x), r> == <x, warp^T(r)>
        let op = WarpOp {
            taps: taps(&flow, 4, 5),
            channels: 2,
        };
        let back = op.backward(r.data(), &[true])[0].clone().unwrap();
        let lhs = g.value(y).dot(&r).unwrap();
        let rhs: f64 = back.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
