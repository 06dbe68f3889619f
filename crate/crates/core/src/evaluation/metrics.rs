use crate::error::{arg_err, shape_err, Result};
use crate::numerics::Tensor;

/// Reported PSNR when the two frames are identical.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Zero squared error; `db` holds [`PSNR_CAP`].
    pub exact: bool,
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt)?;
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn psnr(pred: &Tensor, gt: &Tensor, peak: f64) -> Result<Psnr> {
    if !(peak > 0.0) {
        return arg_err(format!("peak must be positive, got {peak}"));
    }
    let e = mse(pred, gt)?;
    if e == 0.0 {
        return Ok(Psnr { db: PSNR_CAP, exact: true });
    }
    Ok(Psnr {
        db: (10.0 * (peak * peak / e).log10()).min(PSNR_CAP),
        exact: false,
    })
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|b| g[b] * plane[i * w + j + b]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|a| g[a] * rows[(i + a) * ow + j]).sum();
        }
    }
    out
}

/// Mean local SSIM (Gaussian window 11, sigma 1.5, peak 1) over the valid
/// region, averaged over channels. Accepts `[H, W]` or `[C, H, W]`.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt)?;
    let (c, h, w) = match *pred.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return shape_err(format!("ssim expects [H, W] or [C, H, W], got {:?}", pred.shape())),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape_err(format!("{h}x{w} frame smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &pred.data()[ch * plane..(ch + 1) * plane];
        let y = &gt.data()[ch * plane..(ch + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let (mx, my) = (filter(x, h, w, &g), filter(y, h, w, &g));
        let (sxx, syy, sxy) = (filter(&xx, h, w, &g), filter(&yy, h, w, &g), filter(&xy, h, w, &g));
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = noise(&[3, 4, 4], 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Psnr { db: PSNR_CAP, exact: true });
        let z = Tensor::zeros(&[2, 3]);
        let o = Tensor::filled(&[2, 3], 1.0);
        assert!(psnr(&z, &o, 1.0).unwrap().db.abs() < 1e-12);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap().db - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &z, 1.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
        let c = noise(&[3, 4, 4], 2);
        assert_eq!(psnr(&a, &c, 1.0).unwrap(), psnr(&c, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_identity_and_bounds() {
        let a = noise(&[3, 16, 14], 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = noise(&[3, 16, 14], 4);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..1.0).contains(&s));
        assert!(ssim(&noise(&[3, 10, 20], 5), &noise(&[3, 10, 20], 6)).is_err());
    }

    #[test]
    fn ssim_constants_are_luminance_only() {
        let (p, q) = (0.3, 0.7);
        let a = Tensor::filled(&[12, 12], p);
        let b = Tensor::filled(&[12, 12], q);
        let c1 = 0.01f64 * 0.01;
        let want = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_anticorrelated_around_mean() {
        // mirrored around 0.5: luminance term near 1, structure term -1
        let s0 = noise(&[24, 24], 7).map(|v| (v - 0.5) / 2.0);
        let a = s0.map(|v| 0.5 + v);
        let b = s0.map(|v| 0.5 - v);
        let s = ssim(&a, &b).unwrap();
        assert!(s < -0.9, "{s}");
    }
}
