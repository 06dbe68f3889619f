//! Eager (tape-free) versions of the elementwise and normalisation ops.

use super::Tensor;
use crate::error::{shape_err, FgstError, Result};

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(FgstError::EmptyKeys);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Channel layout used for normalisation: the leading axis is the channel
/// axis and every other position is a token.
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.split_first() {
        Some((&c, rest)) => Ok((c, rest.iter().product())),
        None => shape_err("layer_norm on a scalar"),
    }
}

pub(crate) struct NormStats {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_raw(
    x: &[f64],
    channels: usize,
    tokens: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; tokens];
    let mut out = vec![0.0; x.len()];
    let inv_c = 1.0 / channels as f64;
    for p in 0..tokens {
        let mean = (0..channels).map(|c| x[c * tokens + p]).sum::<f64>() * inv_c;
        let var = (0..channels)
            .map(|c| {
                let d = x[c * tokens + p] - mean;
                d * d
            })
            .sum::<f64>()
            * inv_c;
        let r = 1.0 / (var + eps).sqrt();
        rstd[p] = r;
        for c in 0..channels {
            let i = c * tokens + p;
            xhat[i] = (x[i] - mean) * r;
            out[i] = xhat[i] * gain[c] + bias[c];
        }
    }
    (out, NormStats { xhat, rstd })
}

pub(crate) fn check_layer_norm(x: &[usize], gain: &[usize], bias: &[usize]) -> Result<(usize, usize)> {
    let (c, tokens) = channel_layout(x)?;
    if gain != [c] || bias != [c] {
        return shape_err(format!(
            "layer_norm gain {gain:?} / bias {bias:?} for {c} channels"
        ));
    }
    Ok((c, tokens))
}

/// Normalises every token (position along the non-leading axes) across the
/// leading channel axis, then applies the per-channel affine.
pub fn layer_norm(input: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (c, tokens) = check_layer_norm(input.shape(), gain.shape(), bias.shape())?;
    let (out, _) = layer_norm_raw(input.data(), c, tokens, gain.data(), bias.data(), eps);
    Tensor::new(input.shape().to_vec(), out)
}

pub(crate) fn check_linear(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    let (&[out_dim, in_dim], Some(&last)) = (w, x.last()) else {
        return shape_err(format!("linear: input {x:?}, weight {w:?}"));
    };
    if last != in_dim {
        return shape_err(format!(
            "linear: input feature extent {last} vs weight {w:?}"
        ));
    }
    if let Some(b) = b {
        if b != [out_dim] {
            return shape_err(format!("linear bias {b:?} for {out_dim} outputs"));
        }
    }
    let rows = x[..x.len() - 1].iter().product();
    Ok((rows, in_dim, out_dim))
}

/// `y = x Wᵀ` over the last axis of `x`; `weight` is `[out, in]`.
pub fn linear(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (rows, in_dim, out_dim) = check_linear(input.shape(), weight.shape(), None)?;
    let mut out = vec![0.0; rows * out_dim];
    super::conv::gemm(rows, in_dim, out_dim, input.data(), false, weight.data(), true, 0.0, &mut out);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out_dim;
    Tensor::new(shape, out)
}

pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { v * slope })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return shape_err(format!("add of {:?} and {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn check_concat(shapes: &[&[usize]]) -> Result<Vec<usize>> {
    let Some(first) = shapes.first() else {
        return shape_err("concat of zero tensors");
    };
    let Some((_, rest)) = first.split_first() else {
        return shape_err("concat of scalars");
    };
    let mut channels = 0;
    for s in shapes {
        match s.split_first() {
            Some((&c, r)) if r == rest => channels += c,
            _ => return shape_err(format!("concat of {first:?} and {s:?}")),
        }
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(rest);
    Ok(shape)
}

/// Concatenation along the leading (channel) axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
    let shape = check_concat(&shapes)?;
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return shape_err(format!(
            "l1_loss of {:?} and {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[3.7]).unwrap(), vec![1.0]);
        assert!(matches!(softmax(&[]), Err(FgstError::EmptyKeys)));
        let big = softmax(&[1000.0, 1000.0, 0.0]).unwrap();
        assert!((big[0] - 0.5).abs() < 1e-12 && big[2] < 1e-300);
    }

    #[test]
    fn layer_norm_examples() {
        let unit = Tensor::filled(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        let x = Tensor::from_vec(vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &unit, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);

        let gain4 = Tensor::filled(&[4], 1.0);
        let bias4 = Tensor::zeros(&[4]);
        let c = Tensor::filled(&[4], 3.25);
        let y = layer_norm(&c, &gain4, &bias4, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_matches_two_pass() {
        let x = Tensor::new(vec![3, 2], vec![0.3, -1.0, 2.0, 0.5, -0.7, 4.0]).unwrap();
        let gain = Tensor::from_vec(vec![1.0, 2.0, -1.0]).unwrap();
        let bias = Tensor::from_vec(vec![0.1, 0.0, 0.5]).unwrap();
        let eps = 1e-6;
        let y = layer_norm(&x, &gain, &bias, eps).unwrap();
        for p in 0..2 {
            let col: Vec<f64> = (0..3).map(|c| x.data()[c * 2 + p]).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            for c in 0..3 {
                let want = (col[c] - mean) / (var + eps).sqrt() * gain.data()[c] + bias.data()[c];
                assert!((y.data()[c * 2 + p] - want).abs() < 1e-12);
            }
        }
        assert!(layer_norm(&x, &Tensor::zeros(&[2]), &bias, eps).is_err());
    }

    #[test]
    fn l1_of_self_is_zero() {
        let x = Tensor::from_vec(vec![0.2, -3.0, 1.5]).unwrap();
        assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let y = linear(&x, &w).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[-2.0, 3.0, -1.5, -0.25]);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let p = softmax(&logits).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn layer_norm_is_centered(x in prop::collection::vec(-100.0f64..100.0, 2..24)) {
            let n = x.len();
            let t = Tensor::new(vec![n, 1], x).unwrap();
            let y = layer_norm(&t, &Tensor::filled(&[n], 1.0), &Tensor::zeros(&[n]), 1e-5).unwrap();
            let mean = y.data().iter().sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }
}
