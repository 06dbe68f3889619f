//! Convolution kernels on flat `[C, H, W]` buffers (im2col + GEMM).

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::Tensor;
use crate::error::{shape_err, Result};

/// Output extent of a strided, zero-padded window sweep.
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("stride must be at least 1");
    }
    let padded = extent + 2 * pad;
    if padded < k {
        return shape_err(format!(
            "padded extent {padded} smaller than kernel {k}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let oh = conv_out_extent(h, k, stride, pad)?;
        let ow = conv_out_extent(w, k, stride, pad)?;
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ncols, k) = (g.cols(), g.k);
    let mut cols = vec![0.0; g.rows() * ncols];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.ow + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (ncols, k) = (g.cols(), g.k);
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is stored as `[m, k]` (or `[k, m]` when `ta`), `b` as `[k, n]` (or `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let av = if ta {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v += b);
    }
}

fn bias_grad(grad_out: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| grad_out[c * plane..(c + 1) * plane].iter().sum())
        .collect()
}

/// Gradients of a convolution or deconvolution with respect to its three inputs.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    g: &ConvGeom,
    kernel: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let cols = if g.k == 1 && g.stride == 1 && g.pad == 0 {
        x.to_vec()
    } else {
        im2col(x, g)
    };
    let mut out = vec![0.0; cout * g.cols()];
    gemm(cout, g.rows(), g.cols(), kernel, false, &cols, false, 0.0, &mut out);
    if let Some(b) = bias {
        add_bias(&mut out, b, g.cols());
    }
    out
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    g: &ConvGeom,
    kernel: &[f64],
    cout: usize,
    grad_out: &[f64],
    want_input: bool,
) -> ConvGrads {
    let cols = im2col(x, g);
    let mut dk = vec![0.0; cout * g.rows()];
    gemm(cout, g.cols(), g.rows(), grad_out, false, &cols, true, 0.0, &mut dk);
    let input = want_input.then(|| {
        let mut dcols = vec![0.0; g.rows() * g.cols()];
        gemm(g.rows(), cout, g.cols(), kernel, true, grad_out, false, 0.0, &mut dcols);
        let mut dx = vec![0.0; g.c * g.h * g.w];
        col2im_add(&dcols, g, &mut dx);
        dx
    });
    ConvGrads {
        input,
        kernel: dk,
        bias: bias_grad(grad_out, cout, g.cols()),
    }
}

/// Transposed convolution. `g` describes the *adjoint* convolution, i.e. its
/// `(c, h, w)` is the deconvolution output and `(oh, ow)` its input.
pub(crate) fn deconv2d_forward(
    y: &[f64],
    g: &ConvGeom,
    kernel: &[f64],
    cin: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut cols = vec![0.0; g.rows() * g.cols()];
    gemm(g.rows(), cin, g.cols(), kernel, true, y, false, 0.0, &mut cols);
    let mut out = vec![0.0; g.c * g.h * g.w];
    col2im_add(&cols, g, &mut out);
    if let Some(b) = bias {
        add_bias(&mut out, b, g.h * g.w);
    }
    out
}

pub(crate) fn deconv2d_backward(
    y: &[f64],
    g: &ConvGeom,
    kernel: &[f64],
    cin: usize,
    grad_out: &[f64],
    want_input: bool,
) -> ConvGrads {
    let dcols = im2col(grad_out, g);
    let mut dk = vec![0.0; cin * g.rows()];
    gemm(cin, g.cols(), g.rows(), y, false, &dcols, true, 0.0, &mut dk);
    let input = want_input.then(|| {
        let mut dy = vec![0.0; cin * g.cols()];
        gemm(cin, g.rows(), g.cols(), kernel, false, &dcols, false, 0.0, &mut dy);
        dy
    });
    ConvGrads {
        input,
        kernel: dk,
        bias: bias_grad(grad_out, g.c, g.h * g.w),
    }
}

pub(crate) fn check_conv(
    input: &[usize],
    kernel: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
    pad: usize,
) -> Result<(ConvGeom, usize)> {
    let (&[cin, h, w], &[cout, kcin, kh, kw]) = (input, kernel) else {
        return shape_err(format!(
            "conv2d expects input [C, H, W] and kernel [Co, Ci, k, k], got {input:?} and {kernel:?}"
        ));
    };
    if kh != kw {
        return shape_err(format!("non-square kernel {kh}x{kw}"));
    }
    if kcin != cin {
        return shape_err(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        ));
    }
    if let Some(b) = bias {
        if b != [cout] {
            return shape_err(format!("bias shape {b:?} for {cout} output channels"));
        }
    }
    Ok((ConvGeom::new(cin, h, w, kh, stride, pad)?, cout))
}

/// Returns the adjoint geometry and the deconvolution output channel count.
pub(crate) fn check_deconv(
    input: &[usize],
    kernel: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
) -> Result<(ConvGeom, usize)> {
    let (&[cin, h, w], &[kcin, cout, kh, kw]) = (input, kernel) else {
        return shape_err(format!(
            "deconv2d expects input [C, H, W] and kernel [Ci, Co, k, k], got {input:?} and {kernel:?}"
        ));
    };
    if kh != kw {
        return shape_err(format!("non-square kernel {kh}x{kw}"));
    }
    if kcin != cin {
        return shape_err(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        ));
    }
    if stride == 0 {
        return shape_err("stride must be at least 1");
    }
    if let Some(b) = bias {
        if b != [cout] {
            return shape_err(format!("bias shape {b:?} for {cout} output channels"));
        }
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let g = ConvGeom::new(cout, oh, ow, kh, stride, 0)?;
    debug_assert_eq!((g.oh, g.ow), (h, w));
    Ok((g, cout))
}

/// Zero-padded 2-D convolution of a `[C_in, H, W]` input with a `[C_out, C_in, k, k]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_biased(input, kernel, None, stride, pad)
}

pub fn conv2d_biased(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (g, cout) = check_conv(
        input.shape(),
        kernel.shape(),
        bias.map(Tensor::shape),
        stride,
        pad,
    )?;
    let out = conv2d_forward(input.data(), &g, kernel.data(), cout, bias.map(Tensor::data));
    Tensor::new(vec![cout, g.oh, g.ow], out)
}

/// Transposed convolution of `[C_in, H, W]` with a `[C_in, C_out, k, k]` kernel; output
/// extent `(H - 1) * stride + k`.
pub fn deconv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    deconv2d_biased(input, kernel, None, stride)
}

pub fn deconv2d_biased(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let (g, cout) = check_deconv(input.shape(), kernel.shape(), bias.map(Tensor::shape), stride)?;
    let cin = input.shape()[0];
    let out = deconv2d_forward(input.data(), &g, kernel.data(), cin, bias.map(Tensor::data));
    Tensor::new(vec![cout, g.h, g.w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn conv_reference(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (cin, h, w) = x.dims3().unwrap();
        let (cout, ks) = (k.shape()[0], k.shape()[2]);
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for a in 0..ks {
                            for b in 0..ks {
                                let ii = (oi * stride + a) as isize - pad as isize;
                                let jj = (oj * stride + b) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += x.data()[(ci * h + ii as usize) * w + jj as usize]
                                        * k.data()[((co * cin + ci) * ks + a) * ks + b];
                                }
                            }
                        }
                    }
                    out[(co * oh + oi) * ow + oj] = acc;
                }
            }
        }
        Tensor::new(vec![cout, oh, ow], out).unwrap()
    }

    #[test]
    fn scalar_conv() {
        let x = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[10.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 5, 6], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 4, 4], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let r = conv_reference(&x, &k, stride, pad);
            assert!(y.max_abs_diff(&r).unwrap() < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_out_extent(8, 4, 2, 1).unwrap(), 4);
        assert_eq!(conv_out_extent(7, 3, 2, 1).unwrap(), 4);
        assert!(conv_out_extent(1, 3, 1, 0).is_err());
        assert!(conv_out_extent(4, 3, 0, 0).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &k, 1, 1).is_err());
        let dk = Tensor::zeros(&[3, 1, 2, 2]);
        assert!(deconv2d(&x, &dk, 2).is_err());
    }

    #[test]
    fn single_tap_spread() {
        let x = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let k = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let y = deconv2d(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn deconv_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random(&[4, 2, 2, 2], &mut rng);
        let y = deconv2d(&Tensor::zeros(&[4, 3, 3]), &k, 2).unwrap();
        assert_eq!(y.shape(), &[2, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (cin, cout, h, k, stride) in [(2, 3, 6, 2, 2), (3, 2, 7, 3, 2), (1, 1, 5, 3, 1), (2, 4, 8, 4, 2)] {
            let x = random(&[cin, h, h], &mut rng);
            let kern = random(&[cout, cin, k, k], &mut rng);
            let cx = conv2d(&x, &kern, stride, 0).unwrap();
            let y = random(cx.shape(), &mut rng);
            let dy = deconv2d(&y, &kern, stride).unwrap();
            // The deconvolution output covers the conv's receptive span, which may
            // drop trailing rows that no window reaches.
            let (_, oh, _) = dy.dims3().unwrap();
            let mut lhs = 0.0;
            for c in 0..cin {
                for i in 0..oh {
                    for j in 0..oh {
                        lhs += x.data()[(c * h + i) * h + j] * dy.data()[(c * oh + i) * oh + j];
                    }
                }
            }
            let rhs = cx.dot(&y).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }
}
