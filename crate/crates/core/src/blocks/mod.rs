//! Convolutional building blocks and the flow-guided attention block.
//!
//! Every block reads its parameters by name from a [`Bound`] set, so one
//! [`ParamStore`] serves training, inference and checkpoints.

mod fgab;
mod warp;

pub use fgab::{fgab_layer, fgab_step, init_fgab, FgabConfig, RecurrentState, FFN_BLOCKS};
pub use warp::{warp_feature, warp_feature_var};

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::numerics::{Bound, Graph, ParamStore, Tensor, Var, LEAKY_SLOPE};

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Adds `{name}.w` (`[cout, cin, k, k]`) and `{name}.b` (`[cout]`, zero).
pub fn init_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(format!("{name}.w"), uniform(&[cout, cin, k, k], cin * k * k, rng)?)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
}

/// Adds a transposed-convolution kernel `{name}.w` (`[cin, cout, k, k]`) and bias.
pub fn init_deconv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    // each output of a stride-k transposed conv sees one tap per input channel
    store.insert(format!("{name}.w"), uniform(&[cin, cout, k, k], cin, rng)?)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
}

pub fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

pub fn init_residual_block(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<()> {
    init_conv(store, &format!("{name}.conv1"), channels, channels, 3, rng)?;
    init_conv(store, &format!("{name}.conv2"), channels, channels, 3, rng)
}

/// `x + conv3x3(leaky(conv3x3(x)))`.
pub fn residual_block(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let a = conv(g, p, &format!("{name}.conv1"), x, 1, 1)?;
    let a = g.leaky_relu(a, LEAKY_SLOPE)?;
    let a = conv(g, p, &format!("{name}.conv2"), a, 1, 1)?;
    g.add(x, a)
}

/// `count` residual blocks named `{name}.{i}` applied in order.
pub fn residual_stack(g: &mut Graph, p: &Bound, name: &str, count: usize, mut x: Var) -> Result<Var> {
    for i in 0..count {
        x = residual_block(g, p, &format!("{name}.{i}"), x)?;
    }
    Ok(x)
}

pub fn init_patch_merge(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<()> {
    init_conv(store, name, 2 * channels, channels, 4, rng)
}

/// 4x4 stride-2 convolution, `[C, H, W] -> [2C, H/2, W/2]`.
pub fn patch_merge(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let (_, h, w) = g.value(x).dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("patch merging needs even extents, got {h}x{w}"));
    }
    conv(g, p, name, x, 2, 1)
}

pub fn init_patch_expand(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<()> {
    if !channels.is_multiple_of(2) {
        return shape_err(format!("patch expanding needs an even channel count, got {channels}"));
    }
    init_deconv(store, name, channels, channels / 2, 2, rng)
}

/// 2x2 stride-2 transposed convolution, `[2C, H, W] -> [C, 2H, 2W]`.
pub fn patch_expand(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let (c, _, _) = g.value(x).dims3()?;
    if c % 2 != 0 {
        return shape_err(format!("patch expanding needs an even channel count, got {c}"));
    }
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.deconv2d(x, w, Some(b), 2)
}

/// Runs a block on constants and returns its value.
pub fn eval_block(
    store: &ParamStore,
    x: &Tensor,
    f: impl FnOnce(&mut Graph, &Bound, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let xv = g.constant(x.clone());
    let y = f(&mut g, &p, xv)?;
    Ok(g.value(y).clone())
}
