use rand::Rng;

use super::{conv, init_residual_block, residual_stack, warp_feature_var};
use crate::attention::{fgsw_msa_var, AttentionParams, AttentionVars};
use crate::error::{arg_err, shape_err, Result};
use crate::flow::FlowSet;
use crate::numerics::{Bound, Graph, ParamStore, Tensor, Var, LN_EPS};

/// Residual blocks in the feed-forward part of every block.
pub const FFN_BLOCKS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FgabConfig {
    pub heads: usize,
    pub window: usize,
    pub radius: usize,
    /// Fuse the warped previous output into the query. When off the query is
    /// the block input itself and no fusion kernel exists.
    pub recurrent: bool,
}

/// Adds the parameters of one block of width `channels` under `name`.
pub fn init_fgab(
    store: &mut ParamStore,
    name: &str,
    channels: usize,
    cfg: FgabConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(format!("{name}.ln.gain"), Tensor::filled(&[channels], 1.0))?;
    store.insert(format!("{name}.ln.bias"), Tensor::zeros(&[channels]))?;
    let attn = AttentionParams::random(cfg.heads, channels, rng)?;
    store.insert(format!("{name}.attn.u"), attn.u)?;
    store.insert(format!("{name}.attn.v"), attn.v)?;
    store.insert(format!("{name}.attn.value"), attn.value)?;
    store.insert(format!("{name}.attn.out"), attn.out)?;
    for i in 0..FFN_BLOCKS {
        init_residual_block(store, &format!("{name}.ffn.{i}"), channels, rng)?;
    }
    if cfg.recurrent {
        super::init_conv(store, &format!("{name}.fuse"), channels, 2 * channels, 3, rng)?;
    }
    Ok(())
}

/// Output of the same block at the previous time step.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    shape: [usize; 3],
    previous: Option<Var>,
}

impl RecurrentState {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            shape: [channels, height, width],
            previous: None,
        }
    }

    pub fn previous(&self) -> Option<Var> {
        self.previous
    }

    /// The stored map, or zeros before the first step.
    pub fn source(&self, g: &mut Graph) -> Var {
        match self.previous {
            Some(v) => v,
            None => g.constant(Tensor::zeros(&self.shape)),
        }
    }

    pub fn update(&mut self, g: &Graph, y: Var) -> Result<()> {
        if g.value(y).shape() != self.shape {
            return shape_err(format!("state is {:?}, update is {:?}", self.shape, g.value(y).shape()));
        }
        self.previous = Some(y);
        Ok(())
    }
}

fn attention_vars(p: &Bound, name: &str, heads: usize) -> Result<AttentionVars> {
    Ok(AttentionVars {
        heads,
        u: p.var(&format!("{name}.attn.u"))?,
        v: p.var(&format!("{name}.attn.v"))?,
        value: p.var(&format!("{name}.attn.value"))?,
        out: p.var(&format!("{name}.attn.out"))?,
    })
}

fn norm(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{name}.ln.gain"))?;
    let bias = p.var(&format!("{name}.ln.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// One time step of a block. `inputs[f]` is the previous layer's output for
/// frame `f`, `keys[f]` its normalised form (only the temporal neighbours of
/// `t` are read).
#[allow(clippy::too_many_arguments)]
pub fn fgab_step(
    g: &mut Graph,
    p: &Bound,
    name: &str,
    t: usize,
    inputs: &[Var],
    keys: &[Option<Var>],
    state: &mut RecurrentState,
    flows: &FlowSet,
    cfg: FgabConfig,
) -> Result<Var> {
    let Some(&y_in) = inputs.get(t) else {
        return arg_err(format!("frame {t} outside a {}-frame sequence", inputs.len()));
    };
    if g.value(y_in).shape() != state.shape {
        return shape_err(format!("input {:?} vs state {:?}", g.value(y_in).shape(), state.shape));
    }
    let q = if cfg.recurrent {
        let e = match state.previous() {
            Some(prev) => warp_feature_var(g, prev, flows.get(t, t - 1)?)?,
            None => state.source(g),
        };
        let cat = g.concat_channels(&[e, y_in])?;
        conv(g, p, &format!("{name}.fuse"), cat, 1, 1)?
    } else {
        y_in
    };
    let qn = norm(g, p, name, q)?;
    let vars = attention_vars(p, name, cfg.heads)?;
    let (a, _) = fgsw_msa_var(g, qn, keys, t, flows, &vars, cfg.window, cfg.radius)?;
    let o = g.add(a, q)?;
    // the residual blocks carry their own identity paths, which form the
    // outer skip around the feed-forward part
    let y = residual_stack(g, p, &format!("{name}.ffn"), FFN_BLOCKS, o)?;
    state.update(g, y)?;
    Ok(y)
}

/// Runs a block over the whole sequence, frame 0 first.
pub fn fgab_layer(
    g: &mut Graph,
    p: &Bound,
    name: &str,
    inputs: &[Var],
    flows: &FlowSet,
    cfg: FgabConfig,
) -> Result<Vec<Var>> {
    let Some(&first) = inputs.first() else {
        return arg_err("empty sequence");
    };
    let (c, h, w) = g.value(first).dims3()?;
    let keys: Vec<Option<Var>> = inputs
        .iter()
        .map(|&x| norm(g, p, name, x).map(Some))
        .collect::<Result<_>>()?;
    let mut state = RecurrentState::new(c, h, w);
    (0..inputs.len())
        .map(|t| fgab_step(g, p, name, t, inputs, &keys, &mut state, flows, cfg))
        .collect()
}
