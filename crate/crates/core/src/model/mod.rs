//! The full restoration network: convolutional stem, a U-shaped stack of
//! flow-guided attention blocks, and a residual output head.

mod config;

pub use config::{parse_pairs, ModelConfig};

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{mac_count, AttentionKind};
use crate::blocks::{
    conv, fgab_layer, init_conv, init_fgab, init_patch_expand, init_patch_merge, init_residual_block, patch_expand,
    patch_merge, residual_stack, FgabConfig, FFN_BLOCKS,
};
use crate::error::{shape_err, FgstError, Result};
use crate::flow::{BlockMatching, FlowEstimator, FlowPyramid, ZeroFlow};
use crate::numerics::{Bound, Graph, ParamStore, Tensor, Var};

/// Image channels of the input and output video.
pub const IMAGE_CHANNELS: usize = 3;

const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct FgstModel {
    config: ModelConfig,
    params: ParamStore,
}

impl FgstModel {
    /// Random initialisation from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let c = config.channels;
        let fg = fgab_config(&config);
        init_conv(&mut s, "in.conv", c, IMAGE_CHANNELS, 3, &mut rng)?;
        for i in 0..config.io_res_blocks {
            init_residual_block(&mut s, &format!("in.res.{i}"), c, &mut rng)?;
        }
        for l in 0..config.levels {
            let w = config.width_at(l);
            for k in 0..config.fgabs_per_stage {
                init_fgab(&mut s, &format!("enc{l}.fgab{k}"), w, fg, &mut rng)?;
            }
            init_patch_merge(&mut s, &format!("enc{l}.merge"), w, &mut rng)?;
        }
        for k in 0..config.fgabs_per_stage {
            init_fgab(&mut s, &format!("mid.fgab{k}"), config.width_at(config.levels), fg, &mut rng)?;
        }
        for l in (0..config.levels).rev() {
            let w = config.width_at(l);
            init_patch_expand(&mut s, &format!("dec{l}.expand"), 2 * w, &mut rng)?;
            init_conv(&mut s, &format!("dec{l}.fuse"), w, 2 * w, 1, &mut rng)?;
            for k in 0..config.fgabs_per_stage {
                init_fgab(&mut s, &format!("dec{l}.fgab{k}"), w, fg, &mut rng)?;
            }
        }
        for i in 0..config.io_res_blocks {
            init_residual_block(&mut s, &format!("out.res.{i}"), c, &mut rng)?;
        }
        init_conv(&mut s, "out.conv", IMAGE_CHANNELS, c, 3, &mut rng)?;
        Ok(Self { config, params: s })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.zero_all();
        Ok(m)
    }

    /// Wraps existing parameters after checking names and shapes against a
    /// fresh initialisation of `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        if reference.params.len() != params.len() {
            return shape_err(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            ));
        }
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return shape_err(format!("{name}: expected {:?}, got {:?}", t.shape(), got.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn flow_estimator(&self) -> Box<dyn FlowEstimator> {
        if self.config.flow_search == 0 {
            Box::new(ZeroFlow)
        } else {
            Box::new(BlockMatching::new(self.config.flow_block, self.config.flow_search))
        }
    }

    /// Flow pyramid of `video` (`[T, 3, H, W]`) for every level of the model.
    pub fn estimate_flows(&self, video: &Tensor) -> Result<FlowPyramid> {
        FlowPyramid::estimate(video, self.flow_estimator().as_ref(), self.config.radius, self.config.levels)
    }

    fn check_video(&self, video: &Tensor) -> Result<(usize, usize, usize)> {
        let (t, c, h, w) = video.dims4()?;
        if c != IMAGE_CHANNELS {
            return shape_err(format!("video has {c} channels, expected {IMAGE_CHANNELS}"));
        }
        self.config.check_extents(h, w)?;
        Ok((t, h, w))
    }

    /// Records the network on `g` and returns one restored frame per input
    /// frame. `p` must come from binding this model's parameters.
    pub fn build(&self, g: &mut Graph, p: &Bound, video: &Tensor, flows: &FlowPyramid) -> Result<Vec<Var>> {
        let (frames, _, _) = self.check_video(video)?;
        let cfg = &self.config;
        if flows.depth() <= cfg.levels {
            return Err(FgstError::InvalidArgument(format!(
                "flow pyramid has {} levels, model needs {}",
                flows.depth(),
                cfg.levels + 1
            )));
        }
        let fg = fgab_config(cfg);
        let inputs: Vec<Var> = (0..frames)
            .map(|t| Ok(g.constant(video.slice_outer(t)?)))
            .collect::<Result<_>>()?;

        let mut x: Vec<Var> = Vec::with_capacity(frames);
        for &v in &inputs {
            let a = conv(g, p, "in.conv", v, 1, 1)?;
            x.push(residual_stack(g, p, "in.res", cfg.io_res_blocks, a)?);
        }
        let mut skips = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            for k in 0..cfg.fgabs_per_stage {
                x = fgab_layer(g, p, &format!("enc{l}.fgab{k}"), &x, flows.level(l)?, fg)?;
            }
            skips.push(x.clone());
            x = x
                .iter()
                .map(|&v| patch_merge(g, p, &format!("enc{l}.merge"), v))
                .collect::<Result<_>>()?;
        }
        for k in 0..cfg.fgabs_per_stage {
            x = fgab_layer(g, p, &format!("mid.fgab{k}"), &x, flows.level(cfg.levels)?, fg)?;
        }
        for l in (0..cfg.levels).rev() {
            let skip = &skips[l];
            x = x
                .iter()
                .zip(skip)
                .map(|(&v, &s)| {
                    let up = patch_expand(g, p, &format!("dec{l}.expand"), v)?;
                    let cat = g.concat_channels(&[up, s])?;
                    conv(g, p, &format!("dec{l}.fuse"), cat, 1, 0)
                })
                .collect::<Result<_>>()?;
            for k in 0..cfg.fgabs_per_stage {
                x = fgab_layer(g, p, &format!("dec{l}.fgab{k}"), &x, flows.level(l)?, fg)?;
            }
        }
        x.iter()
            .zip(&inputs)
            .map(|(&v, &input)| {
                let a = residual_stack(g, p, "out.res", cfg.io_res_blocks, v)?;
                let r = conv(g, p, "out.conv", a, 1, 1)?;
                g.add(input, r)
            })
            .collect()
    }

    /// Restores `video` with precomputed flows.
    pub fn forward(&self, video: &Tensor, flows: &FlowPyramid) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g);
        let out = self.build(&mut g, &p, video, flows)?;
        let frames: Vec<Tensor> = out.iter().map(|&v| g.value(v).clone()).collect();
        Tensor::stack(&frames)
    }

    /// Estimates flows with the configured estimator, then restores.
    pub fn infer(&self, video: &Tensor) -> Result<Tensor> {
        let flows = self.estimate_flows(video)?;
        self.forward(video, &flows)
    }

    /// Writes the parameters and `config.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.params.save_dir(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_text())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: ModelConfig = fs::read_to_string(dir.join(CONFIG_FILE))?.parse()?;
        Self::from_parts(config, ParamStore::load_dir(dir)?)
    }
}

fn fgab_config(cfg: &ModelConfig) -> FgabConfig {
    FgabConfig {
        heads: cfg.heads,
        window: cfg.window,
        radius: cfg.radius,
        recurrent: cfg.recurrent,
    }
}

/// Multiply-accumulate totals of one forward pass over a
/// `frames x height x width` video.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacReport {
    pub convolution: u64,
    pub attention: u64,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.convolution + self.attention
    }
}

fn conv_macs(cout: usize, cin: usize, k: usize, h: usize, w: usize) -> u64 {
    (cout * cin * k * k * h * w) as u64
}

/// Closed-form cost of the model; the attention term sums the windowed
/// attention formula over every block.
pub fn count_macs(cfg: &ModelConfig, frames: usize, height: usize, width: usize) -> Result<MacReport> {
    cfg.validate()?;
    cfg.check_extents(height, width)?;
    let t = frames as u64;
    let c = cfg.channels;
    let kind = AttentionKind::Fgsw {
        r: cfg.radius,
        window: cfg.window,
    };
    let residual = |ch: usize, h: usize, w: usize| 2 * conv_macs(ch, ch, 3, h, w);
    let fgab = |ch: usize, h: usize, w: usize| {
        let mut m = FFN_BLOCKS as u64 * residual(ch, h, w);
        if cfg.recurrent {
            m += conv_macs(ch, 2 * ch, 3, h, w);
        }
        m
    };
    let (mut conv, mut attn) = (0u64, 0u64);
    let (h0, w0) = (height, width);
    conv += conv_macs(c, IMAGE_CHANNELS, 3, h0, w0) + conv_macs(IMAGE_CHANNELS, c, 3, h0, w0);
    conv += 2 * cfg.io_res_blocks as u64 * residual(c, h0, w0);
    for l in 0..=cfg.levels {
        let (ch, h, w) = (cfg.width_at(l), height >> l, width >> l);
        // encoder and decoder stages, or the bottleneck alone
        let stages = if l == cfg.levels { 1 } else { 2 };
        for _ in 0..stages * cfg.fgabs_per_stage {
            conv += fgab(ch, h, w);
            attn += mac_count(kind, 1, h, w, ch);
        }
        if l < cfg.levels {
            conv += conv_macs(2 * ch, ch, 4, h / 2, w / 2);
            // transposed 2x2 stride 2: every input pixel feeds 4 outputs
            conv += conv_macs(ch, 2 * ch, 2, h / 2, w / 2);
            conv += conv_macs(ch, 2 * ch, 1, h, w);
        }
    }
    Ok(MacReport {
        convolution: conv * t,
        attention: attn * t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowSet;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            frames: 3,
            channels: 4,
            height: 8,
            width: 8,
            levels: 1,
            fgabs_per_stage: 1,
            io_res_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn video(t: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, 3, h, w], (0..t * 3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_model_is_identity() {
        let m = FgstModel::zeros(small()).unwrap();
        let v = video(3, 8, 8, 1);
        assert!(m.infer(&v).unwrap().bit_eq(&v));
    }

    #[test]
    fn shape_preserved_and_deterministic() {
        let m = FgstModel::new(small()).unwrap();
        let v = video(4, 16, 8, 2);
        let a = m.infer(&v).unwrap();
        let b = m.infer(&v).unwrap();
        assert_eq!(a.shape(), v.shape());
        assert!(a.bit_eq(&b));
        assert!(m.infer(&video(2, 6, 7, 3)).is_err());
        let base = FlowPyramid::from_level0(FlowSet::uniform(4, 16, 8, 1, (0.0, 0.0)), 0).unwrap();
        assert!(m.forward(&v, &base).is_err());
    }

    #[test]
    fn param_count_matches_layout() {
        let cfg = small();
        let m = FgstModel::new(cfg.clone()).unwrap();
        let c = 4;
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let rb = |ch: usize| 2 * conv(ch, ch, 3);
        let fgab = |ch: usize| 2 * ch + 4 * ch * ch + 5 * rb(ch) + conv(ch, 2 * ch, 3);
        let want = conv(c, 3, 3)
            + rb(c)
            + fgab(c)
            + conv(2 * c, c, 4)
            + fgab(2 * c)
            + (2 * c * c * 4 + c)
            + conv(c, 2 * c, 1)
            + fgab(c)
            + rb(c)
            + conv(3, c, 3);
        assert_eq!(m.count_params(), want);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = FgstModel::new(small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = FgstModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let other = ModelConfig { channels: 8, ..small() };
        assert!(FgstModel::from_parts(other, m.params().clone()).is_err());
    }

    #[test]
    fn attention_macs_scale_with_area() {
        let cfg = ModelConfig::default();
        let a = count_macs(&cfg, 5, 32, 32).unwrap();
        let b = count_macs(&cfg, 5, 64, 64).unwrap();
        assert_eq!(b.attention, 4 * a.attention);
        assert_eq!(b.convolution, 4 * a.convolution);
        // a single block at one level reproduces the attention formula
        let one = ModelConfig {
            levels: 0,
            fgabs_per_stage: 1,
            ..cfg
        };
        let r = count_macs(&one, 5, 32, 32).unwrap();
        assert_eq!(r.attention, mac_count(AttentionKind::Fgsw { r: 1, window: 3 }, 5, 32, 32, 8));
    }
}
