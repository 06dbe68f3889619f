use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect { half_h: f64, half_w: f64 },
    Disk { radius: f64 },
}

/// A flat-coloured shape translating at constant velocity (pixels per frame,
/// `(rows, cols)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MovingShape {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

impl MovingShape {
    fn covers(&self, time: f64, i: usize, j: usize) -> bool {
        let cy = self.start.0 + self.velocity.0 * time;
        let cx = self.start.1 + self.velocity.1 * time;
        let (dy, dx) = (i as f64 - cy, j as f64 - cx);
        match self.kind {
            ShapeKind::Rect { half_h, half_w } => dy.abs() <= half_h && dx.abs() <= half_w,
            ShapeKind::Disk { radius } => dy * dy + dx * dx <= radius * radius,
        }
    }
}

/// Sinusoidal texture, optionally panning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Background {
    pub base: [f64; 3],
    pub amplitude: f64,
    /// Spatial frequencies (radians per pixel) along rows and columns.
    pub frequency: (f64, f64),
    pub pan: (f64, f64),
}

impl Background {
    pub fn flat(value: f64) -> Self {
        Self {
            base: [value; 3],
            amplitude: 0.0,
            frequency: (0.0, 0.0),
            pan: (0.0, 0.0),
        }
    }

    fn at(&self, time: f64, i: usize, j: usize, ch: usize) -> f64 {
        let y = i as f64 - self.pan.0 * time;
        let x = j as f64 - self.pan.1 * time;
        let wave = (self.frequency.0 * y).sin() * (self.frequency.1 * x + ch as f64).cos();
        (self.base[ch] + self.amplitude * wave).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: Background,
    /// Painted in order, later shapes on top.
    pub shapes: Vec<MovingShape>,
}

impl Scene {
    /// Sharp `[3, H, W]` rendering at continuous time `time` (in frames).
    pub fn render(&self, time: f64) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for i in 0..h {
            for j in 0..w {
                let top = self.shapes.iter().rev().find(|s| s.covers(time, i, j));
                for ch in 0..3 {
                    out[(ch * h + i) * w + j] = match top {
                        Some(s) => s.color[ch],
                        None => self.background.at(time, i, j, ch),
                    };
                }
            }
        }
        Tensor::new(vec![3, h, w], out).expect("extents are positive")
    }

    /// Mean of `samples` renderings spread evenly over the frame interval
    /// centred on frame `t`.
    pub fn blur(&self, t: usize, samples: usize) -> Result<Tensor> {
        if samples == 0 || samples.is_multiple_of(2) {
            return arg_err(format!("exposure samples must be odd, got {samples}"));
        }
        let k = (samples / 2) as f64;
        let mut acc = vec![0.0; 3 * self.height * self.width];
        for s in 0..samples {
            let time = t as f64 + (s as f64 - k) / samples as f64;
            for (a, v) in acc.iter_mut().zip(self.render(time).data()) {
                *a += v;
            }
        }
        let n = samples as f64;
        Tensor::new(vec![3, self.height, self.width], acc.into_iter().map(|v| v / n).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: usize,
    pub exposure_samples: usize,
    /// Largest shape speed per axis, pixels per frame.
    pub max_velocity: f64,
    /// Largest background pan per axis, pixels per frame.
    pub max_pan: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Upper bounds of the background texture amplitude and spatial frequency
    /// (radians per pixel).
    pub texture_amplitude: f64,
    pub texture_frequency: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            height: 32,
            width: 32,
            shapes: 4,
            exposure_samples: 9,
            max_velocity: 4.0,
            max_pan: 0.0,
            min_size: 3.0,
            max_size: 8.0,
            texture_amplitude: 0.2,
            texture_frequency: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub seed: u64,
    pub scene: Scene,
    /// `[T, 3, H, W]`
    pub sharp: Tensor,
    pub blurry: Tensor,
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(-max..=max)
    } else {
        0.0
    }
}

/// Random scene for `seed`, rendered sharp at integer times and blurred by
/// sub-frame averaging.
pub fn generate_sequence(seed: u64, cfg: &SyntheticConfig) -> Result<SyntheticSequence> {
    if cfg.frames == 0 || cfg.height == 0 || cfg.width == 0 {
        return arg_err("sequence extents must be positive");
    }
    if cfg.exposure_samples == 0 || cfg.exposure_samples.is_multiple_of(2) {
        return arg_err(format!("exposure samples must be odd, got {}", cfg.exposure_samples));
    }
    if !(cfg.min_size > 0.0 && cfg.min_size <= cfg.max_size) {
        return arg_err("need 0 < min_size <= max_size");
    }
    if cfg.texture_amplitude < 0.0 || cfg.texture_frequency < 0.0 || cfg.max_velocity < 0.0 || cfg.max_pan < 0.0 {
        return arg_err("texture and motion bounds must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Background {
        base: [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)],
        amplitude: rng.gen_range(0.0..=cfg.texture_amplitude),
        frequency: (
            rng.gen_range(0.0..=cfg.texture_frequency),
            rng.gen_range(0.0..=cfg.texture_frequency),
        ),
        pan: (symmetric(&mut rng, cfg.max_pan), symmetric(&mut rng, cfg.max_pan)),
    };
    let mid = (cfg.frames as f64 - 1.0) / 2.0;
    let shapes = (0..cfg.shapes)
        .map(|_| {
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Rect {
                    half_h: rng.gen_range(cfg.min_size..=cfg.max_size) / 2.0,
                    half_w: rng.gen_range(cfg.min_size..=cfg.max_size) / 2.0,
                }
            } else {
                ShapeKind::Disk {
                    radius: rng.gen_range(cfg.min_size..=cfg.max_size) / 2.0,
                }
            };
            let color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let velocity = (symmetric(&mut rng, cfg.max_velocity), symmetric(&mut rng, cfg.max_velocity));
            // centred in the frame at mid-sequence
            let centre = (rng.gen_range(0.0..cfg.height as f64), rng.gen_range(0.0..cfg.width as f64));
            MovingShape {
                kind,
                color,
                start: (centre.0 - velocity.0 * mid, centre.1 - velocity.1 * mid),
                velocity,
            }
        })
        .collect();
    let scene = Scene {
        height: cfg.height,
        width: cfg.width,
        background,
        shapes,
    };
    let sharp: Vec<Tensor> = (0..cfg.frames).map(|t| scene.render(t as f64)).collect();
    let blurry: Vec<Tensor> = (0..cfg.frames)
        .map(|t| scene.blur(t, cfg.exposure_samples))
        .collect::<Result<_>>()?;
    Ok(SyntheticSequence {
        seed,
        scene,
        sharp: Tensor::stack(&sharp)?,
        blurry: Tensor::stack(&blurry)?,
    })
}

/// `count` sequences with seeds `seed, seed + 1, ...`.
pub fn generate_dataset(seed: u64, count: usize, cfg: &SyntheticConfig) -> Result<Vec<SyntheticSequence>> {
    (0..count as u64).map(|i| generate_sequence(seed.wrapping_add(i), cfg)).collect()
}
