//! Motion offset fields between frames.
//!
//! Offsets are stored as a `[2, H, W]` tensor. Channel 0 is `Δx`, the
//! displacement along the first spatial axis (rows, index `i`); channel 1 is
//! `Δy`, the displacement along the second axis (columns, index `j`). A flow
//! from frame `t` to frame `f` says that content at `(i, j)` in `t` is found
//! at `(i + Δx, j + Δy)` in `f`.

mod estimate;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use estimate::{estimate_block_matching, BlockMatching, ConstantVelocity, FlowEstimator, ZeroFlow};

use crate::error::{arg_err, shape_err, FgstError, Result};
use crate::numerics::{io, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub from_frame: usize,
    pub to_frame: usize,
    pub level: usize,
    offsets: Tensor,
}

impl FlowField {
    pub fn new(from_frame: usize, to_frame: usize, level: usize, offsets: Tensor) -> Result<Self> {
        match offsets.shape() {
            [2, _, _] => Ok(Self {
                from_frame,
                to_frame,
                level,
                offsets,
            }),
            s => shape_err(format!("flow offsets must be [2, H, W], got {s:?}")),
        }
    }

    /// Uniform `(dx, dy)` field at level 0.
    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let plane = height * width;
        let mut data = vec![dx; 2 * plane];
        data[plane..].iter_mut().for_each(|v| *v = dy);
        Self {
            from_frame: 0,
            to_frame: 0,
            level: 0,
            offsets: Tensor::new(vec![2, height, width], data).expect("valid flow shape"),
        }
    }

    pub fn zero(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn with_pair(mut self, from_frame: usize, to_frame: usize) -> Self {
        self.from_frame = from_frame;
        self.to_frame = to_frame;
        self
    }

    pub fn height(&self) -> usize {
        self.offsets.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.offsets.shape()[2]
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    /// Offset `(Δx, Δy)` at `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let plane = self.height() * self.width();
        let p = i * self.width() + j;
        (self.offsets.data()[p], self.offsets.data()[plane + p])
    }

    /// Rounded offset at `(i, j)`.
    pub fn rounded_at(&self, i: usize, j: usize) -> Result<(i64, i64)> {
        round_offset(self.at(i, j))
    }

    pub fn is_zero(&self) -> bool {
        self.offsets.data().iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.offsets.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Shifts every offset by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let plane = self.height() * self.width();
        let mut out = self.clone();
        for (k, v) in out.offsets.data_mut().iter_mut().enumerate() {
            *v += if k < plane { dx } else { dy };
        }
        out
    }

    /// Writes the offsets in the raw tensor format at `path` and a companion
    /// `<path>.txt` holding the line `t f level`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        io::save(path, &self.offsets)?;
        fs::write(
            sidecar(path),
            format!("{} {} {}\n", self.from_frame, self.to_frame, self.level),
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let offsets = io::load(path)?;
        let header = fs::read_to_string(sidecar(path))?;
        let fields: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FgstError::Format(format!("flow header: {e}")))?;
        let &[t, f, level] = fields.as_slice() else {
            return Err(FgstError::Format(format!("flow header {header:?}")));
        };
        Self::new(t, f, level, offsets)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Round half away from zero, per component.
pub fn round_offset(offset: (f64, f64)) -> Result<(i64, i64)> {
    let (dx, dy) = offset;
    if !dx.is_finite() || !dy.is_finite() {
        return Err(FgstError::NonFinite(format!("flow offset ({dx}, {dy})")));
    }
    Ok((dx.round() as i64, dy.round() as i64))
}

/// Average-pools a level-0 field by `2^level` and scales the offsets by the
/// same factor.
pub fn rescale_to_level(flow: &FlowField, level: usize) -> Result<FlowField> {
    if flow.level != 0 {
        return arg_err(format!("rescale expects a level-0 flow, got level {}", flow.level));
    }
    if level == 0 {
        return Ok(flow.clone());
    }
    let s = 1usize << level;
    let (h, w) = (flow.height(), flow.width());
    if h % s != 0 || w % s != 0 {
        return shape_err(format!("{h}x{w} flow not divisible by {s}"));
    }
    let (oh, ow) = (h / s, w / s);
    let src = flow.offsets.data();
    let mut out = vec![0.0; 2 * oh * ow];
    let norm = 1.0 / (s * s) as f64 / s as f64;
    for c in 0..2 {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for a in 0..s {
                    for b in 0..s {
                        acc += src[(c * h + oi * s + a) * w + oj * s + b];
                    }
                }
                out[(c * oh + oi) * ow + oj] = acc * norm;
            }
        }
    }
    Ok(FlowField {
        from_frame: flow.from_frame,
        to_frame: flow.to_frame,
        level,
        offsets: Tensor::new(vec![2, oh, ow], out)?,
    })
}

/// Replicate-clamps `t + offset` into `[0, frames)`.
pub fn clamp_frame(t: usize, offset: i64, frames: usize) -> usize {
    (t as i64 + offset).clamp(0, frames as i64 - 1) as usize
}

/// Temporal neighbourhood `|f - t| <= r` of frame `t`, clamped, in offset order.
pub fn neighbour_frames(t: usize, r: usize, frames: usize) -> Vec<usize> {
    (-(r as i64)..=r as i64).map(|o| clamp_frame(t, o, frames)).collect()
}

/// All flows of one pyramid level, keyed by `(from, to)`.
#[derive(Clone, Debug, Default)]
pub struct FlowSet {
    level: usize,
    fields: BTreeMap<(usize, usize), FlowField>,
}

impl FlowSet {
    pub fn new(level: usize) -> Self {
        Self {
            level,
            fields: BTreeMap::new(),
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn insert(&mut self, flow: FlowField) -> Result<()> {
        if flow.level != self.level {
            return arg_err(format!(
                "flow at level {} inserted into level-{} set",
                flow.level, self.level
            ));
        }
        self.fields.insert((flow.from_frame, flow.to_frame), flow);
        Ok(())
    }

    /// Flow from `t` to `f`.
    pub fn get(&self, t: usize, f: usize) -> Result<&FlowField> {
        self.fields
            .get(&(t, f))
            .ok_or(FgstError::MissingFlow {
                from: t,
                to: f,
                level: self.level,
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &FlowField> {
        self.fields.values()
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Builds a set where every pair `(t, f)` with `|f - t| <= r` (after
    /// clamping) plus `(t, t - 1)` carries the uniform offset `(f - t) * velocity`.
    pub fn uniform(frames: usize, height: usize, width: usize, r: usize, velocity: (f64, f64)) -> Self {
        let mut set = Self::new(0);
        for (t, f) in required_pairs(frames, r) {
            let k = f as f64 - t as f64;
            let field = FlowField::constant(height, width, k * velocity.0, k * velocity.1).with_pair(t, f);
            set.fields.insert((t, f), field);
        }
        set
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            level: self.level,
            fields: self
                .fields
                .iter()
                .map(|(k, f)| (*k, if k.0 == k.1 { f.clone() } else { f.translated(dx, dy) }))
                .collect(),
        }
    }
}

/// Frame pairs the network reads: attention neighbourhoods and the
/// previous-frame pair used for recurrent warping.
pub fn required_pairs(frames: usize, r: usize) -> Vec<(usize, usize)> {
    let mut pairs = std::collections::BTreeSet::new();
    for t in 0..frames {
        for f in neighbour_frames(t, r, frames) {
            pairs.insert((t, f));
        }
        if t > 0 {
            pairs.insert((t, t - 1));
        }
    }
    pairs.into_iter().collect()
}

/// Flow sets for levels `0..=max_level`, all derived from one set of level-0
/// estimates.
#[derive(Clone, Debug)]
pub struct FlowPyramid {
    levels: Vec<FlowSet>,
}

impl FlowPyramid {
    pub fn from_level0(base: FlowSet, max_level: usize) -> Result<Self> {
        if base.level != 0 {
            return arg_err("pyramid base must be level 0");
        }
        let mut levels = Vec::with_capacity(max_level + 1);
        for level in 1..=max_level {
            let mut set = FlowSet::new(level);
            for f in base.iter() {
                set.insert(rescale_to_level(f, level)?)?;
            }
            levels.push(set);
        }
        levels.insert(0, base);
        Ok(Self { levels })
    }

    /// Estimates every required pair of `video` (`[T, C, H, W]`) at level 0 and
    /// rescales to each level. Self pairs are exact zero fields.
    pub fn estimate(
        video: &Tensor,
        estimator: &dyn FlowEstimator,
        r: usize,
        max_level: usize,
    ) -> Result<Self> {
        let (frames, _, h, w) = video.dims4()?;
        let mut base = FlowSet::new(0);
        let slices: Vec<Tensor> = (0..frames)
            .map(|t| video.slice_outer(t))
            .collect::<Result<_>>()?;
        for (t, f) in required_pairs(frames, r) {
            let field = if t == f {
                FlowField::zero(h, w)
            } else {
                let offsets = estimator.estimate(t, f, &slices[t], &slices[f])?;
                FlowField::new(0, 0, 0, offsets)?
            };
            base.insert(field.with_pair(t, f))?;
        }
        Self::from_level0(base, max_level)
    }

    pub fn level(&self, level: usize) -> Result<&FlowSet> {
        self.levels
            .get(level)
            .ok_or_else(|| FgstError::InvalidArgument(format!("no flow level {level}")))
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}
