use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{FgstError, Result};

/// Architecture and data extents of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Training sequence length.
    pub frames: usize,
    /// Feature width at full resolution.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Temporal radius of the key sampling.
    pub radius: usize,
    /// Attention window size (odd).
    pub window: usize,
    pub heads: usize,
    /// Number of encoder stages; level `l` has `2^l * channels` channels.
    pub levels: usize,
    pub fgabs_per_stage: usize,
    pub io_res_blocks: usize,
    /// Recurrent embedding of the previous frame's output into the query.
    pub recurrent: bool,
    pub seed: u64,
    /// Block-matching flow estimator; `flow_search = 0` selects zero flow.
    pub flow_block: usize,
    pub flow_search: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            channels: 8,
            height: 32,
            width: 32,
            radius: 1,
            window: 3,
            heads: 2,
            levels: 2,
            fgabs_per_stage: 2,
            io_res_blocks: 5,
            recurrent: true,
            seed: 0,
            flow_block: 4,
            flow_search: 2,
        }
    }
}

fn invalid(msg: impl Into<String>) -> FgstError {
    FgstError::InvalidArgument(msg.into())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("window", self.window),
            ("heads", self.heads),
            ("fgabs_per_stage", self.fgabs_per_stage),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{k} must be positive")));
            }
        }
        if self.window.is_multiple_of(2) {
            return Err(invalid(format!("window must be odd, got {}", self.window)));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        self.check_extents(self.height, self.width)?;
        if self.flow_search > 0 && self.flow_block == 0 {
            return Err(invalid("flow_block must be positive"));
        }
        Ok(())
    }

    pub fn check_extents(&self, height: usize, width: usize) -> Result<()> {
        let unit = 1usize << self.levels;
        if !height.is_multiple_of(unit) || !width.is_multiple_of(unit) {
            return Err(invalid(format!(
                "{height}x{width} frames not divisible by 2^{} = {unit}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Channel width of level `l`.
    pub fn width_at(&self, level: usize) -> usize {
        self.channels << level
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| invalid(format!("bad value {value:?} for {key}")))
        }
        match key {
            "frames" => self.frames = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "radius" => self.radius = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "levels" => self.levels = num(key, value)?,
            "fgabs_per_stage" => self.fgabs_per_stage = num(key, value)?,
            "io_res_blocks" => self.io_res_blocks = num(key, value)?,
            "recurrent" => self.recurrent = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "flow_block" => self.flow_block = num(key, value)?,
            "flow_search" => self.flow_search = num(key, value)?,
            _ => return Err(invalid(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        &[
            "frames",
            "channels",
            "height",
            "width",
            "radius",
            "window",
            "heads",
            "levels",
            "fgabs_per_stage",
            "io_res_blocks",
            "recurrent",
            "seed",
            "flow_block",
            "flow_search",
        ]
    }

    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let vals = [
            self.frames.to_string(),
            self.channels.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            self.radius.to_string(),
            self.window.to_string(),
            self.heads.to_string(),
            self.levels.to_string(),
            self.fgabs_per_stage.to_string(),
            self.io_res_blocks.to_string(),
            self.recurrent.to_string(),
            self.seed.to_string(),
            self.flow_block.to_string(),
            self.flow_search.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::keys().iter().zip(vals) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Splits `key = value` text into pairs, skipping blank lines and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(FgstError::Format(format!("line {}: expected `key = value`", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(FgstError::Format(format!("line {}: empty key or value", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl FromStr for ModelConfig {
    type Err = FgstError;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
