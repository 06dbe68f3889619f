use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fgst::evaluation::{toy_model_config, LrSchedule, SyntheticConfig, ToyTask, TrainConfig};
use fgst::model::{parse_pairs, ModelConfig};

use crate::error::CliError;

/// Fault injected into the oracle check to prove it can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    DropKey,
}

/// Every setting of a run. Model keys are those of [`ModelConfig`]; the rest
/// are listed in [`RUN_KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SyntheticConfig,
    /// Seeds model initialisation, data generation and batch order.
    pub seed: u64,

    pub iterations: usize,
    pub lr: f64,
    /// 0 keeps the rate constant.
    pub lr_halve_every: usize,
    pub batch: usize,
    pub train_sequences: usize,
    pub heldout_sequences: usize,

    pub check_cases: usize,
    pub oracle_tol: f64,
    pub grad_tol: f64,
    pub grad_step: f64,
    pub grad_frames: usize,
    pub grad_size: usize,
    /// Largest-gradient entries probed per tensor; 0 probes one random sign
    /// direction over all entries instead.
    pub grad_entries: usize,
    pub fault: Fault,

    /// Token counts `T * H * W` of the bench sweep.
    pub bench_tokens: Vec<usize>,
    pub bench_side: usize,
    pub bench_repeats: usize,

    pub dump_frame: usize,

    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

pub const RUN_KEYS: &[&str] = &[
    "shapes",
    "exposure_samples",
    "max_velocity",
    "max_pan",
    "min_size",
    "max_size",
    "texture_amplitude",
    "texture_frequency",
    "iterations",
    "lr",
    "lr_halve_every",
    "batch",
    "train_sequences",
    "heldout_sequences",
    "check_cases",
    "oracle_tol",
    "grad_tol",
    "grad_step",
    "grad_frames",
    "grad_size",
    "grad_entries",
    "fault",
    "bench_tokens",
    "bench_side",
    "bench_repeats",
    "dump_frame",
    "checkpoint",
    "input",
    "target",
];

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToyTask::default();
        Self {
            model: toy_model_config(),
            data: toy.data,
            seed: 0,
            iterations: toy.train.iterations,
            lr: toy.train.schedule.base,
            lr_halve_every: 0,
            batch: toy.train.batch,
            train_sequences: toy.train_sequences,
            heldout_sequences: toy.heldout_sequences,
            check_cases: 50,
            oracle_tol: 1e-10,
            grad_tol: 1e-5,
            grad_step: 1e-5,
            grad_frames: 3,
            grad_size: 16,
            grad_entries: 3,
            fault: Fault::None,
            bench_tokens: vec![512, 1024, 2048, 4096],
            bench_side: 16,
            bench_repeats: 3,
            dump_frame: 0,
            checkpoint: None,
            input: None,
            target: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let pairs = parse_pairs(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.model.seed = self.seed;
            }
            "shapes" => self.data.shapes = parse(key, value)?,
            "exposure_samples" => self.data.exposure_samples = parse(key, value)?,
            "max_velocity" => self.data.max_velocity = parse(key, value)?,
            "max_pan" => self.data.max_pan = parse(key, value)?,
            "min_size" => self.data.min_size = parse(key, value)?,
            "max_size" => self.data.max_size = parse(key, value)?,
            "texture_amplitude" => self.data.texture_amplitude = parse(key, value)?,
            "texture_frequency" => self.data.texture_frequency = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_halve_every" => self.lr_halve_every = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "train_sequences" => self.train_sequences = parse(key, value)?,
            "heldout_sequences" => self.heldout_sequences = parse(key, value)?,
            "check_cases" => self.check_cases = parse(key, value)?,
            "oracle_tol" => self.oracle_tol = parse(key, value)?,
            "grad_tol" => self.grad_tol = parse(key, value)?,
            "grad_step" => self.grad_step = parse(key, value)?,
            "grad_frames" => self.grad_frames = parse(key, value)?,
            "grad_size" => self.grad_size = parse(key, value)?,
            "grad_entries" => self.grad_entries = parse(key, value)?,
            "fault" => {
                self.fault = match value {
                    "none" => Fault::None,
                    "drop_key" => Fault::DropKey,
                    _ => return Err(CliError::Usage(format!("unknown fault {value:?}"))),
                }
            }
            "bench_tokens" => {
                self.bench_tokens = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| parse(key, s.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "bench_side" => self.bench_side = parse(key, value)?,
            "bench_repeats" => self.bench_repeats = parse(key, value)?,
            "dump_frame" => self.dump_frame = parse(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "input" => self.input = Some(PathBuf::from(value)),
            "target" => self.target = Some(PathBuf::from(value)),
            _ if ModelConfig::keys().contains(&key) => {
                self.model.set(key, value).map_err(|e| CliError::Usage(e.to_string()))?
            }
            _ => {
                let known: Vec<&str> = ModelConfig::keys().iter().chain(RUN_KEYS).copied().collect();
                return Err(CliError::Usage(format!(
                    "unknown config key {key:?}; known keys: {}",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Checks value ranges that do not depend on the command.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        self.model.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.grad_step > 0.0 && self.grad_tol > 0.0 && self.oracle_tol > 0.0) {
            return bad("tolerances and step sizes must be positive".into());
        }
        if self.bench_side == 0 || self.bench_repeats == 0 {
            return bad("bench_side and bench_repeats must be positive".into());
        }
        let plane = self.bench_side * self.bench_side;
        if let Some(n) = self.bench_tokens.iter().find(|&&n| n == 0 || n % plane != 0) {
            return bad(format!("bench token count {n} is not a positive multiple of {plane}"));
        }
        Ok(())
    }

    pub fn toy_task(&self) -> ToyTask {
        ToyTask {
            model: self.model.clone(),
            data: self.data.clone(),
            train_sequences: self.train_sequences,
            heldout_sequences: self.heldout_sequences,
            data_seed: self.seed,
            train: TrainConfig {
                iterations: self.iterations,
                schedule: LrSchedule {
                    base: self.lr,
                    halve_every: (self.lr_halve_every > 0).then_some(self.lr_halve_every),
                },
                batch: self.batch,
                seed: self.seed,
            },
        }
    }

    /// The resolved settings as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        let d = &self.data;
        let list = self.bench_tokens.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        let fault = match self.fault {
            Fault::None => "none",
            Fault::DropKey => "drop_key",
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let rows: Vec<(&str, Option<String>)> = vec![
            ("shapes", Some(d.shapes.to_string())),
            ("exposure_samples", Some(d.exposure_samples.to_string())),
            ("max_velocity", Some(d.max_velocity.to_string())),
            ("max_pan", Some(d.max_pan.to_string())),
            ("min_size", Some(d.min_size.to_string())),
            ("max_size", Some(d.max_size.to_string())),
            ("texture_amplitude", Some(d.texture_amplitude.to_string())),
            ("texture_frequency", Some(d.texture_frequency.to_string())),
            ("iterations", Some(self.iterations.to_string())),
            ("lr", Some(self.lr.to_string())),
            ("lr_halve_every", Some(self.lr_halve_every.to_string())),
            ("batch", Some(self.batch.to_string())),
            ("train_sequences", Some(self.train_sequences.to_string())),
            ("heldout_sequences", Some(self.heldout_sequences.to_string())),
            ("check_cases", Some(self.check_cases.to_string())),
            ("oracle_tol", Some(self.oracle_tol.to_string())),
            ("grad_tol", Some(self.grad_tol.to_string())),
            ("grad_step", Some(self.grad_step.to_string())),
            ("grad_frames", Some(self.grad_frames.to_string())),
            ("grad_size", Some(self.grad_size.to_string())),
            ("grad_entries", Some(self.grad_entries.to_string())),
            ("fault", Some(fault.to_string())),
            ("bench_tokens", Some(if list.is_empty() { "none".into() } else { list })),
            ("bench_side", Some(self.bench_side.to_string())),
            ("bench_repeats", Some(self.bench_repeats.to_string())),
            ("dump_frame", Some(self.dump_frame.to_string())),
            ("checkpoint", path(&self.checkpoint)),
            ("input", path(&self.input)),
            ("target", path(&self.target)),
        ];
        for (k, v) in rows {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "7").unwrap();
        cfg.set("bench_tokens", "256,512").unwrap();
        cfg.set("fault", "drop_key").unwrap();
        cfg.set("input", "frames.fgt").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, cfg.to_text()).unwrap();
        assert_eq!(RunConfig::from_file(&path).unwrap(), cfg);
        assert_eq!(cfg.model.seed, 7);
    }

    #[test]
    fn every_run_key_is_settable() {
        let text = RunConfig::default().to_text();
        let written: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        for k in RUN_KEYS.iter().filter(|k| !["checkpoint", "input", "target"].contains(k)) {
            assert!(written.contains(k), "{k} missing from text form");
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("colour", "1"), Err(CliError::Usage(_))));
        assert!(matches!(cfg.set("lr", "fast"), Err(CliError::Usage(_))));
        assert!(matches!(cfg.set_pair("lr"), Err(CliError::Usage(_))));
        cfg.set("bench_tokens", "").unwrap();
        assert!(cfg.bench_tokens.is_empty());
        cfg.set("window", "2").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
    }
}
