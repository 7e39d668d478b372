//! Flat `key = value` configuration shared by all commands.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! rt60_max = 0.3
//! objective = fpit
//! ```
//!
//! Unknown keys are rejected. Omitted keys keep their defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelShape;
use crate::room::ScenarioRanges;
use crate::scene::SceneSpec;
use crate::stft::StftConfig;
use crate::training::{Objective, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub ref_channel: usize,

    pub sample_rate: u32,
    pub window_length: usize,
    pub hop: usize,

    pub n_mics: usize,
    pub n_speakers: usize,
    pub hidden1: usize,
    pub hidden2: usize,

    pub lr_init: f64,
    pub lr_min: f64,
    pub lr_decay: f64,
    pub plateau_epochs: usize,
    pub clip_threshold: f64,
    pub utterances_per_batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub objective: Objective,

    pub n_scenes: usize,
    pub scene_seconds: f64,
    pub rt60_min: f64,
    pub rt60_max: f64,
    pub overlap_min: f64,
    pub overlap_max: f64,
    pub synthetic_profiles: usize,
    pub source_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = ScenarioRanges::default();
        Self {
            seed: 0,
            ref_channel: 0,
            sample_rate: 16000,
            window_length: 512,
            hop: 256,
            n_mics: 8,
            n_speakers: 2,
            hidden1: 256,
            hidden2: 128,
            lr_init: t.lr_init,
            lr_min: t.lr_min,
            lr_decay: t.lr_decay,
            plateau_epochs: t.plateau_epochs,
            clip_threshold: t.clip_threshold,
            utterances_per_batch: t.utterances_per_batch,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            max_epochs: t.max_epochs,
            objective: Objective::Fpit,
            n_scenes: 100,
            scene_seconds: 4.0,
            rt60_min: s.rt60.0,
            rt60_max: s.rt60.1,
            overlap_min: 0.1,
            overlap_max: 1.0,
            synthetic_profiles: 16,
            source_dir: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpit" => Ok(Objective::Fpit),
            "per-frequency-pit" => Ok(Objective::PerFrequencyPit),
            other => Err(Error::Config(format!(
                "objective {other:?}: expected fpit or per-frequency-pit"
            ))),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl Config {
    /// Sets one key. Returns an error for unknown keys or unparsable values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "ref_channel" => self.ref_channel = parse(key, v)?,
            "sample_rate" => self.sample_rate = parse(key, v)?,
            "window_length" => self.window_length = parse(key, v)?,
            "hop" => self.hop = parse(key, v)?,
            "n_mics" => self.n_mics = parse(key, v)?,
            "n_speakers" => self.n_speakers = parse(key, v)?,
            "hidden1" => self.hidden1 = parse(key, v)?,
            "hidden2" => self.hidden2 = parse(key, v)?,
            "lr_init" => self.lr_init = parse(key, v)?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "plateau_epochs" => self.plateau_epochs = parse(key, v)?,
            "clip_threshold" => self.clip_threshold = parse(key, v)?,
            "utterances_per_batch" => self.utterances_per_batch = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "objective" => self.objective = v.parse()?,
            "n_scenes" => self.n_scenes = parse(key, v)?,
            "scene_seconds" => self.scene_seconds = parse(key, v)?,
            "rt60_min" => self.rt60_min = parse(key, v)?,
            "rt60_max" => self.rt60_max = parse(key, v)?,
            "overlap_min" => self.overlap_min = parse(key, v)?,
            "overlap_max" => self.overlap_max = parse(key, v)?,
            "synthetic_profiles" => self.synthetic_profiles = parse(key, v)?,
            "source_dir" => self.source_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", k + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", k + 1)),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.stft()?;
        self.train_config().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.ref_channel >= self.n_mics {
            return bad(format!("ref_channel {} but n_mics {}", self.ref_channel, self.n_mics));
        }
        if self.n_speakers == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return bad("n_speakers, hidden1 and hidden2 must be positive".into());
        }
        if !(self.rt60_min > 0.0 && self.rt60_min <= self.rt60_max) {
            return bad("need 0 < rt60_min <= rt60_max".into());
        }
        if !(0.1 <= self.overlap_min && self.overlap_min <= self.overlap_max && self.overlap_max <= 1.0) {
            return bad("need 0.1 <= overlap_min <= overlap_max <= 1".into());
        }
        if !(self.scene_seconds > 0.0) {
            return bad("scene_seconds must be positive".into());
        }
        Ok(())
    }

    pub fn stft(&self) -> Result<StftConfig> {
        StftConfig::new(self.window_length, self.hop, self.sample_rate)
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape::new(self.n_mics, self.n_speakers, self.hidden1, self.hidden2)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_init: self.lr_init,
            lr_min: self.lr_min,
            plateau_epochs: self.plateau_epochs,
            lr_decay: self.lr_decay,
            clip_threshold: self.clip_threshold,
            utterances_per_batch: self.utterances_per_batch,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            max_epochs: self.max_epochs,
            seed: self.seed,
            objective: self.objective,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            ranges: ScenarioRanges::default().with_rt60(self.rt60_min, self.rt60_max),
            n_samples: (self.scene_seconds * self.sample_rate as f64).round() as usize,
            sample_rate: self.sample_rate,
            overlap_range: (self.overlap_min, self.overlap_max),
        }
    }
}
