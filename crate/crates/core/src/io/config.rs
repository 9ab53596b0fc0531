//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected, and [`RunConfig::validate`] checks every section before any
//! work starts.

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::corpus::CorpusSpec;
use crate::error::{invalid_config, Result};
use crate::mel::{MelFrontend, DEFAULT_N_MELS};
use crate::model::ModelDims;
use crate::phase::{GriffinLimConfig, InitPhase};
use crate::signal::{StftConfig, WindowKind};
use crate::train::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Run-time Griffin-Lim settings (reconstruction, synthesis, evaluation).
    pub gl: GriffinLimConfig,
    pub corpus: CorpusSpec,
    pub embed: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub train: TrainConfig,
    /// Optional file receiving one JSON line per training step.
    pub log_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            sample_rate: 16000,
            stft: StftConfig::default(),
            n_mels: DEFAULT_N_MELS,
            fmin: 0.0,
            fmax: 8000.0,
            gl: GriffinLimConfig::runtime(),
            corpus: CorpusSpec::default(),
            embed: dims.embed,
            encoder: dims.encoder,
            decoder: dims.decoder,
            train: TrainConfig::default(),
            log_path: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "sample_rate",
    "win_length",
    "hop_length",
    "fft_size",
    "window",
    "n_mels",
    "fmin",
    "fmax",
    "gl.iterations",
    "gl.init",
    "corpus.size",
    "corpus.vocab",
    "corpus.min_duration",
    "corpus.max_duration",
    "corpus.token_duration",
    "corpus.seed",
    "model.embed",
    "model.encoder",
    "model.decoder",
    "train.steps",
    "train.batch_size",
    "train.lr_start",
    "train.lr_end",
    "train.decay_start",
    "train.beta1",
    "train.beta2",
    "train.adam_epsilon",
    "train.l2_weight",
    "train.lambda",
    "train.gl_iterations",
    "train.mode",
    "train.seed",
    "log_path",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid_config!("value '{value}' for '{key}' is not a valid number"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid_config!("line {}: expected key = value", lineno + 1))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| invalid_config!("override '{assignment}' is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sample_rate" => self.sample_rate = num(key, value)?,
            "win_length" => self.stft.win_length = num(key, value)?,
            "hop_length" => self.stft.hop_length = num(key, value)?,
            "fft_size" => self.stft.fft_size = num(key, value)?,
            "window" => self.stft.window = WindowKind::parse(value)?,
            "n_mels" => self.n_mels = num(key, value)?,
            "fmin" => self.fmin = num(key, value)?,
            "fmax" => self.fmax = num(key, value)?,
            "gl.iterations" => self.gl.iterations = num(key, value)?,
            "gl.init" => self.gl.init = InitPhase::parse(value)?,
            "corpus.size" => self.corpus.size = num(key, value)?,
            "corpus.vocab" => self.corpus.vocab = num(key, value)?,
            "corpus.min_duration" => self.corpus.min_duration = num(key, value)?,
            "corpus.max_duration" => self.corpus.max_duration = num(key, value)?,
            "corpus.token_duration" => self.corpus.token_duration = num(key, value)?,
            "corpus.seed" => self.corpus.seed = num(key, value)?,
            "model.embed" => self.embed = num(key, value)?,
            "model.encoder" => self.encoder = num(key, value)?,
            "model.decoder" => self.decoder = num(key, value)?,
            "train.steps" => self.train.steps = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.lr_start" => self.train.lr_start = num(key, value)?,
            "train.lr_end" => self.train.lr_end = num(key, value)?,
            "train.decay_start" => {
                self.train.decay_start = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "train.beta1" => self.train.adam.beta1 = num(key, value)?,
            "train.beta2" => self.train.adam.beta2 = num(key, value)?,
            "train.adam_epsilon" => self.train.adam.epsilon = num(key, value)?,
            "train.l2_weight" => self.train.adam.l2_weight = num(key, value)?,
            "train.lambda" => self.train.lambda = num(key, value)?,
            "train.gl_iterations" => self.train.gl_train_iterations = num(key, value)?,
            "train.mode" => self.train.mode = TrainMode::parse(value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "log_path" => self.log_path = if value.is_empty() { None } else { Some(value.to_string()) },
            _ => return Err(invalid_config!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let lines: Vec<(&str, String)> = vec![
            ("sample_rate", self.sample_rate.to_string()),
            ("win_length", self.stft.win_length.to_string()),
            ("hop_length", self.stft.hop_length.to_string()),
            ("fft_size", self.stft.fft_size.to_string()),
            ("window", self.stft.window.name().to_string()),
            ("n_mels", self.n_mels.to_string()),
            ("fmin", format!("{:?}", self.fmin)),
            ("fmax", format!("{:?}", self.fmax)),
            ("gl.iterations", self.gl.iterations.to_string()),
            ("gl.init", self.gl.init.name()),
            ("corpus.size", self.corpus.size.to_string()),
            ("corpus.vocab", self.corpus.vocab.to_string()),
            ("corpus.min_duration", format!("{:?}", self.corpus.min_duration)),
            ("corpus.max_duration", format!("{:?}", self.corpus.max_duration)),
            ("corpus.token_duration", format!("{:?}", self.corpus.token_duration)),
            ("corpus.seed", self.corpus.seed.to_string()),
            ("model.embed", self.embed.to_string()),
            ("model.encoder", self.encoder.to_string()),
            ("model.decoder", self.decoder.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_start", format!("{:?}", t.lr_start)),
            ("train.lr_end", format!("{:?}", t.lr_end)),
            (
                "train.decay_start",
                t.decay_start.map_or_else(|| "auto".to_string(), |d| d.to_string()),
            ),
            ("train.beta1", format!("{:?}", t.adam.beta1)),
            ("train.beta2", format!("{:?}", t.adam.beta2)),
            ("train.adam_epsilon", format!("{:?}", t.adam.epsilon)),
            ("train.l2_weight", format!("{:?}", t.adam.l2_weight)),
            ("train.lambda", format!("{:?}", t.lambda)),
            ("train.gl_iterations", t.gl_train_iterations.to_string()),
            ("train.mode", t.mode.name().to_string()),
            ("train.seed", t.seed.to_string()),
            ("log_path", self.log_path.clone().unwrap_or_default()),
        ];
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.corpus.vocab,
            embed: self.embed,
            encoder: self.encoder,
            decoder: self.decoder,
            n_mels: self.n_mels,
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            sample_rate: self.sample_rate,
            ..self.corpus
        }
    }

    pub fn frontend(&self) -> Result<MelFrontend> {
        MelFrontend::new(self.stft, self.sample_rate, self.n_mels, self.fmin, self.fmax)
    }

    /// Checks every section; returns the analysis front end it implies.
    pub fn validate(&self) -> Result<Arc<MelFrontend>> {
        self.stft.validate()?;
        let fe = self.frontend()?;
        self.dims().validate()?;
        self.train.validate()?;
        self.corpus_spec().token_count_range()?;
        let shortest = (self.corpus_spec().token_count_range()?.0) * self.corpus_spec().token_samples();
        if shortest < self.stft.win_length {
            return Err(invalid_config!(
                "shortest utterance ({shortest} samples) is shorter than one analysis window"
            ));
        }
        Ok(Arc::new(fe))
    }
}
