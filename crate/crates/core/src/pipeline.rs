//! Glue between a [`RunConfig`], the trainer and checkpoints.

use crate::corpus::make_corpus;
use crate::error::{invalid_input, Result};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::RunConfig;
use crate::io::report::Report;
use crate::mel::NormStats;
use crate::phase::GriffinLimConfig;
use crate::signal::Waveform;
use crate::train::{self, default_frame_cap, Dataset, StepLog, TrainMode, Trainer};

/// Builds the corpus and training set described by `cfg`. `stats = None`
/// fits normalization on the corpus.
pub fn prepare_dataset(cfg: &RunConfig, stats: Option<NormStats>) -> Result<Dataset> {
    let frontend = cfg.validate()?;
    let corpus = make_corpus(&cfg.corpus_spec())?;
    let reference = match cfg.train.mode {
        TrainMode::Joint => Some(cfg.train.train_gl()),
        TrainMode::FrequencyOnly => None,
    };
    Dataset::prepare(&corpus, frontend, stats, reference)
}

pub fn start_trainer(cfg: &RunConfig) -> Result<Trainer> {
    let data = prepare_dataset(cfg, None)?;
    Trainer::new(cfg.train, cfg.dims(), data)
}

/// Rebuilds the trainer saved in `ck` under `cfg`. The continuation matches
/// an uninterrupted run only when `cfg` equals the saved config.
pub fn resume_trainer(ck: &Checkpoint, cfg: &RunConfig) -> Result<Trainer> {
    if cfg.dims() != ck.config.dims() {
        return Err(invalid_input!("checkpoint model dimensions differ from the config"));
    }
    let data = prepare_dataset(cfg, Some(ck.stats.clone()))?;
    Trainer::resume(cfg.train, data, ck.params.clone(), Some(ck.adam.clone()), ck.step)
}

pub fn capture(cfg: &RunConfig, trainer: &Trainer) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        step: trainer.step,
        params: trainer.params.clone(),
        adam: trainer.adam.clone(),
        stats: trainer.data.stats.clone(),
    }
}

pub fn step_report(s: &StepLog) -> Report {
    Report::new()
        .int("step", s.step as u64)
        .int("epoch", s.epoch as u64)
        .num("lr", s.lr)
        .num("loss_f", s.loss_f)
        .opt_num("loss_t", s.loss_t)
        .num("total", s.total)
}

/// Whitespace- or comma-separated token ids.
pub fn parse_tokens(text: &str, vocab: usize) -> Result<Vec<usize>> {
    let tokens = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            let t: usize = s.parse().map_err(|_| invalid_input!("token '{s}' is not a non-negative integer"))?;
            if t >= vocab {
                return Err(invalid_input!("token {t} outside vocabulary of {vocab}"));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    if tokens.is_empty() {
        return Err(invalid_input!("token sequence is empty"));
    }
    Ok(tokens)
}

/// Run-time path from a checkpoint. `frame_cap = None` uses the frame
/// count a corpus utterance of the same length would have.
pub fn synthesize(
    ck: &Checkpoint,
    tokens: &[usize],
    frame_cap: Option<usize>,
    gl: &GriffinLimConfig,
) -> Result<Waveform> {
    let frontend = ck.config.validate()?;
    let cap = frame_cap.unwrap_or_else(|| default_frame_cap(tokens.len(), &ck.config.corpus_spec(), &frontend));
    train::synthesize(&ck.params, &ck.stats, &frontend, tokens, cap, gl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        for kv in [
            "sample_rate=8000",
            "win_length=128",
            "hop_length=32",
            "fft_size=128",
            "n_mels=16",
            "fmax=4000",
            "corpus.size=6",
            "corpus.vocab=5",
            "corpus.min_duration=0.1",
            "corpus.max_duration=0.2",
            "corpus.token_duration=0.05",
            "model.embed=4",
            "model.encoder=6",
            "model.decoder=8",
            "train.steps=4",
            "train.batch_size=3",
        ] {
            c.apply(kv).unwrap();
        }
        c
    }

    #[test]
    fn checkpoint_resume_continues_bit_identically() {
        let cfg = tiny();
        let mut straight = start_trainer(&cfg).unwrap();
        let full = straight.run(|_| {}).unwrap();

        let mut first = start_trainer(&cfg).unwrap();
        first.train_step().unwrap();
        first.train_step().unwrap();
        let ck = capture(&cfg, &first);
        let ck = crate::io::checkpoint::decode_checkpoint(&crate::io::checkpoint::encode_checkpoint(&ck)).unwrap();
        let mut resumed = resume_trainer(&ck, &cfg).unwrap();
        let rest = resumed.run(|_| {}).unwrap();
        assert_eq!(rest, full[2..]);
        assert_eq!(resumed.params, straight.params);
    }

    #[test]
    fn token_parsing() {
        assert_eq!(parse_tokens("3 1, 4 1", 5).unwrap(), vec![3, 1, 4, 1]);
        assert!(parse_tokens("3 9", 5).is_err());
        assert!(parse_tokens("  ", 5).is_err());
        assert!(parse_tokens("a", 5).is_err());
    }

    #[test]
    fn synthesis_from_checkpoint_is_deterministic() {
        let cfg = tiny();
        let mut t = start_trainer(&cfg).unwrap();
        t.run(|_| {}).unwrap();
        let ck = capture(&cfg, &t);
        let gl = GriffinLimConfig::new(4, Default::default());
        let a = synthesize(&ck, &[1, 2, 3], None, &gl).unwrap();
        assert_eq!(a, synthesize(&ck, &[1, 2, 3], None, &gl).unwrap());
        assert!(synthesize(&ck, &[1, 2, 3], Some(0), &gl).is_err());
    }
}
