//! Synthetic token → waveform corpus.
//!
//! Every token owns a fixed sound: a harmonic tone whose pitch rises with the
//! token id, a per-token spectral tilt and a faint broadband noise floor.
//! An utterance is its tokens' sounds concatenated. The corpus seed only
//! picks the token sequences, so the token → sound map is shared across
//! corpora and learnable from any of them.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_config, Result};
use crate::signal::Waveform;

pub const HARMONICS: usize = 4;
const BASE_PITCH_HZ: f64 = 150.0;
const PITCH_OCTAVES: f64 = 2.5;
const NOISE_LEVEL: f64 = 0.02;
const FADE_SECS: f64 = 0.005;
const PEAK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub size: usize,
    pub vocab: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub token_duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            size: 64,
            vocab: 16,
            min_duration: 1.0,
            max_duration: 3.0,
            token_duration: 0.1,
            sample_rate: 16000,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn token_samples(&self) -> usize {
        (self.token_duration * self.sample_rate as f64).round() as usize
    }

    /// Inclusive range of token counts whose durations fit the bounds.
    pub fn token_count_range(&self) -> Result<(usize, usize)> {
        if self.size == 0 {
            return Err(invalid_config!("corpus size must be at least 1"));
        }
        if self.vocab == 0 {
            return Err(invalid_config!("vocabulary must be non-empty"));
        }
        if self.sample_rate == 0 {
            return Err(invalid_config!("sample rate must be positive"));
        }
        if !(self.token_duration > 0.0) || self.token_samples() == 0 {
            return Err(invalid_config!("token duration {} s is too short", self.token_duration));
        }
        if !(self.min_duration > 0.0 && self.min_duration <= self.max_duration && self.max_duration.is_finite()) {
            return Err(invalid_config!(
                "duration bounds [{}, {}] are not a valid interval",
                self.min_duration,
                self.max_duration
            ));
        }
        let lo = (self.min_duration / self.token_duration - 1e-9).ceil().max(1.0) as usize;
        let hi = (self.max_duration / self.token_duration + 1e-9).floor() as usize;
        if lo > hi {
            return Err(invalid_config!(
                "no whole number of {} s tokens fits in [{}, {}] s",
                self.token_duration,
                self.min_duration,
                self.max_duration
            ));
        }
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub waveform: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

pub fn token_pitch(token: usize, vocab: usize) -> f64 {
    BASE_PITCH_HZ * 2f64.powf(PITCH_OCTAVES * token as f64 / vocab as f64)
}

/// The fixed sound of `token`, `token_samples()` long, peak `0.5`.
pub fn token_pattern(token: usize, spec: &CorpusSpec) -> Vec<f64> {
    let n = spec.token_samples();
    let sr = spec.sample_rate as f64;
    let f0 = token_pitch(token, spec.vocab);
    // odd tokens emphasise upper harmonics
    let tilt = if token % 2 == 1 { 0.5 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(0x70c3_u64 ^ (token as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.gen_range(0.0..TAU)).collect();
    let fade = ((FADE_SECS * sr) as usize).min(n / 2).max(1);
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let mut v = 0.0;
            for (h, ph) in phases.iter().enumerate() {
                let k = (h + 1) as f64;
                let f = f0 * k;
                if f < sr / 2.0 {
                    v += (TAU * f * t + ph).sin() / k.powf(tilt);
                }
            }
            v + NOISE_LEVEL * rng.gen_range(-1.0..1.0)
        })
        .collect();
    for i in 0..fade {
        let g = i as f64 / fade as f64;
        out[i] *= g;
        out[n - 1 - i] *= g;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v *= PEAK / peak;
        }
    }
    out
}

pub fn render(tokens: &[usize], spec: &CorpusSpec) -> Result<Waveform> {
    let patterns: Vec<Vec<f64>> = (0..spec.vocab).map(|k| token_pattern(k, spec)).collect();
    render_with(tokens, &patterns, spec)
}

fn render_with(tokens: &[usize], patterns: &[Vec<f64>], spec: &CorpusSpec) -> Result<Waveform> {
    let mut samples = Vec::with_capacity(tokens.len() * spec.token_samples());
    for &t in tokens {
        let p = patterns
            .get(t)
            .ok_or_else(|| crate::error::invalid_input!("token {t} outside vocabulary of {}", spec.vocab))?;
        samples.extend_from_slice(p);
    }
    Waveform::new(samples, spec.sample_rate)
}

pub fn make_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    let (lo, hi) = spec.token_count_range()?;
    let patterns: Vec<Vec<f64>> = (0..spec.vocab).map(|k| token_pattern(k, spec)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut utterances = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let count = rng.gen_range(lo..=hi);
        let tokens: Vec<usize> = (0..count).map(|_| rng.gen_range(0..spec.vocab)).collect();
        let waveform = render_with(&tokens, &patterns, spec)?;
        utterances.push(Utterance { tokens, waveform });
    }
    Ok(SyntheticCorpus {
        spec: *spec,
        utterances,
    })
}
