//! Mel filterbank, mel features, per-channel normalization, and the
//! mel-to-linear amplitude estimator that feeds Griffin-Lim.
//!
//! Features are linear-amplitude mel energies (no log compression), so the
//! estimator can be the filterbank pseudo-inverse followed by a clamp at zero.

use nalgebra::DMatrix;

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::matrix::Matrix;
use crate::signal::{amplitude, AmplitudeSpectrogram, StftConfig, StftPlan, Waveform};

pub const DEFAULT_N_MELS: usize = 80;

/// Singular values below this are treated as zero when forming the pseudo-inverse.
const PINV_EPS: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// n_mels × bins.
    weights: Matrix<f64>,
    weights_t: Matrix<f64>,
    /// Pseudo-inverse stored transposed: n_mels × bins.
    pinv_t: Matrix<f64>,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelFilterbank {
    pub fn weights(&self) -> &Matrix<f64> {
        &self.weights
    }

    /// Transposed pseudo-inverse (n_mels × bins): `amplitude_row = mel_row · pinv_t`.
    pub fn pinv_t(&self) -> &Matrix<f64> {
        &self.pinv_t
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Filter centre frequencies in Hz.
    pub fn center_frequencies(&self) -> Vec<f64> {
        mel_points(self.n_mels, self.fmin, self.fmax)[1..=self.n_mels].to_vec()
    }

    /// Index of the largest weight of each filter.
    pub fn peak_bins(&self) -> Vec<usize> {
        self.weights
            .iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::MIN), |best, (k, &w)| if w > best.1 { (k, w) } else { best })
                    .0
            })
            .collect()
    }
}

fn mel_points(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular HTK-scale filters with unit peak, centres equally spaced in mel.
pub fn build_filterbank(
    n_mels: usize,
    sample_rate: u32,
    fft_size: usize,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels == 0 {
        return Err(invalid_config!("n_mels must be at least 1"));
    }
    if sample_rate == 0 || fft_size < 2 {
        return Err(invalid_config!("sample_rate and fft_size must be positive"));
    }
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(invalid_config!(
            "need 0 <= fmin < fmax <= {nyquist}, got fmin={fmin} fmax={fmax}"
        ));
    }
    let bins = fft_size / 2 + 1;
    if n_mels > bins {
        return Err(invalid_config!("{n_mels} mel filters exceed {bins} frequency bins"));
    }
    let hz = mel_points(n_mels, fmin, fmax);
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let weights = Matrix::from_fn(n_mels, bins, |m, k| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (hz[m], hz[m + 1], hz[m + 2]);
        let up = (f - l) / (c - l);
        let down = (r - f) / (r - c);
        up.min(down).max(0.0)
    });
    for (m, row) in weights.iter_rows().enumerate() {
        if !row.iter().any(|&w| w > 0.0) {
            return Err(invalid_config!(
                "mel filter {m} covers no frequency bin; reduce n_mels or increase fft_size"
            ));
        }
    }

    let pinv = DMatrix::from_row_slice(n_mels, bins, weights.as_slice())
        .pseudo_inverse(PINV_EPS)
        .map_err(|e| Error::Numerical(format!("filterbank pseudo-inverse failed: {e}")))?;
    // pinv is bins × n_mels; keep its transpose row-major
    let pinv_t = Matrix::from_fn(n_mels, bins, |m, k| pinv[(k, m)]);

    let fb = MelFilterbank {
        weights_t: weights.transpose(),
        weights,
        pinv_t,
        n_mels,
        sample_rate,
        fft_size,
        fmin,
        fmax,
    };
    if fb.peak_bins().windows(2).any(|p| p[1] <= p[0]) {
        return Err(invalid_config!(
            "mel filter peaks are not strictly increasing; filters are spaced closer than the bin spacing"
        ));
    }
    Ok(fb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::InvalidStats(format!(
                "mean has {} channels, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(i) = std.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidStats(format!("std of channel {i} is {}", std[i])));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidStats("non-finite mean".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Per-channel mean and population standard deviation over every frame
    /// of every raw mel spectrogram in `corpus`.
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a MelSpectrogram>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut all: Vec<&MelSpectrogram> = Vec::new();
        for m in corpus {
            if m.normalized {
                return Err(invalid_input!("statistics must be fitted on raw mel features"));
            }
            if sum.is_empty() {
                sum = vec![0.0; m.channels()];
                sum_sq = vec![0.0; m.channels()];
            } else if m.channels() != sum.len() {
                return Err(invalid_input!("corpus mixes channel counts"));
            }
            for row in m.values.iter_rows() {
                for (s, &x) in sum.iter_mut().zip(row) {
                    *s += x;
                }
            }
            count += m.frames();
            all.push(m);
        }
        if count == 0 {
            return Err(invalid_input!("cannot fit statistics on an empty corpus"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        // second pass for a centred variance
        for m in all {
            for row in m.values.iter_rows() {
                for ((s, &x), &mu) in sum_sq.iter_mut().zip(row).zip(&mean) {
                    *s += (x - mu) * (x - mu);
                }
            }
        }
        let std = sum_sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Self::new(mean, std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// frames × n_mels.
    pub values: Matrix<f64>,
    pub normalized: bool,
    pub stats: Option<NormStats>,
    pub sample_rate: u32,
    pub stft: StftConfig,
}

impl MelSpectrogram {
    /// Unnormalized features with the analysis parameters they came from.
    pub fn raw(values: Matrix<f64>, sample_rate: u32, hop_length: usize, win_length: usize) -> Result<Self> {
        let stft = StftConfig {
            win_length,
            hop_length,
            fft_size: win_length.max(2).next_power_of_two(),
            ..StftConfig::default()
        };
        Self::from_parts(values, false, None, sample_rate, stft)
    }

    pub fn from_parts(
        values: Matrix<f64>,
        normalized: bool,
        stats: Option<NormStats>,
        sample_rate: u32,
        stft: StftConfig,
    ) -> Result<Self> {
        if !values.is_finite() {
            return Err(invalid_input!("mel values must be finite"));
        }
        if normalized {
            match &stats {
                None => return Err(invalid_input!("normalized mel requires stats")),
                Some(s) if s.channels() != values.cols() => {
                    return Err(invalid_input!("stats channel count does not match mel"))
                }
                _ => {}
            }
        } else if values.as_slice().iter().any(|&x| x < 0.0) {
            return Err(invalid_input!("raw mel values must be non-negative"));
        }
        Ok(Self {
            values,
            normalized,
            stats,
            sample_rate,
            stft,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }
}

pub fn mel_spectrum(a: &AmplitudeSpectrogram, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    if a.values.cols() != fb.bins() {
        return Err(invalid_input!(
            "amplitude has {} bins, filterbank expects {}",
            a.values.cols(),
            fb.bins()
        ));
    }
    let values = a.values.matmul(&fb.weights_t)?;
    Ok(MelSpectrogram {
        values,
        normalized: false,
        stats: None,
        sample_rate: a.sample_rate,
        stft: a.config,
    })
}

fn check_stats(m: &MelSpectrogram, stats: &NormStats) -> Result<()> {
    if stats.channels() != m.channels() {
        return Err(invalid_input!(
            "stats have {} channels, mel has {}",
            stats.channels(),
            m.channels()
        ));
    }
    NormStats::new(stats.mean.clone(), stats.std.clone()).map(|_| ())
}

pub fn normalize(m: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    if m.normalized {
        return Err(invalid_input!("mel is already normalized"));
    }
    check_stats(m, stats)?;
    let mut values = m.values.clone();
    for r in 0..values.rows() {
        for ((x, mu), sd) in values.row_mut(r).iter_mut().zip(&stats.mean).zip(&stats.std) {
            *x = (*x - mu) / sd;
        }
    }
    Ok(MelSpectrogram {
        values,
        normalized: true,
        stats: Some(stats.clone()),
        sample_rate: m.sample_rate,
        stft: m.stft,
    })
}

pub fn denormalize(m: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    if !m.normalized {
        return Err(invalid_input!("mel is not normalized"));
    }
    check_stats(m, stats)?;
    let mut values = m.values.clone();
    for r in 0..values.rows() {
        for ((x, mu), sd) in values.row_mut(r).iter_mut().zip(&stats.mean).zip(&stats.std) {
            // predictions can land below the feasible set of raw mel energies
            *x = (*x * sd + mu).max(0.0);
        }
    }
    Ok(MelSpectrogram {
        values,
        normalized: false,
        stats: None,
        sample_rate: m.sample_rate,
        stft: m.stft,
    })
}

/// Linear amplitude estimate `max(0, pinv(W) · mel)` per frame.
pub fn epsilon_amplitude(m: &MelSpectrogram, fb: &MelFilterbank) -> Result<AmplitudeSpectrogram> {
    if m.normalized {
        return Err(invalid_input!("epsilon_amplitude expects raw mel; denormalize first"));
    }
    if m.channels() != fb.n_mels {
        return Err(invalid_input!(
            "mel has {} channels, filterbank has {}",
            m.channels(),
            fb.n_mels
        ));
    }
    let mut values = m.values.matmul(&fb.pinv_t)?;
    for x in values.as_mut_slice() {
        *x = x.max(0.0);
    }
    let config = StftConfig {
        fft_size: fb.fft_size,
        ..m.stft
    };
    AmplitudeSpectrogram::new(values, config, m.sample_rate)
}

/// STFT plan plus filterbank: waveform → raw mel features.
#[derive(Debug, Clone)]
pub struct MelFrontend {
    pub plan: StftPlan,
    pub filterbank: MelFilterbank,
}

impl MelFrontend {
    pub fn new(stft: StftConfig, sample_rate: u32, n_mels: usize, fmin: f64, fmax: f64) -> Result<Self> {
        let filterbank = build_filterbank(n_mels, sample_rate, stft.fft_size, fmin, fmax)?;
        Ok(Self {
            plan: StftPlan::new(stft)?,
            filterbank,
        })
    }

    /// 80 channels over 0 Hz to Nyquist at the default 16 kHz analysis settings.
    pub fn default_16k() -> Self {
        Self::new(StftConfig::default(), 16000, DEFAULT_N_MELS, 0.0, 8000.0)
            .expect("default analysis settings are valid")
    }

    pub fn stft_config(&self) -> &StftConfig {
        self.plan.config()
    }

    pub fn sample_rate(&self) -> u32 {
        self.filterbank.sample_rate
    }

    pub fn extract(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate != self.filterbank.sample_rate {
            return Err(invalid_input!(
                "waveform sample rate {} does not match analysis rate {}",
                w.sample_rate,
                self.filterbank.sample_rate
            ));
        }
        mel_spectrum(&amplitude(&self.plan.stft(w)?), &self.filterbank)
    }
}
