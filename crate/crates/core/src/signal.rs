//! Windowing, short-time Fourier analysis and overlap-add synthesis.
//!
//! Frames start at `t * hop_length` with no centre padding, are multiplied by
//! the analysis window and zero-padded to `fft_size` before the real FFT.
//! Synthesis is the least-squares inverse: windowed overlap-add divided by the
//! per-sample sum of squared windows. Samples whose window-square sum is zero
//! are only tolerated in the edge regions (the first and last
//! `win_length - hop_length` samples); there they carry no information and are
//! reconstructed as zero.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid_input!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(invalid_input!("sample {i} is not finite"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum WindowKind {
    #[default]
    PeriodicHann,
    Rectangular,
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::PeriodicHann => "hann",
            WindowKind::Rectangular => "rectangular",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" | "periodic-hann" => Ok(WindowKind::PeriodicHann),
            "rectangular" | "rect" => Ok(WindowKind::Rectangular),
            other => Err(invalid_config!("unknown window kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 50 ms window and 12.5 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            win_length: 800,
            hop_length: 200,
            fft_size: 1024,
            window: WindowKind::PeriodicHann,
        }
    }
}

impl StftConfig {
    pub fn new(win_length: usize, hop_length: usize, fft_size: usize, window: WindowKind) -> Result<Self> {
        let cfg = Self {
            win_length,
            hop_length,
            fft_size,
            window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Window and hop derived from millisecond durations; FFT size is the next
    /// power of two at or above the window.
    pub fn from_millis(sample_rate: u32, win_ms: f64, hop_ms: f64) -> Result<Self> {
        let win = (sample_rate as f64 * win_ms / 1000.0).round() as usize;
        let hop = (sample_rate as f64 * hop_ms / 1000.0).round() as usize;
        Self::new(win, hop, win.max(1).next_power_of_two(), WindowKind::PeriodicHann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 {
            return Err(invalid_config!("hop_length must be positive"));
        }
        if self.win_length < 2 {
            return Err(invalid_config!("win_length must be at least 2"));
        }
        if self.hop_length > self.win_length {
            return Err(invalid_config!(
                "hop_length {} exceeds win_length {}",
                self.hop_length,
                self.win_length
            ));
        }
        if self.win_length > self.fft_size {
            return Err(invalid_config!(
                "win_length {} exceeds fft_size {}",
                self.win_length,
                self.fft_size
            ));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(invalid_config!("fft_size {} is not a power of two", self.fft_size));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of analysis frames for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> Option<usize> {
        (len >= self.win_length).then(|| 1 + (len - self.win_length) / self.hop_length)
    }

    /// Synthesis length for `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_length + self.win_length
        }
    }

    /// Samples covered by full window overlap; reconstruction comparisons use
    /// only this range.
    pub fn interior(&self, len: usize) -> Range<usize> {
        let edge = self.win_length - self.hop_length;
        if len <= 2 * edge {
            return 0..0;
        }
        edge..len - edge
    }
}

pub fn make_window(kind: WindowKind, win_length: usize) -> Result<Vec<f64>> {
    if win_length < 2 {
        return Err(invalid_config!("window length must be at least 2, got {win_length}"));
    }
    Ok(match kind {
        WindowKind::PeriodicHann => (0..win_length)
            .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / win_length as f64).cos()))
            .collect(),
        WindowKind::Rectangular => vec![1.0; win_length],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    /// frames × bins.
    pub values: Matrix<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(values: Matrix<Complex64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        config.validate()?;
        if values.cols() != config.bins() {
            return Err(invalid_input!(
                "spectrogram has {} bins, config expects {}",
                values.cols(),
                config.bins()
            ));
        }
        if !values.is_finite() {
            return Err(invalid_input!("spectrogram contains non-finite values"));
        }
        Ok(Self {
            values,
            config,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: Matrix::zeros(self.values.rows(), self.values.cols()),
            config: self.config,
            sample_rate: self.sample_rate,
        }
    }

    /// Frobenius norm of the full two-sided STFT this half spectrum stands for.
    ///
    /// Bins strictly between DC and Nyquist appear twice in the two-sided
    /// spectrum. Consistency projection is orthogonal in this norm.
    pub fn two_sided_norm(&self) -> f64 {
        two_sided_norm_sq(&self.values).sqrt()
    }
}

pub(crate) fn two_sided_norm_sq(values: &Matrix<Complex64>) -> f64 {
    let bins = values.cols();
    let mut acc = 0.0;
    for row in values.iter_rows() {
        for (k, z) in row.iter().enumerate() {
            let w = if k == 0 || k + 1 == bins { 1.0 } else { 2.0 };
            acc += w * z.norm_sqr();
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeSpectrogram {
    /// frames × bins, non-negative.
    pub values: Matrix<f64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl AmplitudeSpectrogram {
    pub fn new(values: Matrix<f64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        config.validate()?;
        if values.cols() != config.bins() {
            return Err(invalid_input!(
                "amplitude has {} bins, config expects {}",
                values.cols(),
                config.bins()
            ));
        }
        if let Some(x) = values.as_slice().iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(invalid_input!("amplitude entries must be finite and >= 0, found {x}"));
        }
        Ok(Self {
            values,
            config,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }
}

/// Planned transforms for one [`StftConfig`]. Shareable across threads.
#[derive(Clone)]
pub struct StftPlan {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("config", &self.config).finish()
    }
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let window = make_window(config.window, config.win_length)?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            config,
            window,
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Windowed frames, zero-padded to `fft_size`.
    pub fn frame_signal(&self, samples: &[f64]) -> Result<Matrix<f64>> {
        let cfg = &self.config;
        let frames = cfg.frames_for(samples.len()).ok_or_else(|| {
            invalid_input!(
                "signal of {} samples is shorter than one window ({})",
                samples.len(),
                cfg.win_length
            )
        })?;
        let mut out = Matrix::zeros(frames, cfg.fft_size);
        for t in 0..frames {
            let start = t * cfg.hop_length;
            let seg = &samples[start..start + cfg.win_length];
            for ((o, &x), &w) in out.row_mut(t).iter_mut().zip(seg).zip(&self.window) {
                *o = x * w;
            }
        }
        Ok(out)
    }

    /// Windowed overlap-add of time-domain frames (`frames × fft_size`), without
    /// normalization. This is the adjoint of [`StftPlan::frame_signal`].
    pub fn overlap_add(&self, frames: &Matrix<f64>) -> Vec<f64> {
        let cfg = &self.config;
        let mut out = vec![0.0; cfg.output_len(frames.rows())];
        for (t, row) in frames.iter_rows().enumerate() {
            let start = t * cfg.hop_length;
            for ((o, &x), &w) in out[start..start + cfg.win_length].iter_mut().zip(row).zip(&self.window) {
                *o += x * w;
            }
        }
        out
    }

    /// Reciprocal of the per-sample window-square sum for `frames` frames.
    ///
    /// Zero sums inside the interior make the inverse ill-posed and are
    /// reported as a numerical error; zero sums at the edges map to zero.
    pub fn inverse_normalization(&self, frames: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let len = cfg.output_len(frames);
        let mut sum = vec![0.0; len];
        for t in 0..frames {
            let start = t * cfg.hop_length;
            for (s, &w) in sum[start..start + cfg.win_length].iter_mut().zip(&self.window) {
                *s += w * w;
            }
        }
        let edge = cfg.win_length - cfg.hop_length;
        let mut inv = Vec::with_capacity(len);
        for (n, &s) in sum.iter().enumerate() {
            if s > 0.0 {
                inv.push(1.0 / s);
            } else if n < edge || n >= len.saturating_sub(edge) {
                inv.push(0.0);
            } else {
                return Err(Error::Numerical(format!(
                    "window-square sum vanishes at interior sample {n}"
                )));
            }
        }
        Ok(inv)
    }

    pub fn rfft_rows(&self, frames: &Matrix<f64>) -> Matrix<Complex64> {
        let n = self.config.fft_size;
        debug_assert_eq!(frames.cols(), n);
        let bins = self.config.bins();
        let mut out = Matrix::zeros(frames.rows(), bins);
        let mut input = self.forward.make_input_vec();
        let mut scratch = self.forward.make_scratch_vec();
        for (t, row) in frames.iter_rows().enumerate() {
            input.copy_from_slice(row);
            self.forward
                .process_with_scratch(&mut input, out.row_mut(t), &mut scratch)
                .expect("buffer sizes come from the plan");
        }
        out
    }

    /// Inverse real FFT per row, scaled by `1/fft_size`. Imaginary parts of the
    /// DC and Nyquist bins are ignored.
    pub fn irfft_rows(&self, spec: &Matrix<Complex64>) -> Matrix<f64> {
        let n = self.config.fft_size;
        let bins = self.config.bins();
        debug_assert_eq!(spec.cols(), bins);
        let scale = 1.0 / n as f64;
        let mut out = Matrix::zeros(spec.rows(), n);
        let mut input = self.inverse.make_input_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        for (t, row) in spec.iter_rows().enumerate() {
            input.copy_from_slice(row);
            input[0].im = 0.0;
            input[bins - 1].im = 0.0;
            let out_row = out.row_mut(t);
            self.inverse
                .process_with_scratch(&mut input, out_row, &mut scratch)
                .expect("buffer sizes come from the plan");
            for x in out_row.iter_mut() {
                *x *= scale;
            }
        }
        out
    }

    pub fn stft(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        let frames = self.frame_signal(&w.samples)?;
        Ok(ComplexSpectrogram {
            values: self.rfft_rows(&frames),
            config: self.config,
            sample_rate: w.sample_rate,
        })
    }

    pub fn istft_values(&self, spec: &Matrix<Complex64>) -> Result<Vec<f64>> {
        if spec.rows() == 0 {
            return Err(invalid_input!("cannot invert a spectrogram with zero frames"));
        }
        if spec.cols() != self.config.bins() {
            return Err(invalid_input!(
                "spectrogram has {} bins, config expects {}",
                spec.cols(),
                self.config.bins()
            ));
        }
        let inv = self.inverse_normalization(spec.rows())?;
        let mut out = self.overlap_add(&self.irfft_rows(spec));
        for (o, s) in out.iter_mut().zip(&inv) {
            *o *= s;
        }
        Ok(out)
    }

    pub fn istft(&self, spec: &ComplexSpectrogram) -> Result<Waveform> {
        if spec.config != self.config {
            return Err(invalid_input!("spectrogram config does not match plan"));
        }
        Waveform::new(self.istft_values(&spec.values)?, spec.sample_rate)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    StftPlan::new(*cfg)?.stft(w)
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    StftPlan::new(spec.config)?.istft(spec)
}

pub fn amplitude(spec: &ComplexSpectrogram) -> AmplitudeSpectrogram {
    AmplitudeSpectrogram {
        values: spec.values.map(|z| z.norm()),
        config: spec.config,
        sample_rate: spec.sample_rate,
    }
}
