//! Griffin-Lim phase reconstruction by alternating projections, and the full
//! mel → waveform path built on it.
//!
//! `amp(X)` keeps the phase and imposes the target amplitude; `cons(X)` maps a
//! spectrogram to the STFT of its least-squares inverse. Each iteration is
//! `X ← cons(amp(X))` and the result is returned after the final `cons`.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::num_complex::Complex64;

use crate::error::{invalid_input, Result};
use crate::matrix::Matrix;
use crate::mel::{denormalize, epsilon_amplitude, MelFilterbank, MelSpectrogram, NormStats};
use crate::signal::{two_sided_norm_sq, AmplitudeSpectrogram, ComplexSpectrogram, StftConfig, StftPlan, Waveform};

pub const TRAINING_ITERATIONS: usize = 1;
pub const RUNTIME_ITERATIONS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum InitPhase {
    #[default]
    Zero,
    SeededRandom(u64),
}

impl InitPhase {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(InitPhase::Zero),
            _ => match s.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(InitPhase::SeededRandom)
                    .map_err(|_| crate::error::Error::InvalidConfig(format!("bad init phase seed '{seed}'"))),
                None => Err(crate::error::Error::InvalidConfig(format!(
                    "init phase must be 'zero' or 'random:<seed>', got '{s}'"
                ))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            InitPhase::Zero => "zero".into(),
            InitPhase::SeededRandom(s) => format!("random:{s}"),
        }
    }

    /// Unit phasors `e^{i∠c₀}` for a `frames × bins` spectrogram.
    pub fn phasors(&self, frames: usize, bins: usize) -> Matrix<Complex64> {
        match *self {
            InitPhase::Zero => Matrix::from_fn(frames, bins, |_, _| Complex64::new(1.0, 0.0)),
            InitPhase::SeededRandom(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Matrix::from_fn(frames, bins, |_, _| Complex64::from_polar(1.0, rng.gen_range(0.0..TAU)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GriffinLimConfig {
    pub iterations: usize,
    pub init: InitPhase,
}

impl GriffinLimConfig {
    pub fn new(iterations: usize, init: InitPhase) -> Self {
        Self { iterations, init }
    }

    pub fn training() -> Self {
        Self::new(TRAINING_ITERATIONS, InitPhase::Zero)
    }

    pub fn runtime() -> Self {
        Self::new(RUNTIME_ITERATIONS, InitPhase::Zero)
    }
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        Self::runtime()
    }
}

/// `A ⊙ X / |X|`, with zero-magnitude entries mapped to `A` (zero phase).
pub(crate) fn project_amplitude_values(x: &Matrix<Complex64>, a: &Matrix<f64>) -> Matrix<Complex64> {
    let data = x
        .as_slice()
        .iter()
        .zip(a.as_slice())
        .map(|(&z, &amp)| {
            let r = z.norm();
            if r > 0.0 {
                z * (amp / r)
            } else {
                Complex64::new(amp, 0.0)
            }
        })
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data).expect("shape preserved")
}

pub fn project_amplitude(x: &ComplexSpectrogram, a: &AmplitudeSpectrogram) -> Result<ComplexSpectrogram> {
    if x.values.shape() != a.values.shape() {
        return Err(invalid_input!(
            "spectrogram {:?} and amplitude {:?} differ in shape",
            x.values.shape(),
            a.values.shape()
        ));
    }
    Ok(ComplexSpectrogram {
        values: project_amplitude_values(&x.values, &a.values),
        config: x.config,
        sample_rate: x.sample_rate,
    })
}

pub(crate) fn project_consistency_values(plan: &StftPlan, x: &Matrix<Complex64>) -> Result<Matrix<Complex64>> {
    let signal = plan.istft_values(x)?;
    Ok(plan.rfft_rows(&plan.frame_signal(&signal)?))
}

pub fn project_consistency(x: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    let plan = StftPlan::new(x.config)?;
    Ok(ComplexSpectrogram {
        values: project_consistency_values(&plan, &x.values)?,
        config: x.config,
        sample_rate: x.sample_rate,
    })
}

/// `‖amp(X) − cons(amp(X))‖` over the two-sided spectrum.
pub fn inconsistency(x: &ComplexSpectrogram, a: &AmplitudeSpectrogram) -> Result<f64> {
    let plan = StftPlan::new(x.config)?;
    let y = project_amplitude(x, a)?.values;
    let c = project_consistency_values(&plan, &y)?;
    Ok(diff_norm(&y, &c))
}

fn diff_norm(a: &Matrix<Complex64>, b: &Matrix<Complex64>) -> f64 {
    let d = Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p - q).collect(),
    )
    .expect("same shape");
    two_sided_norm_sq(&d).sqrt()
}

/// Per-iteration diagnostics of a Griffin-Lim run.
#[derive(Debug, Clone, PartialEq)]
pub struct GriffinLimTrace {
    /// `‖amp(X_n) − cons(amp(X_n))‖` for `n = 0..iterations`.
    pub inconsistency: Vec<f64>,
    /// `max ||amp(X_n)| − target|` before each consistency projection.
    pub amplitude_error: Vec<f64>,
}

pub(crate) fn griffin_lim_values(
    plan: &StftPlan,
    a: &Matrix<f64>,
    cfg: &GriffinLimConfig,
    mut trace: Option<&mut GriffinLimTrace>,
) -> Result<Matrix<Complex64>> {
    let phasors = cfg.init.phasors(a.rows(), a.cols());
    let mut x = Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.as_slice().iter().zip(phasors.as_slice()).map(|(&m, &p)| p * m).collect(),
    )?;
    for _ in 0..cfg.iterations {
        let y = project_amplitude_values(&x, a);
        let next = project_consistency_values(plan, &y)?;
        if let Some(t) = trace.as_deref_mut() {
            t.inconsistency.push(diff_norm(&y, &next));
            let dev = y
                .as_slice()
                .iter()
                .zip(a.as_slice())
                .map(|(z, &m)| (z.norm() - m).abs())
                .fold(0.0, f64::max);
            t.amplitude_error.push(dev);
        }
        x = next;
    }
    Ok(x)
}

pub fn griffin_lim(a: &AmplitudeSpectrogram, cfg: &GriffinLimConfig) -> Result<ComplexSpectrogram> {
    let plan = StftPlan::new(a.config)?;
    Ok(ComplexSpectrogram {
        values: griffin_lim_values(&plan, &a.values, cfg, None)?,
        config: a.config,
        sample_rate: a.sample_rate,
    })
}

pub fn griffin_lim_traced(
    a: &AmplitudeSpectrogram,
    cfg: &GriffinLimConfig,
) -> Result<(ComplexSpectrogram, GriffinLimTrace)> {
    let plan = StftPlan::new(a.config)?;
    let mut trace = GriffinLimTrace {
        inconsistency: Vec::with_capacity(cfg.iterations),
        amplitude_error: Vec::with_capacity(cfg.iterations),
    };
    let values = griffin_lim_values(&plan, &a.values, cfg, Some(&mut trace))?;
    Ok((
        ComplexSpectrogram {
            values,
            config: a.config,
            sample_rate: a.sample_rate,
        },
        trace,
    ))
}

/// Mel features → waveform: denormalize if needed, amplitude estimate,
/// Griffin-Lim, inverse STFT.
pub fn reconstruct(
    m: &MelSpectrogram,
    fb: &MelFilterbank,
    stats: Option<&NormStats>,
    glcfg: &GriffinLimConfig,
) -> Result<Waveform> {
    let plan = StftPlan::new(StftConfig {
        fft_size: fb.fft_size,
        ..m.stft
    })?;
    reconstruct_with_plan(&plan, m, fb, stats, glcfg)
}

pub fn reconstruct_with_plan(
    plan: &StftPlan,
    m: &MelSpectrogram,
    fb: &MelFilterbank,
    stats: Option<&NormStats>,
    glcfg: &GriffinLimConfig,
) -> Result<Waveform> {
    let raw;
    let raw_ref = if m.normalized {
        let stats = stats
            .or(m.stats.as_ref())
            .ok_or_else(|| invalid_input!("normalized mel needs stats to reconstruct"))?;
        raw = denormalize(m, stats)?;
        &raw
    } else {
        m
    };
    let a = epsilon_amplitude(raw_ref, fb)?;
    if a.config != *plan.config() {
        return Err(invalid_input!("mel analysis parameters do not match the STFT plan"));
    }
    let x = griffin_lim_values(plan, &a.values, glcfg, None)?;
    Waveform::new(plan.istft_values(&x)?, m.sample_rate)
}
