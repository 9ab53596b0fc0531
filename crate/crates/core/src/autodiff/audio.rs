//! Taped versions of the mel → amplitude → Griffin-Lim → waveform path and
//! of both losses. Forward values agree with the plain implementations in
//! [`crate::mel`], [`crate::phase`] and [`crate::loss`].

use std::sync::Arc;

use crate::corpus::{self, CorpusSpec};
use crate::error::{invalid_input, Result};
use crate::loss::{SI_SDR_CLAMP_DB, SI_SDR_EPS};
use crate::matrix::Matrix;
use crate::mel::{self as melmod, MelFilterbank, MelFrontend, MelSpectrogram, NormStats};
use crate::phase::{self, GriffinLimConfig, InitPhase};
use crate::signal::{StftPlan, Waveform};

use super::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use super::tape::{Tape, Var};

/// `max(0, x·std + mean)` per channel.
pub fn denormalize(tape: &mut Tape, mel: Var, stats: &NormStats) -> Result<Var> {
    let raw = tape.affine_cols(mel, &stats.std, &stats.mean)?;
    tape.clamp(raw, 0.0, f64::INFINITY)
}

/// `max(0, mel · pinv(W)ᵀ)`.
pub fn epsilon_amplitude(tape: &mut Tape, raw_mel: Var, fb: &MelFilterbank) -> Result<Var> {
    let pinv = tape.constant(fb.pinv_t().clone());
    let lin = tape.matmul(raw_mel, pinv)?;
    tape.clamp(lin, 0.0, f64::INFINITY)
}

pub fn stft(tape: &mut Tape, plan: &Arc<StftPlan>, signal: Var) -> Result<Var> {
    let frames = tape.frame(signal, plan)?;
    tape.rfft(frames, plan)
}

/// Least-squares inverse STFT producing a `1 × len` signal.
pub fn istft(tape: &mut Tape, plan: &Arc<StftPlan>, spec: Var) -> Result<Var> {
    let frames = tape.complex(spec)?.rows();
    if frames == 0 {
        return Err(invalid_input!("cannot invert a spectrogram with zero frames"));
    }
    let inv = plan.inverse_normalization(frames)?;
    let inv = tape.constant(Matrix::from_vec(1, inv.len(), inv)?);
    let time = tape.irfft(spec, plan)?;
    let summed = tape.overlap_add(time, plan)?;
    tape.mul(summed, inv)
}

/// Unrolled Griffin-Lim from amplitude `a`; returns the complex estimate
/// after the last consistency projection.
pub fn griffin_lim(tape: &mut Tape, plan: &Arc<StftPlan>, a: Var, cfg: &GriffinLimConfig) -> Result<Var> {
    let (frames, bins) = tape.real(a)?.shape();
    if bins != plan.config().bins() {
        return Err(invalid_input!(
            "amplitude has {bins} bins, plan expects {}",
            plan.config().bins()
        ));
    }
    let init = tape.constant_complex(cfg.init.phasors(frames, bins));
    let mut x = tape.polar(a, init)?;
    for _ in 0..cfg.iterations {
        let u = tape.phasor(x)?;
        let y = tape.polar(a, u)?;
        let signal = istft(tape, plan, y)?;
        x = stft(tape, plan, signal)?;
    }
    Ok(x)
}

/// Mel features to a `1 × len` waveform. `stats` given means `mel` is
/// normalized.
pub fn reconstruct(
    tape: &mut Tape,
    plan: &Arc<StftPlan>,
    mel: Var,
    fb: &MelFilterbank,
    stats: Option<&NormStats>,
    cfg: &GriffinLimConfig,
) -> Result<Var> {
    let raw = match stats {
        Some(s) => denormalize(tape, mel, s)?,
        None => mel,
    };
    let a = epsilon_amplitude(tape, raw, fb)?;
    let x = griffin_lim(tape, plan, a, cfg)?;
    istft(tape, plan, x)
}

/// SI-SDR in dB of a `1 × len` estimate against a fixed reference.
pub fn si_sdr(tape: &mut Tape, estimate: Var, reference: &[f64]) -> Result<Var> {
    let len = tape.real(estimate)?.len();
    if len != reference.len() {
        return Err(invalid_input!("si_sdr length mismatch: {len} vs {}", reference.len()));
    }
    let energy: f64 = reference.iter().map(|r| r * r).sum();
    if energy <= 0.0 {
        return Err(invalid_input!("si_sdr reference has zero energy"));
    }
    let r = tape.constant(Matrix::from_vec(1, len, reference.to_vec())?);
    let flat = if tape.real(estimate)?.rows() == 1 {
        estimate
    } else {
        return Err(invalid_input!("si_sdr estimate must be a 1 x len signal"));
    };
    let dot = tape.dot(flat, r)?;
    let alpha = tape.scale(dot, 1.0 / energy)?;
    let target = tape.scale_by(alpha, r)?;
    let diff = tape.sub(target, flat)?;
    let num = tape.norm_sq(target)?;
    let den = tape.norm_sq(diff)?;
    let eps = tape.scalar_constant(SI_SDR_EPS);
    let den = tape.add(den, eps)?;
    let ratio = tape.div(num, den)?;
    let log = tape.log10(ratio)?;
    let db = tape.scale(log, 10.0)?;
    tape.clamp(db, -SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB)
}

pub fn loss_t(tape: &mut Tape, estimate: Var, reference: &[f64]) -> Result<Var> {
    let s = si_sdr(tape, estimate, reference)?;
    tape.scale(s, -1.0)
}

/// Mean squared difference against a fixed target.
pub fn loss_f(tape: &mut Tape, pred: Var, target: &Matrix<f64>) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Raw mel of exactly `frames` frames cut from a rendered token sequence.
pub fn fixture_mel(fe: &MelFrontend, frames: usize) -> Result<MelSpectrogram> {
    let cfg = fe.stft_config();
    if frames == 0 {
        return Err(invalid_input!("fixture needs at least one frame"));
    }
    let len = cfg.output_len(frames);
    let spec = CorpusSpec {
        sample_rate: fe.sample_rate(),
        ..CorpusSpec::default()
    };
    let per = spec.token_samples().max(1);
    let tokens: Vec<usize> = (0..len.div_ceil(per)).map(|i| (3 + 5 * i) % spec.vocab).collect();
    let mut w = corpus::render(&tokens, &spec)?;
    w.samples.truncate(len);
    fe.extract(&Waveform::new(w.samples, w.sample_rate)?)
}

/// Gradient of `loss_t(istft(griffin_lim_k(ε(mel))), w)` with respect to a
/// copy of `target` with each element scaled by `1 + distortion·sin(i)`,
/// where `w` is the target's own reconstruction.
/// With `normalized` the checked input is the normalized prediction and
/// the path starts with denormalization.
pub fn check_joint_path(
    fe: &MelFrontend,
    target: &MelSpectrogram,
    iterations: usize,
    normalized: bool,
    distortion: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let gl = GriffinLimConfig::new(iterations, InitPhase::Zero);
    let reference = phase::reconstruct_with_plan(&fe.plan, target, &fe.filterbank, None, &gl)?;
    let mut i = 0usize;
    let pred = target.values.map(|&v| {
        i += 1;
        v * (1.0 + distortion * (i as f64).sin())
    });
    let stats = melmod::NormStats::fit([target])?;
    let (input, st) = if normalized {
        let m = MelSpectrogram {
            values: pred,
            ..target.clone()
        };
        (melmod::normalize(&m, &stats)?.values, Some(&stats))
    } else {
        (pred, None)
    };
    let plan = Arc::new(fe.plan.clone());
    grad_check(
        |tape, x| {
            let w = reconstruct(tape, &plan, x, &fe.filterbank, st, &gl)?;
            loss_t(tape, w, &reference.samples)
        },
        &input,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, GradCheckConfig};
    use crate::loss;
    use crate::mel::{self, MelFrontend, MelSpectrogram};
    use crate::phase::{self, InitPhase};
    use crate::signal::{StftConfig, WindowKind};
    use crate::signal::Waveform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_frontend() -> MelFrontend {
        let cfg = StftConfig::new(64, 16, 64, WindowKind::PeriodicHann).unwrap();
        MelFrontend::new(cfg, 8000, 12, 0.0, 4000.0).unwrap()
    }

    fn tone(len: usize, sr: u32, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..len)
            .map(|n| {
                let t = n as f64 / sr as f64;
                (2.0 * std::f64::consts::PI * 440.0 * t).sin() * 0.4
                    + (2.0 * std::f64::consts::PI * 1230.0 * t).sin() * 0.2
                    + rng.gen_range(-0.05..0.05)
            })
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    fn mel_of(fe: &MelFrontend, w: &Waveform) -> MelSpectrogram {
        fe.extract(w).unwrap()
    }

    #[test]
    fn taped_reconstruction_matches_plain() {
        let fe = small_frontend();
        let m = mel_of(&fe, &tone(400, 8000, 1));
        let plan = Arc::new(fe.plan.clone());
        for cfg in [
            GriffinLimConfig::new(3, InitPhase::Zero),
            GriffinLimConfig::new(2, InitPhase::SeededRandom(9)),
        ] {
            let plain = phase::reconstruct(&m, &fe.filterbank, None, &cfg).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(m.values.clone());
            let w = reconstruct(&mut tape, &plan, x, &fe.filterbank, None, &cfg).unwrap();
            let got = tape.real(w).unwrap();
            assert_eq!(got.len(), plain.len());
            for (a, b) in got.as_slice().iter().zip(&plain.samples) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn taped_denormalize_matches_plain() {
        let fe = small_frontend();
        let m = mel_of(&fe, &tone(400, 8000, 2));
        let stats = mel::NormStats::fit([&m]).unwrap();
        let n = mel::normalize(&m, &stats).unwrap();
        let plain = mel::denormalize(&n, &stats).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(n.values.clone());
        let d = denormalize(&mut tape, x, &stats).unwrap();
        for (a, b) in tape.real(d).unwrap().as_slice().iter().zip(plain.values.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_losses_match_plain() {
        let r = [0.3, -0.1, 0.7, 0.2, -0.4];
        let e = [0.25, 0.0, 0.6, 0.3, -0.5];
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_vec(1, 5, e.to_vec()).unwrap());
        let s = si_sdr(&mut tape, x, &r).unwrap();
        let lt = loss_t(&mut tape, x, &r).unwrap();
        let want = loss::si_sdr_slices(&e, &r).unwrap();
        assert!((tape.scalar(s).unwrap() - want).abs() < 1e-12);
        assert!((tape.scalar(lt).unwrap() + want).abs() < 1e-12);

        let p = Matrix::from_vec(2, 2, vec![1.0, 2.0, 0.5, -1.0]).unwrap();
        let t = Matrix::from_vec(2, 2, vec![0.0, 2.5, 0.5, 1.0]).unwrap();
        let pv = tape.input(p.clone());
        let lf = loss_f(&mut tape, pv, &t).unwrap();
        let norm = |v: Matrix<f64>| {
            MelSpectrogram::from_parts(v, true, Some(mel::NormStats::identity(2)), 16000, StftConfig::default()).unwrap()
        };
        let want = loss::loss_f(&norm(p), &norm(t)).unwrap();
        assert_eq!(tape.scalar(lf).unwrap(), want);
    }

    #[test]
    fn loss_f_gradient_passes_tight_check() {
        let t = Matrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.7).cos());
        let p = Matrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.3).sin());
        let cfg = GradCheckConfig {
            tol: 1e-6,
            ..Default::default()
        };
        let r = grad_check(|tape, x| loss_f(tape, x, &t), &p, &cfg).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn si_sdr_gradient_passes_check() {
        let reference: Vec<f64> = (0..32).map(|n| (n as f64 * 0.4).sin()).collect();
        let est = Matrix::from_fn(1, 32, |_, n| (n as f64 * 0.4).sin() * 0.8 + (n as f64 * 1.3).cos() * 0.3);
        let cfg = GradCheckConfig {
            tol: 1e-5,
            ..Default::default()
        };
        let r = grad_check(|tape, x| si_sdr(tape, x, &reference), &est, &cfg).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 32);
    }

    fn joint_path_check(iterations: usize, normalized: bool) {
        let fe = small_frontend();
        let plan = Arc::new(fe.plan.clone());
        let target = mel_of(&fe, &tone(16 * 9 + 64, 8000, 3));
        let glcfg = GriffinLimConfig::new(iterations, InitPhase::Zero);
        let reference = phase::reconstruct(&target, &fe.filterbank, None, &glcfg).unwrap();
        let pred = target.values.map(|v| v * 0.9 + 0.01);
        let stats = mel::NormStats::fit([&target]).unwrap();
        let (input, st) = if normalized {
            let m = MelSpectrogram { values: pred, ..target.clone() };
            (mel::normalize(&m, &stats).unwrap().values, Some(&stats))
        } else {
            (pred, None)
        };
        let cfg = GradCheckConfig {
            min_input_abs: 1e-3,
            ..Default::default()
        };
        let r = grad_check(
            |tape, x| {
                let w = reconstruct(tape, &plan, x, &fe.filterbank, st, &glcfg)?;
                loss_t(tape, w, &reference.samples)
            },
            &input,
            &cfg,
        )
        .unwrap();
        assert!(r.passed(), "k={iterations}: {:?}", r.worst);
        assert!(r.checked > input.len() / 2, "{} of {}", r.checked, input.len());
    }

    #[test]
    fn joint_path_gradient_one_iteration() {
        joint_path_check(1, false);
    }

    #[test]
    fn joint_path_gradient_two_iterations_normalized() {
        joint_path_check(2, true);
    }

    #[test]
    fn fixture_has_requested_frames() {
        let fe = MelFrontend::default_16k();
        assert_eq!(fixture_mel(&fe, 10).unwrap().frames(), 10);
        assert!(fixture_mel(&fe, 0).is_err());
    }

    #[test]
    fn library_joint_check_passes_on_small_frontend() {
        let fe = small_frontend();
        let target = fixture_mel(&fe, 10).unwrap();
        let cfg = GradCheckConfig {
            min_input_abs: 1e-3,
            ..Default::default()
        };
        for (k, norm) in [(1, false), (2, true)] {
            let r = check_joint_path(&fe, &target, k, norm, 0.2, &cfg).unwrap();
            assert!(r.passed(), "k={k}: {:?}", r.worst);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let fe = small_frontend();
        let plan = Arc::new(fe.plan.clone());
        let m = mel_of(&fe, &tone(300, 8000, 4));
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(m.values.map(|v| v * 1.1));
            let glcfg = GriffinLimConfig::new(2, InitPhase::Zero);
            let w = reconstruct(&mut tape, &plan, x, &fe.filterbank, None, &glcfg).unwrap();
            let reference = tape.real(w).unwrap().map(|v| v + 0.01);
            let l = loss_t(&mut tape, w, reference.as_slice()).unwrap();
            tape.backward(l).unwrap().real(x)
        };
        assert_eq!(run(), run());
    }
}
