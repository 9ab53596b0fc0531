//! Frequency-domain feature loss, SI-SDR based waveform loss and their
//! weighted combination.
//!
//! `loss_f` is the mean squared difference over all frame/channel elements.
//! Summing instead of averaging only rescales it by `frames * channels`.

use crate::error::{invalid_input, Result};
use crate::mel::MelSpectrogram;
use crate::signal::Waveform;

/// Added to the distortion energy so a perfect estimate stays finite.
pub const SI_SDR_EPS: f64 = 1e-12;
/// SI-SDR is clamped to `[-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB]`.
pub const SI_SDR_CLAMP_DB: f64 = 80.0;
/// Time-domain loss weight used for the joint criterion.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss_f: f64,
    pub loss_t: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn combine(loss_f: f64, loss_t: f64, lambda: f64) -> Self {
        Self {
            loss_f,
            loss_t,
            lambda,
            total: loss_f + lambda * loss_t,
        }
    }
}

pub fn loss_f(pred: &MelSpectrogram, target: &MelSpectrogram) -> Result<f64> {
    if pred.values.shape() != target.values.shape() {
        return Err(invalid_input!(
            "mel shapes differ: {:?} vs {:?}",
            pred.values.shape(),
            target.values.shape()
        ));
    }
    if pred.normalized != target.normalized {
        return Err(invalid_input!("cannot compare normalized and raw mel features"));
    }
    if pred.values.is_empty() {
        return Err(invalid_input!("loss_f of an empty mel spectrogram"));
    }
    let sq: f64 = pred
        .values
        .as_slice()
        .iter()
        .zip(target.values.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sq / pred.values.len() as f64)
}

/// Optimal scale of `reference` towards `estimate`.
pub fn optimal_scale(estimate: &[f64], reference: &[f64]) -> f64 {
    let dot: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let energy: f64 = reference.iter().map(|r| r * r).sum();
    dot / energy
}

pub fn si_sdr_slices(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(invalid_input!(
            "si_sdr length mismatch: {} vs {}",
            estimate.len(),
            reference.len()
        ));
    }
    if estimate.is_empty() {
        return Err(invalid_input!("si_sdr of empty signals"));
    }
    let energy: f64 = reference.iter().map(|r| r * r).sum();
    if energy <= 0.0 {
        return Err(invalid_input!("si_sdr reference has zero energy"));
    }
    let alpha = optimal_scale(estimate, reference);
    let mut target = 0.0;
    let mut distortion = 0.0;
    for (e, r) in estimate.iter().zip(reference) {
        let s = alpha * r;
        target += s * s;
        distortion += (s - e) * (s - e);
    }
    // alpha == 0 gives log10(0) = -inf, which the clamp maps to the floor
    let db = 10.0 * (target / (distortion + SI_SDR_EPS)).log10();
    Ok(db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(&estimate.samples, &reference.samples)
}

pub fn loss_t(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    Ok(-si_sdr(estimate, reference)?)
}

pub fn joint_loss(
    pred_mel: &MelSpectrogram,
    target_mel: &MelSpectrogram,
    estimate: &Waveform,
    reference: &Waveform,
    lambda: f64,
) -> Result<LossReport> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid_input!("lambda must be finite and >= 0, got {lambda}"));
    }
    Ok(LossReport::combine(
        loss_f(pred_mel, target_mel)?,
        loss_t(estimate, reference)?,
        lambda,
    ))
}
