//! Training loop for the toy predictor on `loss_f + λ·loss_t`, held-out
//! evaluation and free-running synthesis.
//!
//! Each step draws a batch, predicts normalized mel frames with teacher
//! forcing, and for the joint objective reconstructs a waveform from the
//! prediction with a few Griffin-Lim iterations. The reference waveform is
//! reconstructed from the target mel with the same Griffin-Lim settings and
//! is held constant. Per-utterance gradients are computed on separate tapes
//! (in parallel) and reduced in batch order.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{audio, Tape};
use crate::corpus::{CorpusSpec, SyntheticCorpus};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::loss::{self, DEFAULT_LAMBDA};
use crate::matrix::Matrix;
use crate::mel::{normalize, MelFrontend, MelSpectrogram, NormStats};
use crate::model::{forward_teacher_taped, ModelDims, ModelParams, TapedParams};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::phase::{self, GriffinLimConfig, InitPhase, TRAINING_ITERATIONS};
use crate::signal::{StftPlan, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// `loss_f + λ·loss_t`; at `λ = 0` the waveform branch is still run but
    /// detached from the gradient.
    Joint,
    /// `loss_f` only, with no reconstruction at all.
    FrequencyOnly,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::FrequencyOnly => "frequency-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "frequency-only" => Ok(TrainMode::FrequencyOnly),
            _ => Err(invalid_config!("mode must be 'joint' or 'frequency-only', got '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Step at which exponential decay begins; `None` means 10% of `steps`.
    pub decay_start: Option<usize>,
    pub adam: AdamConfig,
    pub lambda: f64,
    pub gl_train_iterations: usize,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr_start: 1e-3,
            lr_end: 1e-5,
            decay_start: None,
            adam: AdamConfig::default(),
            lambda: DEFAULT_LAMBDA,
            gl_train_iterations: TRAINING_ITERATIONS,
            mode: TrainMode::Joint,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(invalid_config!("batch size must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid_config!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.gl_train_iterations == 0 {
            return Err(invalid_config!("training Griffin-Lim iterations must be at least 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            start: self.lr_start,
            end: self.lr_end,
            decay_start: self.decay_start.unwrap_or(self.steps / 10),
            total_steps: self.steps,
        }
    }

    /// The single Griffin-Lim configuration used for both waveform branches.
    pub fn train_gl(&self) -> GriffinLimConfig {
        GriffinLimConfig::new(self.gl_train_iterations, InitPhase::Zero)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_f: f64,
    /// Absent for frequency-only training.
    pub loss_t: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Item {
    pub tokens: Vec<usize>,
    pub raw: MelSpectrogram,
    /// Normalized target frames.
    pub target: Matrix<f64>,
    /// Waveform reconstructed from the target mel; empty unless requested.
    pub reference: Vec<f64>,
}

/// Corpus turned into normalized mel targets (and optionally reference
/// waveforms) for a fixed analysis front end.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub frontend: Arc<MelFrontend>,
    pub plan: Arc<StftPlan>,
    pub stats: NormStats,
    pub items: Vec<Item>,
    pub reference_gl: Option<GriffinLimConfig>,
}

impl Dataset {
    /// `stats = None` fits normalization statistics on this corpus.
    pub fn prepare(
        corpus: &SyntheticCorpus,
        frontend: Arc<MelFrontend>,
        stats: Option<NormStats>,
        reference_gl: Option<GriffinLimConfig>,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(invalid_input!("corpus is empty"));
        }
        let raws: Vec<MelSpectrogram> = corpus
            .utterances
            .par_iter()
            .map(|u| frontend.extract(&u.waveform))
            .collect::<Result<_>>()?;
        let stats = match stats {
            Some(s) => s,
            None => NormStats::fit(&raws)?,
        };
        let plan = Arc::new(frontend.plan.clone());
        let items = corpus
            .utterances
            .par_iter()
            .zip(raws)
            .map(|(u, raw)| {
                let target = normalize(&raw, &stats)?.values;
                let reference = match &reference_gl {
                    Some(gl) => phase::reconstruct_with_plan(&plan, &raw, &frontend.filterbank, None, gl)?.samples,
                    None => Vec::new(),
                };
                Ok(Item {
                    tokens: u.tokens.clone(),
                    raw,
                    target,
                    reference,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frontend,
            plan,
            stats,
            items,
            reference_gl,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn normalized(&self, values: Matrix<f64>, like: &MelSpectrogram) -> Result<MelSpectrogram> {
        MelSpectrogram::from_parts(values, true, Some(self.stats.clone()), like.sample_rate, like.stft)
    }
}

struct UttOutcome {
    loss_f: f64,
    loss_t: Option<f64>,
    grads: Vec<Matrix<f64>>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: usize,
    pub data: Dataset,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dims: ModelDims, data: Dataset) -> Result<Self> {
        let params = ModelParams::init(dims, cfg.seed)?;
        Self::resume(cfg, data, params, None, 0)
    }

    pub fn resume(
        cfg: TrainConfig,
        data: Dataset,
        params: ModelParams,
        adam: Option<AdamState>,
        step: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(invalid_input!("training set is empty"));
        }
        if params.dims.n_mels != data.frontend.filterbank.n_mels {
            return Err(invalid_config!(
                "model predicts {} mel channels, front end has {}",
                params.dims.n_mels,
                data.frontend.filterbank.n_mels
            ));
        }
        if cfg.mode == TrainMode::Joint && data.reference_gl != Some(cfg.train_gl()) {
            return Err(invalid_config!("joint training needs references built with the training Griffin-Lim config"));
        }
        let adam = match adam {
            Some(a) => {
                if a.m.len() != params.tensors.len()
                    || a.m.iter().zip(&params.tensors).any(|(m, p)| m.shape() != p.shape())
                {
                    return Err(invalid_input!("optimizer state does not match parameters"));
                }
                a
            }
            None => AdamState::new(&params.tensors),
        };
        Ok(Self {
            cfg,
            params,
            adam,
            step,
            data,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    /// Dataset indices for `step`, from a per-epoch shuffle seeded by
    /// `(seed, epoch)`.
    pub fn batch_indices(&self, step: usize) -> (usize, Vec<usize>) {
        let per = self.batches_per_epoch();
        let (epoch, b) = (step / per, step % per);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        let lo = b * self.cfg.batch_size;
        let hi = (lo + self.cfg.batch_size).min(order.len());
        (epoch, order[lo..hi].to_vec())
    }

    fn utterance(&self, item: &Item) -> Result<UttOutcome> {
        let gl = self.cfg.train_gl();
        let mut tape = Tape::new();
        let vars = TapedParams::inputs(&mut tape, &self.params);
        let pred = forward_teacher_taped(&mut tape, &self.params, &vars, &item.tokens, &item.target)?;
        let lf = audio::loss_f(&mut tape, pred, &item.target)?;
        let loss_f = tape.scalar(lf)?;

        let (objective, loss_t) = match self.cfg.mode {
            TrainMode::FrequencyOnly => (lf, None),
            TrainMode::Joint if self.cfg.lambda == 0.0 => {
                let values = tape.real(pred)?.clone();
                let mel = self.data.normalized(values, &item.raw)?;
                let w = phase::reconstruct_with_plan(&self.data.plan, &mel, &self.data.frontend.filterbank, None, &gl)?;
                (lf, Some(loss::loss_t(&w, &Waveform::new(item.reference.clone(), w.sample_rate)?)?))
            }
            TrainMode::Joint => {
                let w = audio::reconstruct(
                    &mut tape,
                    &self.data.plan,
                    pred,
                    &self.data.frontend.filterbank,
                    Some(&self.data.stats),
                    &gl,
                )?;
                let lt = audio::loss_t(&mut tape, w, &item.reference)?;
                let weighted = tape.scale(lt, self.cfg.lambda)?;
                let total = tape.add(lf, weighted)?;
                (total, Some(tape.scalar(lt)?))
            }
        };
        let g = tape.backward(objective)?;
        Ok(UttOutcome {
            loss_f,
            loss_t,
            grads: vars.vars.iter().map(|&v| g.real(v)).collect(),
        })
    }

    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let (epoch, batch) = self.batch_indices(step);
        let outcomes: Vec<UttOutcome> = batch
            .par_iter()
            .map(|&i| self.utterance(&self.data.items[i]))
            .collect::<Result<_>>()?;

        let n = outcomes.len() as f64;
        let mut grads: Vec<Matrix<f64>> = self.params.tensors.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let mut loss_f = 0.0;
        let mut loss_t = 0.0;
        for o in &outcomes {
            loss_f += o.loss_f;
            loss_t += o.loss_t.unwrap_or(0.0);
            for (acc, g) in grads.iter_mut().zip(&o.grads) {
                acc.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(a, g)| *a += g);
            }
        }
        loss_f /= n;
        loss_t /= n;
        for g in &mut grads {
            g.as_mut_slice().iter_mut().for_each(|x| *x /= n);
        }
        let (loss_t, total) = match self.cfg.mode {
            TrainMode::FrequencyOnly => (None, loss_f),
            TrainMode::Joint => (Some(loss_t), loss_f + self.cfg.lambda * loss_t),
        };
        if !total.is_finite() || !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::TrainingFailure {
                step,
                reason: format!("non-finite loss or gradient (loss_f {loss_f}, total {total})"),
            });
        }
        let lr = self.cfg.schedule().at(step);
        self.adam.step(&self.cfg.adam, lr, &mut self.params.tensors, &grads)?;
        if !self.params.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        self.step += 1;
        Ok(StepLog {
            step,
            epoch,
            lr,
            loss_f,
            loss_t,
            total,
        })
    }

    /// Runs until `cfg.steps` steps are complete, passing each log line to
    /// `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut log = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let entry = self.train_step()?;
            on_step(&entry);
            log.push(entry);
        }
        Ok(log)
    }
}

/// Fits normalization on `corpus`, trains for `cfg.steps` steps and returns
/// the final parameters with the per-step log.
pub fn train(
    corpus: &SyntheticCorpus,
    frontend: Arc<MelFrontend>,
    dims: ModelDims,
    cfg: &TrainConfig,
) -> Result<(ModelParams, NormStats, Vec<StepLog>)> {
    cfg.validate()?;
    let reference = match cfg.mode {
        TrainMode::Joint => Some(cfg.train_gl()),
        TrainMode::FrequencyOnly => None,
    };
    let data = Dataset::prepare(corpus, frontend, None, reference)?;
    let mut trainer = Trainer::new(*cfg, dims, data)?;
    let log = trainer.run(|_| {})?;
    Ok((trainer.params, trainer.data.stats, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean teacher-forced `loss_f` on normalized frames.
    pub loss_f: f64,
    /// Mean SI-SDR of the prediction's reconstruction against the target's.
    pub si_sdr: f64,
    pub per_utterance_si_sdr: Vec<f64>,
}

/// Teacher-forced held-out evaluation. Both reconstructions use `gl`.
pub fn evaluate(params: &ModelParams, data: &Dataset, gl: &GriffinLimConfig) -> Result<EvalReport> {
    let fb = &data.frontend.filterbank;
    let rows: Vec<(f64, f64)> = data
        .items
        .par_iter()
        .map(|item| {
            let pred = params.forward_teacher(&item.tokens, &item.target)?;
            let pred_mel = data.normalized(pred, &item.raw)?;
            let target_mel = data.normalized(item.target.clone(), &item.raw)?;
            let lf = loss::loss_f(&pred_mel, &target_mel)?;
            let est = phase::reconstruct_with_plan(&data.plan, &pred_mel, fb, None, gl)?;
            let reference = if data.reference_gl == Some(*gl) && !item.reference.is_empty() {
                Waveform::new(item.reference.clone(), est.sample_rate)?
            } else {
                phase::reconstruct_with_plan(&data.plan, &item.raw, fb, None, gl)?
            };
            Ok((lf, loss::si_sdr(&est, &reference)?))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    Ok(EvalReport {
        loss_f: rows.iter().map(|r| r.0).sum::<f64>() / n,
        si_sdr: rows.iter().map(|r| r.1).sum::<f64>() / n,
        per_utterance_si_sdr: rows.iter().map(|r| r.1).collect(),
    })
}

/// Frames produced by an utterance of `tokens` tokens in `spec`'s corpus.
pub fn default_frame_cap(tokens: usize, spec: &CorpusSpec, frontend: &MelFrontend) -> usize {
    frontend
        .stft_config()
        .frames_for(tokens * spec.token_samples())
        .unwrap_or(0)
}

/// Free-running prediction of `frame_cap` frames, then reconstruction.
pub fn synthesize(
    params: &ModelParams,
    stats: &NormStats,
    frontend: &MelFrontend,
    tokens: &[usize],
    frame_cap: usize,
    gl: &GriffinLimConfig,
) -> Result<Waveform> {
    let pred = params.forward_free(tokens, frame_cap)?;
    let mel = MelSpectrogram::from_parts(
        pred,
        true,
        Some(stats.clone()),
        frontend.sample_rate(),
        *frontend.stft_config(),
    )?;
    phase::reconstruct_with_plan(&frontend.plan, &mel, &frontend.filterbank, None, gl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_corpus;
    use crate::signal::{StftConfig, WindowKind};

    fn small_setup(size: usize, seed: u64) -> (SyntheticCorpus, Arc<MelFrontend>) {
        let spec = CorpusSpec {
            size,
            vocab: 6,
            min_duration: 0.15,
            max_duration: 0.25,
            token_duration: 0.05,
            sample_rate: 8000,
            seed,
        };
        let stft = StftConfig::new(128, 32, 128, WindowKind::PeriodicHann).unwrap();
        let fe = Arc::new(MelFrontend::new(stft, 8000, 16, 0.0, 4000.0).unwrap());
        (make_corpus(&spec).unwrap(), fe)
    }

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 6,
            embed: 4,
            encoder: 8,
            decoder: 12,
            n_mels: 16,
        }
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_follow_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.adam.beta1, c.adam.beta2), (0.9, 0.999));
        assert_eq!((c.lr_start, c.lr_end), (1e-3, 1e-5));
        assert_eq!(c.adam.l2_weight, 1e-6);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.lambda, 1e-3);
        assert_eq!(c.schedule().decay_start, 200);
    }

    #[test]
    fn total_is_loss_f_plus_weighted_loss_t() {
        let (corpus, fe) = small_setup(6, 1);
        let c = TrainConfig { lambda: 0.05, ..cfg(5) };
        let (_, _, log) = train(&corpus, fe, dims(), &c).unwrap();
        for l in &log {
            let lt = l.loss_t.unwrap();
            assert!((l.total - (l.loss_f + 0.05 * lt)).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_zero_matches_frequency_only() {
        let (corpus, fe) = small_setup(6, 2);
        let joint = TrainConfig { lambda: 0.0, ..cfg(12) };
        let freq = TrainConfig {
            mode: TrainMode::FrequencyOnly,
            ..joint
        };
        let (pj, _, lj) = train(&corpus, fe.clone(), dims(), &joint).unwrap();
        let (pf, _, lf) = train(&corpus, fe, dims(), &freq).unwrap();
        let a: Vec<u64> = lj.iter().map(|l| l.loss_f.to_bits()).collect();
        let b: Vec<u64> = lf.iter().map(|l| l.loss_f.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(pj, pf);
        assert!(lj.iter().all(|l| l.loss_t.is_some()));
        assert!(lf.iter().all(|l| l.loss_t.is_none()));
    }

    #[test]
    fn training_is_deterministic() {
        let (corpus, fe) = small_setup(5, 3);
        let a = train(&corpus, fe.clone(), dims(), &cfg(4)).unwrap();
        let b = train(&corpus, fe, dims(), &cfg(4)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let (corpus, fe) = small_setup(10, 4);
        let data = Dataset::prepare(&corpus, fe, None, None).unwrap();
        let t = Trainer::new(
            TrainConfig {
                mode: TrainMode::FrequencyOnly,
                ..cfg(10)
            },
            dims(),
            data,
        )
        .unwrap();
        assert_eq!(t.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s).1).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(t.batch_indices(3).0, 1);
        assert_ne!(t.batch_indices(0).1, t.batch_indices(3).1);
    }

    #[test]
    fn joint_training_needs_matching_references() {
        let (corpus, fe) = small_setup(4, 5);
        let data = Dataset::prepare(&corpus, fe, None, None).unwrap();
        assert!(Trainer::new(cfg(2), dims(), data).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainConfig { batch_size: 0, ..cfg(1) }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..cfg(1) }.validate().is_err());
        assert!(TrainConfig { gl_train_iterations: 0, ..cfg(1) }.validate().is_err());
        assert!(TrainMode::parse("both").is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let (corpus, fe) = small_setup(4, 6);
        let c = TrainConfig {
            lr_start: 1e300,
            lr_end: 1e300,
            mode: TrainMode::FrequencyOnly,
            ..cfg(50)
        };
        match train(&corpus, fe, dims(), &c) {
            Err(Error::TrainingFailure { step, .. }) => assert!(step < 50),
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn synthesize_is_deterministic_and_rejects_zero_cap() {
        let (corpus, fe) = small_setup(4, 7);
        let (p, stats, _) = train(&corpus, fe.clone(), dims(), &TrainConfig { mode: TrainMode::FrequencyOnly, ..cfg(3) }).unwrap();
        let gl = GriffinLimConfig::new(8, InitPhase::Zero);
        let a = synthesize(&p, &stats, &fe, &[1, 2, 3], 10, &gl).unwrap();
        let b = synthesize(&p, &stats, &fe, &[1, 2, 3], 10, &gl).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), fe.stft_config().output_len(10));
        assert!(synthesize(&p, &stats, &fe, &[1, 2, 3], 0, &gl).is_err());
        assert_eq!(default_frame_cap(3, &corpus.spec, &fe), 34);
    }
}
