use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tfjoint::autodiff::audio::{check_joint_path, fixture_mel};
use tfjoint::autodiff::GradCheckConfig;
use tfjoint::io::checkpoint::{load_checkpoint, save_checkpoint};
use tfjoint::io::config::RunConfig;
use tfjoint::io::melfile::{read_mel, write_mel};
use tfjoint::io::report::{error_line, Report};
use tfjoint::io::wav::{read_wav, write_wav, BitDepth};
use tfjoint::mel::{build_filterbank, MelFrontend, MelSpectrogram};
use tfjoint::phase::{self, GriffinLimConfig, InitPhase, RUNTIME_ITERATIONS};
use tfjoint::signal::{StftConfig, Waveform, WindowKind};
use tfjoint::{loss, pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "tfjoint", version, about = "Mel analysis, Griffin-Lim reconstruction and joint time-frequency training")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Waveform to raw mel features.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Mel features to waveform via Griffin-Lim.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gl: GlArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// SI-SDR of an estimate against a reference.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Frequency, time and combined loss. Without waveforms both mels are
    /// reconstructed with Griffin-Lim.
    Loss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, requires = "reference")]
        est: Option<PathBuf>,
        #[arg(long = "ref", requires = "est")]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = loss::DEFAULT_LAMBDA)]
        lambda: f64,
        #[command(flatten)]
        gl: GlArgs,
    },
    /// Reverse-mode vs finite-difference check of the waveform loss path.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Differentiate with respect to normalized features.
        #[arg(long)]
        normalized: bool,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        fd_step: f64,
    },
    /// Train the toy predictor on a synthetic corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (its saved config is used).
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Extra `key=value` settings applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Free-running prediction from a checkpoint, then Griffin-Lim.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tokens: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        gl: GlArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args)]
struct AnalysisArgs {
    #[arg(long, default_value_t = 800)]
    win_length: usize,
    #[arg(long, default_value_t = 200)]
    hop_length: usize,
    #[arg(long, default_value_t = 1024)]
    fft_size: usize,
    #[arg(long, default_value = "hann")]
    window: String,
    #[arg(long, default_value_t = 80)]
    n_mels: usize,
    #[arg(long, default_value_t = 0.0)]
    fmin: f64,
    /// Defaults to half the sample rate.
    #[arg(long)]
    fmax: Option<f64>,
}

#[derive(Args)]
struct GlArgs {
    #[arg(long, default_value_t = RUNTIME_ITERATIONS)]
    iterations: usize,
    /// `zero` or `random:<seed>`.
    #[arg(long, default_value = "zero")]
    init: String,
}

impl GlArgs {
    fn config(&self) -> Result<GriffinLimConfig> {
        Ok(GriffinLimConfig::new(self.iterations, InitPhase::parse(&self.init)?))
    }
}

#[derive(Args)]
struct OutputArgs {
    /// `float32` or `pcm16`.
    #[arg(long, default_value = "float32")]
    bit_depth: String,
}

fn emit(r: Report) {
    println!("{}", r.line());
}

/// Mel files carry no band edges; they are assumed to span 0 Hz to Nyquist.
fn reconstruct_file(m: &MelSpectrogram, gl: &GriffinLimConfig) -> Result<Waveform> {
    let fb = build_filterbank(m.channels(), m.sample_rate, m.stft.fft_size, 0.0, m.sample_rate as f64 / 2.0)?;
    phase::reconstruct(m, &fb, None, gl)
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Extract { input, out, analysis: a } => {
            let w = read_wav(&input)?;
            let stft = StftConfig::new(a.win_length, a.hop_length, a.fft_size, WindowKind::parse(&a.window)?)?;
            let fmax = a.fmax.unwrap_or(w.sample_rate as f64 / 2.0);
            let fe = MelFrontend::new(stft, w.sample_rate, a.n_mels, a.fmin, fmax)?;
            let m = fe.extract(&w)?;
            write_mel(&out, &m)?;
            emit(Report::new()
                .int("frames", m.frames() as u64)
                .int("n_mels", m.channels() as u64)
                .int("sample_rate", m.sample_rate as u64));
        }
        Command::Reconstruct { input, out, gl, output } => {
            let m = read_mel(&input)?;
            let gl = gl.config()?;
            let w = reconstruct_file(&m, &gl)?;
            write_wav(&out, &w, BitDepth::parse(&output.bit_depth)?)?;
            emit(Report::new()
                .int("samples", w.len() as u64)
                .int("iterations", gl.iterations as u64));
        }
        Command::Evaluate { est, reference } => {
            let s = loss::si_sdr(&read_wav(&est)?, &read_wav(&reference)?)?;
            emit(Report::new().num("si_sdr", s).num("loss_t", -s));
        }
        Command::Loss { pred, target, est, reference, lambda, gl } => {
            let p = read_mel(&pred)?;
            let t = read_mel(&target)?;
            let (e, r) = match (est, reference) {
                (Some(e), Some(r)) => (read_wav(&e)?, read_wav(&r)?),
                _ => {
                    let gl = gl.config()?;
                    (reconstruct_file(&p, &gl)?, reconstruct_file(&t, &gl)?)
                }
            };
            let rep = loss::joint_loss(&p, &t, &e, &r, lambda)?;
            emit(Report::new()
                .num("loss_f", rep.loss_f)
                .num("loss_t", rep.loss_t)
                .num("lambda", rep.lambda)
                .num("total", rep.total));
        }
        Command::Gradcheck { iterations, frames, normalized, tol, fd_step } => {
            let fe = MelFrontend::default_16k();
            let target = fixture_mel(&fe, frames)?;
            let cfg = GradCheckConfig {
                tol,
                fd_step,
                min_input_abs: 1e-3,
                ..Default::default()
            };
            let r = check_joint_path(&fe, &target, iterations, normalized, 0.2, &cfg)?;
            let non_smooth = r.excluded.iter().filter(|e| e.1.name() == "non-smooth").count();
            let mut rep = Report::new()
                .flag("passed", r.passed())
                .int("iterations", iterations as u64)
                .int("elements", target.values.len() as u64)
                .int("checked", r.checked as u64)
                .int("excluded_non_smooth", non_smooth as u64)
                .int("excluded_small_input", (r.excluded.len() - non_smooth) as u64)
                .num("max_rel_error", r.max_rel_error)
                .num("tol", r.tol)
                .num("loss_t", r.value)
                .int("failures", r.failures.len() as u64);
            if let Some(w) = &r.worst {
                rep = rep.object(
                    "worst",
                    Report::new()
                        .int("index", w.index as u64)
                        .num("analytic", w.analytic)
                        .num("numeric", w.numeric)
                        .num("rel_error", w.rel_error),
                );
            }
            emit(rep);
            return Ok(r.passed());
        }
        Command::Train { config, out, resume, overrides } => {
            let (mut cfg, ck) = match (&config, &resume) {
                (_, Some(p)) => {
                    let ck = load_checkpoint(p)?;
                    (ck.config.clone(), Some(ck))
                }
                (Some(p), None) => (RunConfig::load(p)?, None),
                (None, None) => (RunConfig::default(), None),
            };
            for o in &overrides {
                cfg.apply(o)?;
            }
            cfg.validate()?;
            let mut trainer = match &ck {
                Some(ck) => pipeline::resume_trainer(ck, &cfg)?,
                None => pipeline::start_trainer(&cfg)?,
            };
            let mut log = match &cfg.log_path {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            };
            let mut io_err = None;
            let entries = trainer.run(|s| {
                if let Some(f) = log.as_mut() {
                    if let Err(e) = writeln!(f, "{}", pipeline::step_report(s).line()) {
                        io_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            if let Some(mut f) = log {
                f.flush()?;
            }
            save_checkpoint(&out, &pipeline::capture(&cfg, &trainer))?;
            let mut rep = Report::new().int("steps", trainer.step as u64).text("mode", cfg.train.mode.name());
            if let (Some(first), Some(last)) = (entries.first(), entries.last()) {
                rep = rep.num("initial_total", first.total).num("final_total", last.total);
            }
            emit(rep.text("checkpoint", &out.display().to_string()));
        }
        Command::Synthesize { ckpt, tokens, out, frames, gl, output } => {
            let ck = load_checkpoint(&ckpt)?;
            let tokens = pipeline::parse_tokens(&tokens, ck.config.corpus.vocab)?;
            let gl = gl.config()?;
            let w = pipeline::synthesize(&ck, &tokens, frames, &gl)?;
            write_wav(&out, &w, BitDepth::parse(&output.bit_depth)?)?;
            emit(Report::new()
                .int("tokens", tokens.len() as u64)
                .int("samples", w.len() as u64)
                .int("iterations", gl.iterations as u64));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = Error::InvalidConfig(e.render().to_string().lines().next().unwrap_or("").to_string());
            println!("{}", error_line(&err));
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            println!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
