use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvwin::FusionPolicy;
use mvwin_cli::commands::{self, Outcome, RunOptions};
use mvwin_cli::{CliError, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "mvwin", version, about = "Dynamic-window long-video pipeline: schedules, camera embeddings, music segmentation, preference losses")]
struct Cli {
    /// JSON pipeline config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw (latents, adapter weights).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: config `out`, else the current directory].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Verify invariants after writing outputs; exit 1 on violation.
    #[arg(long, global = true)]
    check: bool,
    /// Add wall-clock stage timings to run reports (makes them non-reproducible).
    #[arg(long, global = true)]
    timings: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct ScheduleArgs {
    /// Sequence length l in latent frames.
    #[arg(long = "len")]
    total_len: Option<usize>,
    /// Window length f.
    #[arg(long)]
    window: Option<usize>,
    /// Overlap o between consecutive clips.
    #[arg(long)]
    overlap: Option<usize>,
    /// Offset increment p per timestep.
    #[arg(long)]
    shift_step: Option<usize>,
    /// Offset m above which the shift resets.
    #[arg(long)]
    max_offset: Option<usize>,
    /// Minimum clip length n.
    #[arg(long)]
    min_clip: Option<usize>,
    /// Number of denoising steps T.
    #[arg(long)]
    steps: Option<usize>,
}

impl ScheduleArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let p = &mut cfg.scheduler;
        let pairs = [
            (self.total_len, &mut p.total_len),
            (self.window, &mut p.window),
            (self.overlap, &mut p.overlap),
            (self.shift_step, &mut p.shift_step),
            (self.max_offset, &mut p.max_offset),
            (self.min_clip, &mut p.min_clip),
            (self.steps, &mut p.num_steps),
        ];
        for (flag, field) in pairs {
            if let Some(v) = flag {
                *field = v;
            }
        }
    }
}

#[derive(Debug, Args, Default)]
struct DemoArgs {
    /// Overlap fusion: overwrite | blend.
    #[arg(long)]
    fusion: Option<FusionPolicy>,
    /// Latent channels per frame.
    #[arg(long)]
    dim: Option<usize>,
}

impl DemoArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(f) = self.fusion {
            cfg.fusion = f;
        }
        if let Some(d) = self.dim {
            cfg.demo.latent_dim = d;
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a WAV file into bar-aligned segments.
    Segment {
        wav: PathBuf,
        /// Tempo in beats per minute.
        #[arg(long)]
        bpm: f64,
    },
    /// Write the per-timestep window schedule.
    Plan {
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Run the oracle denoiser over the schedule and report seam and accuracy metrics.
    Demo {
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[command(flatten)]
        demo: DemoArgs,
    },
    /// Encode a JSONL camera trajectory as Plücker maps and adapter embeddings.
    Camera {
        trajectory: PathBuf,
        /// Rows of the camera embedding [default: one per pose].
        #[arg(long)]
        latent_frames: Option<usize>,
    },
    /// Select a preference pair from clip scores and evaluate DPO losses.
    Dpo {
        /// JSON array of {sync_c, hand_reward, video_reward}.
        scores: PathBuf,
        /// JSON object with optional `dpo` and `flow_dpo` inputs.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// segment → plan → demo for every music segment.
    Pipeline {
        wav: PathBuf,
        #[arg(long)]
        bpm: f64,
        /// Latent frames per second of music.
        #[arg(long)]
        fps: Option<f64>,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[command(flatten)]
        demo: DemoArgs,
    },
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.adapter.seed = seed;
    }
    let opts = RunOptions {
        out: cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(".")),
        check: cli.check,
        timings: cli.timings,
    };
    match &cli.command {
        Command::Segment { wav, bpm } => {
            cfg.validate()?;
            commands::cmd_segment(&cfg, &opts, wav, *bpm)
        }
        Command::Plan { schedule } => {
            schedule.apply(&mut cfg);
            cfg.validate()?;
            commands::cmd_plan(&cfg, &opts)
        }
        Command::Demo { schedule, demo } => {
            schedule.apply(&mut cfg);
            demo.apply(&mut cfg);
            cfg.validate()?;
            commands::cmd_demo(&cfg, &opts)
        }
        Command::Camera { trajectory, latent_frames } => {
            if latent_frames.is_some() {
                cfg.camera.latent_frames = *latent_frames;
            }
            cfg.validate()?;
            commands::cmd_camera(&cfg, &opts, trajectory)
        }
        Command::Dpo { scores, losses } => {
            cfg.validate()?;
            commands::cmd_dpo(&cfg, &opts, scores, losses.as_deref())
        }
        Command::Pipeline { wav, bpm, fps, schedule, demo } => {
            if schedule.total_len.is_some() {
                return Err(CliError::Invalid("--len is derived from segment durations in pipeline".into()));
            }
            schedule.apply(&mut cfg);
            demo.apply(&mut cfg);
            if let Some(fps) = fps {
                cfg.demo.fps = *fps;
            }
            cfg.validate()?;
            commands::cmd_pipeline(&cfg, &opts, wav, *bpm)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            for path in &outcome.written {
                println!("wrote {}", path.display());
            }
            if let Some(text) = &outcome.stdout {
                print!("{text}");
            }
            match outcome.check_failure {
                Some(msg) => {
                    eprintln!("error: {msg}");
                    ExitCode::from(1)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
