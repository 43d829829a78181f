use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mvwin::camera::camera_adapter;
use mvwin::camera::{parse_trajectory, trajectory_embedding, TrajectoryParseError};
use mvwin::music::{segment_audio, AudioBuffer, SegmentPlan, SegmentationSettings};
use mvwin::preference::{
    dpo_loss, flow_dpo_loss, select_pair, ClipScores, DpoInputs, FlowDpoInputs, ScoreWeights,
};
use mvwin::{
    build_schedule, oracle_point_velocity, run_monolithic, run_windowed, seam_discontinuity, ConditionSet,
    DenoiseSchedule, FusionPolicy, LatentSequence, SchedulerParams,
};
use ndarray::{Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::config::PipelineConfig;
use crate::error::CliError;

/// Tolerance for the Plücker invariants checked by `camera --check`.
pub const PLUCKER_TOL: f64 = 1e-6;

/// Per-run options shared by all commands.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub check: bool,
    pub timings: bool,
}

/// What a command produced, for the terminal.
#[derive(Debug, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    /// Printed to stdout after the file list (check reports).
    pub stdout: Option<String>,
    /// Set when a `--check` found problems; outputs are still written.
    pub check_failure: Option<String>,
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, canonical::to_string(value)).map_err(|e| CliError::write(path, e))
}

fn write_latents(path: &Path, z: &LatentSequence) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::write(path, e))?;
    z.write_binary(BufWriter::new(f)).map_err(|e| CliError::write(path, e))
}

fn open_wav(path: &Path) -> Result<AudioBuffer, CliError> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("cannot open input {}: {e}", path.display())))?;
    AudioBuffer::read_wav(BufReader::new(f)).map_err(|e| CliError::parse(path, e))
}

/// Metrics of one synthetic windowed-denoising run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub frames: usize,
    pub latent_dim: usize,
    pub fusion: FusionPolicy,
    pub seam_discontinuity: f64,
    /// Largest `|windowed - monolithic|` over all entries.
    pub max_abs_deviation: f64,
    /// Largest per-frame `‖z - target‖ / ‖target‖`.
    pub max_relative_error: f64,
    pub clip_counts: Vec<usize>,
    pub overlap_total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

impl RunReport {
    fn validate(&self) -> Result<(), CliError> {
        for (name, x) in [
            ("seam_discontinuity", self.seam_discontinuity),
            ("max_abs_deviation", self.max_abs_deviation),
            ("max_relative_error", self.max_relative_error),
        ] {
            if !x.is_finite() || x < 0.0 {
                return Err(CliError::Invalid(format!("{name} is {x}")));
            }
        }
        Ok(())
    }
}

fn random_latents(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> LatentSequence {
    let values = Array2::from_shape_simple_fn((frames, dim), || StandardNormal.sample(rng));
    LatentSequence::new(values).expect("gaussian samples are finite")
}

fn max_relative_error(z: &LatentSequence, target: &LatentSequence) -> f64 {
    z.view()
        .axis_iter(Axis(0))
        .zip(target.view().axis_iter(Axis(0)))
        .map(|(a, b)| {
            let mut diff = 0.0;
            Zip::from(&a).and(&b).for_each(|x, y| diff += (x - y) * (x - y));
            let norm = b.dot(&b).sqrt().max(f64::MIN_POSITIVE);
            diff.sqrt() / norm
        })
        .fold(0.0, f64::max)
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Draws a target and a start point from `seed`, runs the point oracle over
/// the schedule and over a single window, and measures both.
pub fn run_demo(
    schedule: &DenoiseSchedule,
    fusion: FusionPolicy,
    latent_dim: usize,
    seed: u64,
    timings: bool,
) -> Result<(LatentSequence, RunReport), CliError> {
    let frames = schedule.params.total_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random_latents(&mut rng, frames, latent_dim);
    let z_init = random_latents(&mut rng, frames, latent_dim);
    let model = oracle_point_velocity(&target);
    let cond = ConditionSet::default();

    let t0 = Instant::now();
    let z = run_windowed(&model, &schedule.plans, &z_init, &cond, fusion).map_err(CliError::invalid)?;
    let windowed_ms = elapsed_ms(t0);
    let t1 = Instant::now();
    let reference =
        run_monolithic(&model, schedule.params.num_steps, &z_init, &cond).map_err(CliError::invalid)?;
    let monolithic_ms = elapsed_ms(t1);

    let max_abs_deviation =
        Zip::from(z.view()).and(reference.view()).fold(0.0f64, |m, a, b| m.max((a - b).abs()));
    let stats = schedule.check();
    let report = RunReport {
        seed,
        frames,
        latent_dim,
        fusion,
        seam_discontinuity: seam_discontinuity(&z).map_err(CliError::invalid)?,
        max_abs_deviation,
        max_relative_error: max_relative_error(&z, &target),
        clip_counts: stats.clip_counts,
        overlap_total: stats.overlap_total,
        timings_ms: timings.then(|| {
            BTreeMap::from([("monolithic".to_string(), monolithic_ms), ("windowed".to_string(), windowed_ms)])
        }),
    };
    report.validate()?;
    Ok((z, report))
}

fn schedule_for(params: &SchedulerParams) -> Result<DenoiseSchedule, CliError> {
    build_schedule(params).map_err(CliError::invalid)
}

pub fn cmd_plan(cfg: &PipelineConfig, opts: &RunOptions) -> Result<Outcome, CliError> {
    let schedule = schedule_for(&cfg.scheduler)?;
    create_out_dir(&opts.out)?;
    let path = opts.out.join("schedule.json");
    write_json(&path, &schedule)?;
    let mut outcome = Outcome { written: vec![path], ..Default::default() };
    if opts.check {
        let report = schedule.check();
        outcome.stdout = Some(canonical::to_string(&report));
        if !report.is_ok() {
            outcome.check_failure = Some(format!("schedule check failed: {}", report.violations.join("; ")));
        }
    }
    Ok(outcome)
}

pub fn cmd_demo(cfg: &PipelineConfig, opts: &RunOptions) -> Result<Outcome, CliError> {
    let t0 = Instant::now();
    let schedule = schedule_for(&cfg.scheduler)?;
    let plan_ms = elapsed_ms(t0);
    let (z, mut report) = run_demo(&schedule, cfg.fusion, cfg.demo.latent_dim, cfg.seed, opts.timings)?;
    if let Some(t) = report.timings_ms.as_mut() {
        t.insert("plan".into(), plan_ms);
    }
    create_out_dir(&opts.out)?;
    let latents = opts.out.join("latents.bin");
    let report_path = opts.out.join("report.json");
    write_latents(&latents, &z)?;
    write_json(&report_path, &report)?;
    let mut outcome = Outcome { written: vec![latents, report_path], ..Default::default() };
    if opts.check {
        let stats = schedule.check();
        outcome.stdout = Some(canonical::to_string(&stats));
        if !stats.is_ok() {
            outcome.check_failure = Some(format!("schedule check failed: {}", stats.violations.join("; ")));
        }
    }
    Ok(outcome)
}

/// `segments.json` contents.
#[derive(Debug, Clone, Serialize)]
pub struct SegmentReport {
    #[serde(flatten)]
    pub plan: SegmentPlan,
    pub mean_segment: f64,
    pub bar_target_met: bool,
}

fn segment(path: &Path, bpm: f64, settings: &SegmentationSettings) -> Result<SegmentReport, CliError> {
    let audio = open_wav(path)?;
    let (_, plan) = segment_audio(&audio, bpm, settings).map_err(CliError::invalid)?;
    Ok(SegmentReport {
        mean_segment: plan.mean_segment(),
        bar_target_met: plan.meets_bar_target(settings.bar_tolerance),
        plan,
    })
}

pub fn cmd_segment(cfg: &PipelineConfig, opts: &RunOptions, wav: &Path, bpm: f64) -> Result<Outcome, CliError> {
    let report = segment(wav, bpm, &cfg.segmentation)?;
    create_out_dir(&opts.out)?;
    let path = opts.out.join("segments.json");
    write_json(&path, &report)?;
    let mut outcome = Outcome { written: vec![path], ..Default::default() };
    if opts.check && !report.bar_target_met {
        outcome.check_failure = Some(format!(
            "mean segment {:.4} s is not within {} of one bar ({:.4} s)",
            report.mean_segment,
            cfg.segmentation.bar_tolerance,
            240.0 / bpm
        ));
    }
    Ok(outcome)
}

/// `camera.json` contents.
#[derive(Debug, Clone, Serialize)]
pub struct CameraReport {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub embedding_shape: [usize; 2],
    pub unit_norm_error: f64,
    pub orthogonality_error: f64,
}

pub fn cmd_camera(cfg: &PipelineConfig, opts: &RunOptions, trajectory: &Path) -> Result<Outcome, CliError> {
    let text = crate::read_input(trajectory)?;
    let poses = parse_trajectory(&text).map_err(|e| match e {
        TrajectoryParseError::Malformed { .. } => CliError::parse(trajectory, e),
        _ => CliError::invalid(e),
    })?;
    let pmap = trajectory_embedding(&poses, cfg.camera.convention).map_err(CliError::invalid)?;
    let (height, width) = pmap.resolution();
    let latent_frames = cfg.camera.latent_frames.unwrap_or(pmap.num_frames());
    let dim = cfg.adapter.output_dim(height, width).map_err(CliError::invalid)?;
    let embedding = camera_adapter(&pmap, &cfg.adapter, (latent_frames, dim)).map_err(CliError::invalid)?;
    let embedding = LatentSequence::new(embedding).map_err(CliError::invalid)?;
    let (unit_norm_error, orthogonality_error) = pmap.invariant_errors();
    let report = CameraReport {
        frames: pmap.num_frames(),
        height,
        width,
        embedding_shape: [latent_frames, dim],
        unit_norm_error,
        orthogonality_error,
    };

    create_out_dir(&opts.out)?;
    let pluecker = opts.out.join("pluecker.bin");
    let f = File::create(&pluecker).map_err(|e| CliError::write(&pluecker, e))?;
    pmap.write_binary(BufWriter::new(f)).map_err(|e| CliError::write(&pluecker, e))?;
    let emb_path = opts.out.join("embedding.bin");
    write_latents(&emb_path, &embedding)?;
    let report_path = opts.out.join("camera.json");
    write_json(&report_path, &report)?;

    let mut outcome = Outcome { written: vec![pluecker, emb_path, report_path], ..Default::default() };
    if opts.check {
        outcome.stdout = Some(format!(
            "unit-norm error {unit_norm_error:.3e}, orthogonality error {orthogonality_error:.3e} (tolerance {PLUCKER_TOL:e})\n"
        ));
        if unit_norm_error > PLUCKER_TOL || orthogonality_error > PLUCKER_TOL {
            outcome.check_failure = Some("Plücker invariants violated".into());
        }
    }
    Ok(outcome)
}

/// Velocity rows for the Flow-DPO loss, as nested arrays in the losses file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDpoRecord {
    pub v_true_w: Vec<Vec<f64>>,
    pub v_pred_w: Vec<Vec<f64>>,
    pub v_ref_w: Vec<Vec<f64>>,
    pub v_true_l: Vec<Vec<f64>>,
    pub v_pred_l: Vec<Vec<f64>>,
    pub v_ref_l: Vec<Vec<f64>>,
    pub beta_t: f64,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<Array2<f64>, CliError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Invalid(format!("{name} has rows of unequal length")));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(CliError::invalid)
}

impl FlowDpoRecord {
    fn to_inputs(&self) -> Result<FlowDpoInputs, CliError> {
        Ok(FlowDpoInputs {
            v_true_w: matrix("v_true_w", &self.v_true_w)?,
            v_pred_w: matrix("v_pred_w", &self.v_pred_w)?,
            v_ref_w: matrix("v_ref_w", &self.v_ref_w)?,
            v_true_l: matrix("v_true_l", &self.v_true_l)?,
            v_pred_l: matrix("v_pred_l", &self.v_pred_l)?,
            v_ref_l: matrix("v_ref_l", &self.v_ref_l)?,
            beta_t: self.beta_t,
        })
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossInputs {
    pub dpo: Option<DpoInputs>,
    pub flow_dpo: Option<FlowDpoRecord>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dpo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_dpo: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DpoReport {
    pub winner: usize,
    pub loser: usize,
    pub composites: Vec<f64>,
    pub weights: ScoreWeights,
    pub losses: LossReport,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = crate::read_input(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))
}

pub fn cmd_dpo(
    cfg: &PipelineConfig,
    opts: &RunOptions,
    scores: &Path,
    losses: Option<&Path>,
) -> Result<Outcome, CliError> {
    let candidates: Vec<ClipScores> = read_json(scores)?;
    let inputs: LossInputs = losses.map(read_json).transpose()?.unwrap_or_default();
    let pair = select_pair(&candidates, &cfg.weights).map_err(CliError::invalid)?;
    let losses = LossReport {
        dpo: inputs.dpo.as_ref().map(dpo_loss).transpose().map_err(CliError::invalid)?,
        flow_dpo: match &inputs.flow_dpo {
            Some(rec) => Some(flow_dpo_loss(&rec.to_inputs()?).map_err(CliError::invalid)?),
            None => None,
        },
    };
    let report = DpoReport {
        winner: pair.winner,
        loser: pair.loser,
        composites: pair.composites,
        weights: cfg.weights,
        losses,
    };
    create_out_dir(&opts.out)?;
    let path = opts.out.join("dpo.json");
    write_json(&path, &report)?;
    Ok(Outcome { written: vec![path], ..Default::default() })
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSegment {
    pub index: usize,
    pub span: [f64; 2],
    pub report: RunReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub fps: f64,
    pub segmentation: SegmentReport,
    pub segments: Vec<PipelineSegment>,
}

/// Latent frames for a segment of `seconds` at `fps`, at least one.
pub fn segment_frames(seconds: f64, fps: f64) -> usize {
    ((seconds * fps).round() as usize).max(1)
}

pub fn cmd_pipeline(cfg: &PipelineConfig, opts: &RunOptions, wav: &Path, bpm: f64) -> Result<Outcome, CliError> {
    let segmentation = segment(wav, bpm, &cfg.segmentation)?;
    create_out_dir(&opts.out)?;
    let mut written = Vec::new();
    let mut segments = Vec::with_capacity(segmentation.plan.segments.len());
    let mut violations = Vec::new();
    for (index, &[start, end]) in segmentation.plan.segments.iter().enumerate() {
        let params = SchedulerParams { total_len: segment_frames(end - start, cfg.demo.fps), ..cfg.scheduler };
        let schedule = schedule_for(&params)?;
        if opts.check {
            let stats = schedule.check();
            violations.extend(stats.violations.into_iter().map(|v| format!("segment {index}: {v}")));
        }
        let seed = cfg.seed.wrapping_add(index as u64);
        let (z, report) = run_demo(&schedule, cfg.fusion, cfg.demo.latent_dim, seed, opts.timings)?;
        let path = opts.out.join(format!("latents_{index:03}.bin"));
        write_latents(&path, &z)?;
        written.push(path);
        segments.push(PipelineSegment { index, span: [start, end], report });
    }
    let report = PipelineReport { fps: cfg.demo.fps, segmentation, segments };
    let path = opts.out.join("pipeline.json");
    write_json(&path, &report)?;
    written.push(path);
    let check_failure = (!violations.is_empty()).then(|| format!("schedule check failed: {}", violations.join("; ")));
    Ok(Outcome { written, stdout: None, check_failure })
}
