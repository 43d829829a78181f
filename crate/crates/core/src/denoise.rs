//! Windowed flow-matching execution.
//!
//! A schedule's timesteps map to flow times `t = 0, 1/T, ..., (T-1)/T` and are
//! integrated with explicit Euler steps of size `1/T`, moving from noise at
//! `t = 0` toward data at `t = 1`. Within a timestep every clip reads the same
//! entry buffer; the per-clip results are merged into the next buffer by a
//! [`FusionPolicy`] in clip order, so clip evaluation may run in parallel
//! without changing the result.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{LatentError, LatentSequence};
use crate::schedule::{ClipWindow, TimestepPlan};

/// Denominator floor for the point oracle near `t = 1`.
pub const ORACLE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("{what} has {actual} entries, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("flow time {0} outside [0, 1]")]
    FlowTime(f64),
    #[error("timestep {step}: clip [{start}, {end}) exceeds sequence length {len}")]
    ClipOutOfRange {
        step: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("timestep {step}: frame {frame} is not covered by any clip")]
    Uncovered { step: usize, frame: usize },
    #[error("model returned shape {actual:?} for clip of shape {expected:?}")]
    ModelShape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("timestep {step}: model output for clip [{start}, {end}) is not finite")]
    NonFinite { step: usize, start: usize, end: usize },
    #[error("schedule has no timesteps")]
    EmptySchedule,
    #[error("seam discontinuity needs at least 2 frames, got {0}")]
    TooShort(usize),
}

/// Optional conditioning payloads. Per-frame payloads are `L × k` matrices
/// sliced along frames for each clip; global payloads are passed through.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionSet {
    pub audio: Option<Array2<f64>>,
    pub camera: Option<Array2<f64>>,
    pub text: Option<Array1<f64>>,
    pub image: Option<Array1<f64>>,
}

/// Condition payloads restricted to one clip.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConditionSlice<'a> {
    pub audio: Option<ArrayView2<'a, f64>>,
    pub camera: Option<ArrayView2<'a, f64>>,
    pub text: Option<ArrayView1<'a, f64>>,
    pub image: Option<ArrayView1<'a, f64>>,
}

impl ConditionSet {
    pub fn validate(&self, num_frames: usize) -> Result<(), DenoiseError> {
        for (what, c) in [("audio condition", &self.audio), ("camera condition", &self.camera)] {
            if let Some(c) = c {
                if c.nrows() != num_frames {
                    return Err(DenoiseError::Length {
                        what,
                        expected: num_frames,
                        actual: c.nrows(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn slice(&self, window: ClipWindow) -> ConditionSlice<'_> {
        fn rows(m: &Option<Array2<f64>>, w: ClipWindow) -> Option<ArrayView2<'_, f64>> {
            m.as_ref().map(|m| m.slice(s![w.start..w.end, ..]))
        }
        ConditionSlice {
            audio: rows(&self.audio, window),
            camera: rows(&self.camera, window),
            text: self.text.as_ref().map(|a| a.view()),
            image: self.image.as_ref().map(|a| a.view()),
        }
    }
}

/// Everything a velocity model sees besides the clip latents.
#[derive(Debug, Clone, Copy)]
pub struct ClipContext<'a> {
    pub window: ClipWindow,
    pub t: f64,
    pub cond: ConditionSlice<'a>,
}

/// Predicts the flow velocity for one clip. Must return a matrix shaped like
/// `clip` and be deterministic.
pub trait VelocityModel: Sync {
    fn velocity(&self, clip: ArrayView2<'_, f64>, ctx: &ClipContext<'_>) -> Array2<f64>;
}

impl<F> VelocityModel for F
where
    F: Fn(ArrayView2<'_, f64>, &ClipContext<'_>) -> Array2<f64> + Sync,
{
    fn velocity(&self, clip: ArrayView2<'_, f64>, ctx: &ClipContext<'_>) -> Array2<f64> {
        self(clip, ctx)
    }
}

/// Always predicts zero velocity.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroVelocity;

impl VelocityModel for ZeroVelocity {
    fn velocity(&self, clip: ArrayView2<'_, f64>, _: &ClipContext<'_>) -> Array2<f64> {
        Array2::zeros(clip.raw_dim())
    }
}

/// `v(z, t) = (target - z) / (1 - t)`: the straight-line field that carries
/// any point to `target` by `t = 1`.
#[derive(Debug, Clone)]
pub struct PointOracle {
    target: Array2<f64>,
}

pub fn oracle_point_velocity(target: &LatentSequence) -> PointOracle {
    PointOracle {
        target: target.values().clone(),
    }
}

impl VelocityModel for PointOracle {
    fn velocity(&self, clip: ArrayView2<'_, f64>, ctx: &ClipContext<'_>) -> Array2<f64> {
        let w = ctx.window;
        let target = self.target.slice(s![w.start..w.end, ..]);
        let denom = (1.0 - ctx.t).max(ORACLE_EPS);
        Zip::from(&target).and(&clip).map_collect(|&g, &z| (g - z) / denom)
    }
}

/// Discrete heat flow inside the clip: `v_i = k (z_{i-1} - 2 z_i + z_{i+1})`,
/// with the missing neighbour at each clip edge replaced by the edge frame.
/// Frames only influence each other when they share a clip.
#[derive(Debug, Clone, Copy)]
pub struct NeighborCoupled {
    pub coupling: f64,
}

impl VelocityModel for NeighborCoupled {
    fn velocity(&self, clip: ArrayView2<'_, f64>, _: &ClipContext<'_>) -> Array2<f64> {
        let n = clip.nrows();
        let mut v = Array2::zeros(clip.raw_dim());
        for i in 0..n {
            let prev = clip.row(i.saturating_sub(1));
            let next = clip.row((i + 1).min(n - 1));
            let cur = clip.row(i);
            let mut out = v.row_mut(i);
            Zip::from(&mut out)
                .and(&prev)
                .and(&cur)
                .and(&next)
                .for_each(|o, &a, &b, &c| *o = self.coupling * (a - 2.0 * b + c));
        }
        v
    }
}

/// How overlapping clip outputs are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionPolicy {
    /// The clip later in plan order wins.
    Overwrite,
    /// Linear crossfade across each overlap; weights are normalised per frame.
    #[default]
    Blend,
}

impl std::str::FromStr for FusionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "overwrite" => Ok(Self::Overwrite),
            "blend" => Ok(Self::Blend),
            other => Err(format!("unknown fusion policy {other:?} (expected overwrite|blend)")),
        }
    }
}

/// Mean squared error against the flow-matching target `z1 - z0`.
pub fn flow_matching_loss(
    predicted: ArrayView2<'_, f64>,
    z0: &LatentSequence,
    z1: &LatentSequence,
) -> Result<f64, DenoiseError> {
    z1.ensure_shape(z0.shape())?;
    if predicted.dim() != z0.shape() {
        return Err(LatentError::Shape {
            expected: z0.shape(),
            actual: predicted.dim(),
        }
        .into());
    }
    let n = predicted.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    Zip::from(&predicted)
        .and(z0.view())
        .and(z1.view())
        .for_each(|&p, &a, &b| sum += (p - (b - a)).powi(2));
    Ok(sum / n as f64)
}

/// `(1 - t) z0 + t z1`.
pub fn interpolate_path(z0: &LatentSequence, z1: &LatentSequence, t: f64) -> Result<LatentSequence, DenoiseError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DenoiseError::FlowTime(t));
    }
    z1.ensure_shape(z0.shape())?;
    let values = Zip::from(z0.view())
        .and(z1.view())
        .map_collect(|&a, &b| (1.0 - t) * a + t * b);
    Ok(LatentSequence::new(values)?)
}

/// `z + dt v`.
pub fn euler_step(
    z: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    dt: f64,
) -> Result<Array2<f64>, DenoiseError> {
    if z.dim() != v.dim() {
        return Err(DenoiseError::ModelShape {
            expected: z.dim(),
            actual: v.dim(),
        });
    }
    Ok(Zip::from(&z).and(&v).map_collect(|&z, &v| z + dt * v))
}

/// Largest L2 distance between consecutive frames.
pub fn seam_discontinuity(z: &LatentSequence) -> Result<f64, DenoiseError> {
    let v = z.view();
    if v.nrows() < 2 {
        return Err(DenoiseError::TooShort(v.nrows()));
    }
    let max = v
        .axis_windows(Axis(0), 2)
        .into_iter()
        .map(|w| {
            w.row(1)
                .iter()
                .zip(w.row(0).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    Ok(max)
}

/// Executes window plans over a latent sequence.
#[derive(Debug, Clone, Copy)]
pub struct WindowedDenoiser {
    pub fusion: FusionPolicy,
    /// Evaluate the clips of a timestep on the rayon pool.
    pub parallel: bool,
}

impl Default for WindowedDenoiser {
    fn default() -> Self {
        Self {
            fusion: FusionPolicy::default(),
            parallel: true,
        }
    }
}

impl WindowedDenoiser {
    pub fn new(fusion: FusionPolicy) -> Self {
        Self { fusion, ..Self::default() }
    }

    pub fn run(
        &self,
        model: &dyn VelocityModel,
        plans: &[TimestepPlan],
        z_init: &LatentSequence,
        cond: &ConditionSet,
    ) -> Result<LatentSequence, DenoiseError> {
        if plans.is_empty() {
            return Err(DenoiseError::EmptySchedule);
        }
        let (len, dim) = z_init.shape();
        cond.validate(len)?;
        for plan in plans {
            for c in &plan.clips {
                if c.start >= c.end || c.end > len {
                    return Err(DenoiseError::ClipOutOfRange {
                        step: plan.step,
                        start: c.start,
                        end: c.end,
                        len,
                    });
                }
            }
        }

        let steps = plans.len();
        let dt = 1.0 / steps as f64;
        let mut current = z_init.values().clone();
        for (index, plan) in plans.iter().enumerate() {
            let t = index as f64 / steps as f64;
            let update = |c: &ClipWindow| -> Result<Array2<f64>, DenoiseError> {
                let clip = current.slice(s![c.start..c.end, ..]);
                let ctx = ClipContext { window: *c, t, cond: cond.slice(*c) };
                let v = model.velocity(clip, &ctx);
                if v.dim() != clip.dim() {
                    return Err(DenoiseError::ModelShape {
                        expected: clip.dim(),
                        actual: v.dim(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(DenoiseError::NonFinite {
                        step: plan.step,
                        start: c.start,
                        end: c.end,
                    });
                }
                euler_step(clip, v.view(), dt)
            };
            let outputs: Vec<Array2<f64>> = if self.parallel {
                plan.clips.par_iter().map(update).collect::<Result<_, _>>()?
            } else {
                plan.clips.iter().map(update).collect::<Result<_, _>>()?
            };
            current = fuse(self.fusion, plan, &outputs, (len, dim))?;
        }
        Ok(LatentSequence::new(current)?)
    }
}

/// Runs `plans` with the default (parallel) executor.
pub fn run_windowed(
    model: &dyn VelocityModel,
    plans: &[TimestepPlan],
    z_init: &LatentSequence,
    cond: &ConditionSet,
    fusion: FusionPolicy,
) -> Result<LatentSequence, DenoiseError> {
    WindowedDenoiser::new(fusion).run(model, plans, z_init, cond)
}

/// Reference executor: one window spanning the whole sequence, same time grid.
pub fn run_monolithic(
    model: &dyn VelocityModel,
    steps: usize,
    z_init: &LatentSequence,
    cond: &ConditionSet,
) -> Result<LatentSequence, DenoiseError> {
    if steps == 0 {
        return Err(DenoiseError::EmptySchedule);
    }
    let len = z_init.num_frames();
    cond.validate(len)?;
    let window = ClipWindow::new(0, len);
    let dt = 1.0 / steps as f64;
    let mut z = z_init.values().clone();
    for k in (1..=steps).rev() {
        let t = (steps - k) as f64 / steps as f64;
        let ctx = ClipContext { window, t, cond: cond.slice(window) };
        let v = model.velocity(z.view(), &ctx);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DenoiseError::NonFinite { step: k, start: 0, end: len });
        }
        z = euler_step(z.view(), v.view(), dt)?;
    }
    Ok(LatentSequence::new(z)?)
}

/// Per-frame crossfade weights of `clip` given the other clips of its plan.
/// Ramps span the largest overlap on each side, so for any two clips sharing
/// `k` frames the weights across the overlap are `(k-j)/(k+1)` and
/// `(j+1)/(k+1)`.
pub fn blend_weights(clip: ClipWindow, others: &[ClipWindow]) -> Vec<f64> {
    let mut ramp_in = 0usize;
    let mut ramp_out = 0usize;
    for o in others {
        if *o == clip {
            continue;
        }
        if o.start < clip.start && o.end > clip.start {
            ramp_in = ramp_in.max(o.end.min(clip.end) - clip.start);
        }
        if o.end > clip.end && o.start < clip.end {
            ramp_out = ramp_out.max(clip.end - o.start.max(clip.start));
        }
    }
    (clip.start..clip.end)
        .map(|i| {
            let j = i - clip.start;
            let mut w: f64 = 1.0;
            if j < ramp_in {
                w = w.min((j + 1) as f64 / (ramp_in + 1) as f64);
            }
            let to_end = clip.end - i;
            if to_end <= ramp_out {
                w = w.min(to_end as f64 / (ramp_out + 1) as f64);
            }
            w
        })
        .collect()
}

fn fuse(
    policy: FusionPolicy,
    plan: &TimestepPlan,
    outputs: &[Array2<f64>],
    shape: (usize, usize),
) -> Result<Array2<f64>, DenoiseError> {
    let mut acc = Array2::<f64>::zeros(shape);
    let mut weight = vec![0.0f64; shape.0];
    match policy {
        FusionPolicy::Overwrite => {
            for (c, out) in plan.clips.iter().zip(outputs) {
                acc.slice_mut(s![c.start..c.end, ..]).assign(out);
                weight[c.start..c.end].iter_mut().for_each(|w| *w = 1.0);
            }
        }
        FusionPolicy::Blend => {
            // fused = first + sum_k w_k (x_k - first) / sum_k w_k, which is
            // exact wherever all contributions agree.
            let mut delta = Array2::<f64>::zeros(shape);
            for (c, out) in plan.clips.iter().zip(outputs) {
                let ws = blend_weights(*c, &plan.clips);
                for (j, (row, w)) in out.axis_iter(Axis(0)).zip(ws).enumerate() {
                    let i = c.start + j;
                    if weight[i] == 0.0 {
                        acc.row_mut(i).assign(&row);
                    } else {
                        Zip::from(delta.row_mut(i))
                            .and(acc.row(i))
                            .and(&row)
                            .for_each(|d, &first, &x| *d += w * (x - first));
                    }
                    weight[i] += w;
                }
            }
            for (i, &w) in weight.iter().enumerate() {
                if w != 0.0 {
                    Zip::from(acc.row_mut(i))
                        .and(delta.row(i))
                        .for_each(|a, &d| {
                            if d != 0.0 {
                                *a += d / w;
                            }
                        });
                }
            }
        }
    }
    if let Some(frame) = weight.iter().position(|&w| w == 0.0) {
        return Err(DenoiseError::Uncovered { step: plan.step, frame });
    }
    Ok(acc)
}
