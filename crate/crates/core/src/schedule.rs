//! Timestep-aware dynamic window planning.
//!
//! For every denoising timestep the frame range `[0, l)` is cut into
//! overlapping clips of at most `window` frames. The first clip is shortened
//! by a shift offset that grows by `shift_step` each timestep and resets to
//! zero once it exceeds `max_offset`. A final clip that would be shorter than
//! `min_clip` is extended backwards, enlarging its overlap with the previous
//! clip. Windows never wrap around the end of the sequence.

use std::fmt;

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

/// Parameters of the dynamic window schedule. All lengths are in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerParams {
    pub total_len: usize,
    pub window: usize,
    pub overlap: usize,
    pub shift_step: usize,
    pub max_offset: usize,
    pub min_clip: usize,
    pub num_steps: usize,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            total_len: 100,
            window: 40,
            overlap: 10,
            shift_step: 5,
            max_offset: 10,
            min_clip: 20,
            num_steps: 4,
        }
    }
}

/// One violated parameter constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamViolation {
    EmptySequence,
    ZeroSteps,
    ZeroOverlap,
    ZeroShiftStep,
    OverlapNotBelowMinClip { overlap: usize, min_clip: usize },
    MinClipExceedsWindow { min_clip: usize, window: usize },
    FirstClipTooShort { window: usize, max_offset: usize, min_clip: usize },
}

impl fmt::Display for ParamViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptySequence => write!(f, "l < 1 (total_len 0)"),
            Self::ZeroSteps => write!(f, "T < 1 (num_steps 0)"),
            Self::ZeroOverlap => write!(f, "o < 1 (overlap 0)"),
            Self::ZeroShiftStep => write!(f, "p < 1 (shift_step 0)"),
            Self::OverlapNotBelowMinClip { overlap, min_clip } => {
                write!(f, "o ≥ n (overlap {overlap}, min_clip {min_clip})")
            }
            Self::MinClipExceedsWindow { min_clip, window } => {
                write!(f, "n > f (min_clip {min_clip}, window {window})")
            }
            Self::FirstClipTooShort { window, max_offset, min_clip } => write!(
                f,
                "f−m < n (window {window}, max_offset {max_offset}, min_clip {min_clip})"
            ),
        }
    }
}

/// Every constraint violated by a parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid scheduler parameters: {}", join(.0))]
pub struct ValidationErrors(pub Vec<ParamViolation>);

fn join(v: &[ParamViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error(transparent)]
    Invalid(#[from] ValidationErrors),
    #[error("shift offset {alpha} exceeds max offset {max_offset}")]
    OffsetOutOfRange { alpha: usize, max_offset: usize },
}

impl SchedulerParams {
    /// Collects every violated constraint; `Ok` only if all of them hold.
    pub fn validate(&self) -> Result<(), ValidationErrors> {
        let mut out = Vec::new();
        if self.total_len < 1 {
            out.push(ParamViolation::EmptySequence);
        }
        if self.num_steps < 1 {
            out.push(ParamViolation::ZeroSteps);
        }
        if self.overlap < 1 {
            out.push(ParamViolation::ZeroOverlap);
        }
        if self.shift_step < 1 {
            out.push(ParamViolation::ZeroShiftStep);
        }
        if self.overlap >= self.min_clip {
            out.push(ParamViolation::OverlapNotBelowMinClip {
                overlap: self.overlap,
                min_clip: self.min_clip,
            });
        }
        if self.min_clip > self.window {
            out.push(ParamViolation::MinClipExceedsWindow {
                min_clip: self.min_clip,
                window: self.window,
            });
        }
        if (self.window as i64) - (self.max_offset as i64) < self.min_clip as i64 {
            out.push(ParamViolation::FirstClipTooShort {
                window: self.window,
                max_offset: self.max_offset,
                min_clip: self.min_clip,
            });
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(out))
        }
    }
}

/// Half-open frame span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClipWindow {
    pub start: usize,
    pub end: usize,
}

impl ClipWindow {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }

    /// Number of frames shared with `other`.
    pub fn overlap_with(&self, other: &ClipWindow) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }
}

impl Serialize for ClipWindow {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(2))?;
        seq.serialize_element(&self.start)?;
        seq.serialize_element(&self.end)?;
        seq.end()
    }
}

impl<'de> Deserialize<'de> for ClipWindow {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [start, end] = <[usize; 2]>::deserialize(d)?;
        if start >= end {
            return Err(serde::de::Error::custom(format!(
                "empty clip window [{start}, {end})"
            )));
        }
        Ok(Self { start, end })
    }
}

/// The clips denoised at one timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    #[serde(rename = "t")]
    pub step: usize,
    #[serde(rename = "alpha")]
    pub alpha_used: usize,
    pub clips: Vec<ClipWindow>,
}

impl TimestepPlan {
    /// A plan covering `[0, total_len)` with a single clip.
    pub fn single(step: usize, total_len: usize) -> Self {
        Self {
            step,
            alpha_used: 0,
            clips: vec![ClipWindow::new(0, total_len)],
        }
    }
}

/// Window plans for every timestep `t = T, ..., 1`, in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseSchedule {
    pub params: SchedulerParams,
    pub plans: Vec<TimestepPlan>,
}

/// Plans the clips of a single timestep for shift offset `alpha`.
pub fn plan_timestep(params: &SchedulerParams, alpha: usize) -> Result<Vec<ClipWindow>, ScheduleError> {
    params.validate()?;
    if alpha > params.max_offset {
        return Err(ScheduleError::OffsetOutOfRange {
            alpha,
            max_offset: params.max_offset,
        });
    }
    Ok(clips_for_offset(params, alpha))
}

fn clips_for_offset(params: &SchedulerParams, alpha: usize) -> Vec<ClipWindow> {
    let l = params.total_len;
    let f = params.window;
    if l <= f {
        return vec![ClipWindow::new(0, l)];
    }
    // f - alpha >= f - m >= n > 0, and < l since l > f.
    let mut s = 0;
    let mut e = f - alpha;
    let mut clips = vec![ClipWindow::new(s, e)];
    while e < l {
        s = e - params.overlap;
        if s + f < l {
            e = s + f;
        } else {
            e = l;
            if e - s < params.min_clip {
                s = e.saturating_sub(params.min_clip);
            }
        }
        clips.push(ClipWindow::new(s, e));
    }
    clips
}

/// Builds the full schedule, accumulating and resetting the shift offset.
pub fn build_schedule(params: &SchedulerParams) -> Result<DenoiseSchedule, ScheduleError> {
    params.validate()?;
    let mut alpha = 0;
    let mut plans = Vec::with_capacity(params.num_steps);
    for step in (1..=params.num_steps).rev() {
        if alpha > params.max_offset {
            alpha = 0;
        }
        plans.push(TimestepPlan {
            step,
            alpha_used: alpha,
            clips: clips_for_offset(params, alpha),
        });
        alpha += params.shift_step;
    }
    Ok(DenoiseSchedule {
        params: *params,
        plans,
    })
}

/// Back-to-back chunks of `window` frames with no overlap and no shift,
/// repeated for each of `num_steps` timesteps. Used as a comparison baseline.
pub fn disjoint_chunks(total_len: usize, window: usize, num_steps: usize) -> Vec<TimestepPlan> {
    let window = window.max(1);
    let clips: Vec<ClipWindow> = (0..total_len)
        .step_by(window)
        .map(|s| ClipWindow::new(s, (s + window).min(total_len)))
        .collect();
    (1..=num_steps)
        .rev()
        .map(|step| TimestepPlan { step, alpha_used: 0, clips: clips.clone() })
        .collect()
}

impl DenoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.plans.len()
    }

    /// Structural checks on every plan: coverage, overlaps, lengths, bounds.
    pub fn check(&self) -> ScheduleReport {
        let p = &self.params;
        let mut report = ScheduleReport::default();
        let min_len = p.min_clip.min(p.total_len);
        for plan in &self.plans {
            report.clip_counts.push(plan.clips.len());
            let mut covered = vec![0usize; p.total_len];
            for (i, c) in plan.clips.iter().enumerate() {
                if c.is_empty() || c.end > p.total_len {
                    report.violations.push(format!(
                        "t={}: clip [{}, {}) out of range", plan.step, c.start, c.end
                    ));
                    continue;
                }
                if c.len() > p.window || c.len() < min_len {
                    report.violations.push(format!(
                        "t={}: clip [{}, {}) length {} outside [{}, {}]",
                        plan.step, c.start, c.end, c.len(), min_len, p.window
                    ));
                }
                for slot in &mut covered[c.start..c.end] {
                    *slot += 1;
                }
                if i > 0 {
                    let prev = &plan.clips[i - 1];
                    let ov = prev.end.saturating_sub(c.start);
                    report.overlap_total += ov;
                    let last = i + 1 == plan.clips.len();
                    if c.start <= prev.start || (!last && ov != p.overlap) || (last && ov < p.overlap) {
                        report.violations.push(format!(
                            "t={}: clips [{}, {}) and [{}, {}) overlap by {} (expected {}{})",
                            plan.step,
                            prev.start,
                            prev.end,
                            c.start,
                            c.end,
                            ov,
                            if last { "≥ " } else { "" },
                            p.overlap
                        ));
                    }
                }
            }
            if let Some(frame) = covered.iter().position(|&n| n == 0) {
                report
                    .violations
                    .push(format!("t={}: frame {frame} not covered", plan.step));
            }
            if plan.alpha_used > p.max_offset {
                report.violations.push(format!(
                    "t={}: alpha {} exceeds max offset {}",
                    plan.step, plan.alpha_used, p.max_offset
                ));
            }
        }
        if self.plans.len() != p.num_steps {
            report.violations.push(format!(
                "expected {} plans, found {}",
                p.num_steps,
                self.plans.len()
            ));
        }
        report
    }
}

/// Result of [`DenoiseSchedule::check`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ScheduleReport {
    pub clip_counts: Vec<usize>,
    pub overlap_total: usize,
    pub violations: Vec<String>,
}

impl ScheduleReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}
