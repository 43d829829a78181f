//! Deterministic building blocks for music-driven long-video generation:
//! dynamic-window denoising schedules, a windowed flow-matching executor,
//! Plücker camera encoding with a camera adapter, bar-aligned music
//! segmentation, and preference-optimisation losses.

pub mod camera;
pub mod denoise;
pub mod latent;
pub mod music;
pub mod preference;
pub mod schedule;

pub use denoise::{
    euler_step, flow_matching_loss, interpolate_path, oracle_point_velocity, run_monolithic,
    run_windowed, seam_discontinuity, ConditionSet, FusionPolicy, VelocityModel, WindowedDenoiser,
};
pub use latent::LatentSequence;
pub use schedule::{build_schedule, plan_timestep, ClipWindow, DenoiseSchedule, SchedulerParams, TimestepPlan};
