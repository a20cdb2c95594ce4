//! Bidirectional progressive view scheduling and the end-to-end run:
//! coarse render, occlusion and visibility against refined neighbours,
//! inversion and repainting, then a texture fit to every refined view.

mod config;
mod run;
mod schedule;

pub use config::PipelineConfig;
pub use run::{
    depth_condition, ownership_masks, prompt_embedding, refine_view, resample_texture, run, with_threads, CoarseAsset,
    RunContext, RunOutput, RunSummary, ViewMetrics, ViewOutput,
};
pub use schedule::{build_schedule, ScheduledView, ViewSchedule};
