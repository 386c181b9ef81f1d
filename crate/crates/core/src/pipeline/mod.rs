//! The dual-branch edit: inversion, per-step constraint optimization on the
//! target branch, DDIM steps on both branches and mask blending.

mod config;
mod edit;
mod trace;

pub use config::{
    preset_for_edit_type, rate_for, EditConfig, EditSpec, EditType, GuidanceMode, SaSource, SapMode,
    COLOR_TAU1, DEFAULT_BETA, DEFAULT_CFG, DEFAULT_STEPS, DEFAULT_TAU,
};
pub use edit::{
    alignment_score, capture_reference_maps, resolve_tokens, run_edit, structure_score, unifyedit_step,
    EditInput, EditResult, EditSession, FinalScores, ReferenceMaps, StepOutput, StepState,
};
pub use trace::{GradientTrace, TraceRow};
