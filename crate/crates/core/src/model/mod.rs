//! The referring-segmentation model: backbone, language encoder, query
//! generation, transformer, query balance and mask decoder.

mod check;
mod config;
mod forward;
mod params;

pub use check::{
    check_parameter_gradients, end_to_end_check, pick_coordinates, ParamGradCheck, END_TO_END_SHRINKS, END_TO_END_STEP,
};
pub use config::{QuerySource, VltConfig};
pub use forward::{fuse, language_gate, loss, qbm_apply, ForwardOptions, ForwardTrace, ForwardVars, LanguageVars};
pub use params::{BackboneParams, MaskDecoderParams, ParamCounts, QbmParams, QgmParams, VltParams, ATTENTION_PREFIXES};
