//! Parameterised layers built on the autodiff [`Graph`](crate::tensor::Graph).

mod attention;
mod conv;
mod gru;
mod linear;
mod params;
mod posenc;
mod transformer;

pub use attention::{scaled_dot_attention, Attended, MhaParams};
pub use conv::ConvParams;
pub use gru::{GruOutput, GruParams};
pub use linear::LinearParams;
pub use params::{Initializer, ParamId, ParamSet, Session};
pub use posenc::sine_pos_embed_2d;
pub use transformer::{
    DecoderLayerParams, EncoderLayerParams, FeedForward, LayerNormParams, LayerOutput, LAYER_NORM_EPS,
};
