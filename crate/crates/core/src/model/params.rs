use super::VltConfig;
use crate::nn::{
    ConvParams, DecoderLayerParams, EncoderLayerParams, GruParams, Initializer, LinearParams, ParamId, ParamSet,
};
use crate::tensor::{Prng, Result};

/// Name prefixes of the attention subsystem: transformer, query
/// generation and query balance.
pub const ATTENTION_PREFIXES: [&str; 4] = ["encoder.", "decoder.", "qgm.", "qbm."];

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    /// Stride 1, then four stride-2 convolutions.
    pub convs: [ConvParams; 5],
    /// 1×1 projections of the last three stages to `C` channels.
    pub projections: [ConvParams; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct QgmParams {
    pub reduce: [ConvParams; 3],
    pub vision: LinearParams,
    pub words: LinearParams,
    pub project: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QbmParams {
    pub hidden: LinearParams,
    pub out: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskDecoderParams {
    pub convs: [ConvParams; 3],
    pub head: ConvParams,
}

/// Parameter layout of the whole model. The tensors themselves live in the
/// accompanying [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct VltParams {
    pub config: VltConfig,
    pub embedding: ParamId,
    pub gru: GruParams,
    pub backbone: BackboneParams,
    pub qgm: QgmParams,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub qbm: QbmParams,
    pub mask: MaskDecoderParams,
    pub learned_queries: ParamId,
}

impl VltParams {
    /// Fresh initialisation. Every tensor is created whatever the query
    /// source, so all variants share one layout.
    pub fn init(config: &VltConfig, prng: &mut Prng) -> Result<(Self, ParamSet)> {
        config.validate()?;
        let mut set = ParamSet::new();
        let mut init = Initializer { params: &mut set, prng };
        let layout = Self::build(config, &mut init)?;
        Ok((layout, set))
    }

    /// Parameter layout for `config` with every tensor at its initial value
    /// from a fixed stream; used to validate checkpoints.
    pub fn layout(config: &VltConfig) -> Result<(Self, ParamSet)> {
        Self::init(config, &mut Prng::new(0))
    }

    fn build(cfg: &VltConfig, init: &mut Initializer<'_>) -> Result<Self> {
        let c = cfg.channels;
        let b = cfg.backbone;
        let conv = |init: &mut Initializer<'_>, name: &str, i, o, k, s| ConvParams::init(init, name, i, o, k, s);

        let embedding = init.normal("embedding", &[cfg.vocab_size, c], 0.02);
        let gru = GruParams::init(init, "gru", c, c);
        let backbone = BackboneParams {
            convs: [
                conv(init, "backbone.conv0", 3, b[0], 3, 1),
                conv(init, "backbone.conv1", b[0], b[1], 3, 2),
                conv(init, "backbone.conv2", b[1], b[2], 3, 2),
                conv(init, "backbone.conv3", b[2], b[3], 3, 2),
                conv(init, "backbone.conv4", b[3], b[4], 3, 2),
            ],
            projections: [
                conv(init, "backbone.proj0", b[2], c, 1, 1),
                conv(init, "backbone.proj1", b[3], c, 1, 1),
                conv(init, "backbone.proj2", b[4], c, 1, 1),
            ],
        };
        let qgm = QgmParams {
            reduce: [
                conv(init, "qgm.reduce0", c, c, 3, 1),
                conv(init, "qgm.reduce1", c, c / 2, 3, 1),
                conv(init, "qgm.reduce2", c / 2, cfg.queries, 1, 1),
            ],
            vision: LinearParams::init(init, "qgm.vision", cfg.positions(), c),
            words: LinearParams::init(init, "qgm.words", c, c),
            project: LinearParams::init(init, "qgm.project", c, c),
        };
        let encoder = (0..cfg.encoder_layers)
            .map(|i| EncoderLayerParams::init(init, &format!("encoder.{i}"), c, cfg.heads, cfg.ffn_dim()))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderLayerParams::init(init, &format!("decoder.{i}"), c, cfg.heads, cfg.ffn_dim()))
            .collect::<Result<_>>()?;
        let qbm = QbmParams {
            hidden: LinearParams::init(init, "qbm.hidden", 2 * c, c),
            out: LinearParams::init(init, "qbm.out", c, 1),
        };
        let mask = MaskDecoderParams {
            convs: [
                conv(init, "mask.conv0", c, c / 2, 3, 1),
                conv(init, "mask.conv1", c / 2, c / 4, 3, 1),
                conv(init, "mask.conv2", c / 4, c / 4, 3, 1),
            ],
            head: conv(init, "mask.head", c / 4, 1, 1, 1),
        };
        let learned_queries = init.uniform("learned_queries", &[cfg.queries, c], -1.0, 1.0);
        Ok(Self {
            config: cfg.clone(),
            embedding,
            gru,
            backbone,
            qgm,
            encoder,
            decoder,
            qbm,
            mask,
            learned_queries,
        })
    }
}

/// Scalar weight counts for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    /// Transformer, query generation and query balance together.
    pub attention: usize,
    pub tensors: usize,
}

impl ParamCounts {
    pub fn of(set: &ParamSet) -> Self {
        Self {
            total: set.numel(),
            attention: set.numel_with_prefix(&ATTENTION_PREFIXES),
            tensors: set.len(),
        }
    }
}
