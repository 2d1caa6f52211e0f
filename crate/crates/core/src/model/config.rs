use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

/// Where the transformer decoder's query vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// Vision-conditioned weighted sums of word features.
    Qgm,
    /// A trained `N_q×C` parameter, independent of the input.
    LearnedFixed,
    /// The padded per-word language features themselves (`N_q = N_l`).
    WordsAsQueries,
}

impl QuerySource {
    pub const ALL: [QuerySource; 3] = [Self::Qgm, Self::LearnedFixed, Self::WordsAsQueries];

    /// Short name used on the command line and in reports.
    pub fn tag(self) -> &'static str {
        match self {
            Self::Qgm => "qgm",
            Self::LearnedFixed => "learned",
            Self::WordsAsQueries => "words",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

/// Every shape in the model follows from this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VltConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Model width `C`.
    pub channels: usize,
    /// `N_q`.
    pub queries: usize,
    /// `N_l`: expressions are zero-padded to this many tokens.
    pub max_words: usize,
    /// Number of embedding rows, including the padding id 0.
    pub vocab_size: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Output channels of the five backbone convolutions.
    pub backbone: [usize; 5],
    pub query_source: QuerySource,
    /// When false the query-balance gate is replaced by `C_q ≡ 1`.
    pub use_qbm: bool,
}

impl Default for VltConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            channels: 64,
            queries: 16,
            max_words: 8,
            vocab_size: 16,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            backbone: [16, 32, 64, 64, 64],
            query_source: QuerySource::Qgm,
            use_qbm: true,
        }
    }
}

impl VltConfig {
    /// 16×16 images, `C = 8`, two queries: small enough for exhaustive
    /// finite-difference checks.
    pub fn micro() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            channels: 8,
            queries: 2,
            max_words: 4,
            vocab_size: 16,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            backbone: [4, 4, 8, 8, 8],
            query_source: QuerySource::Qgm,
            use_qbm: true,
        }
    }

    /// 32×32 images, `C = 16`: fast enough for many short training runs.
    pub fn small() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 16,
            queries: 4,
            max_words: 8,
            vocab_size: 16,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            backbone: [8, 16, 16, 16, 16],
            query_source: QuerySource::Qgm,
            use_qbm: true,
        }
    }

    pub fn feature_height(&self) -> usize {
        self.image_height / 4
    }

    pub fn feature_width(&self) -> usize {
        self.image_width / 4
    }

    /// `N_v = H·W`.
    pub fn positions(&self) -> usize {
        self.feature_height() * self.feature_width()
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TensorError::Validation(msg));
        if self.image_height == 0 || self.image_width == 0 {
            return fail("image extents must be positive".into());
        }
        if !self.image_height.is_multiple_of(4) || !self.image_width.is_multiple_of(4) {
            return fail(format!(
                "image extents {}×{} must be divisible by 4",
                self.image_height, self.image_width
            ));
        }
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads.max(4)) {
            return fail(format!(
                "channels {} must be divisible by max(heads, 4) = {}",
                self.channels,
                self.heads.max(4)
            ));
        }
        if self.queries == 0 || self.max_words == 0 {
            return fail("queries and max_words must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocabulary needs the padding id plus at least one word".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("at least one encoder and one decoder layer required".into());
        }
        if self.backbone.contains(&0) {
            return fail("backbone channel counts must be positive".into());
        }
        if self.query_source == QuerySource::WordsAsQueries && self.queries != self.max_words {
            return fail(format!(
                "words-as-queries needs queries == max_words, got {} and {}",
                self.queries, self.max_words
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for c in [VltConfig::default(), VltConfig::micro(), VltConfig::small()] {
            c.validate().unwrap();
        }
        assert_eq!(VltConfig::default().positions(), 256);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let bad = [
            VltConfig {
                image_height: 63,
                ..VltConfig::default()
            },
            VltConfig {
                channels: 6,
                ..VltConfig::default()
            },
            VltConfig {
                channels: 12,
                heads: 8,
                ..VltConfig::default()
            },
            VltConfig {
                queries: 0,
                ..VltConfig::default()
            },
            VltConfig {
                query_source: QuerySource::WordsAsQueries,
                ..VltConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let words = VltConfig {
            query_source: QuerySource::WordsAsQueries,
            queries: 8,
            ..VltConfig::default()
        };
        words.validate().unwrap();
    }

    #[test]
    fn json_roundtrip() {
        let c = VltConfig::micro();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<VltConfig>(&text).unwrap(), c);
        assert!(text.contains("\"query_source\":\"qgm\""));
    }
}
