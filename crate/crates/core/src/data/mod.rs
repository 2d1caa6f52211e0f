//! Synthetic referring-segmentation data: scenes of coloured shapes, a
//! templated expression naming exactly one of them, and its pixel mask.

mod io;
mod render;
mod scene;
mod split;
mod vocab;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use io::{
    decode_pgm_mask, decode_ppm, encode_pgm_mask, encode_ppm, parse_manifest, read_dataset, write_dataset,
    ManifestEntry, MANIFEST,
};
pub use render::{mask_to_tensor, render, rgb_to_tensor, tensor_to_rgb, Rendered, BACKGROUND};
pub use scene::{
    candidate_predicates, generate_scene, minimal_predicates, synthesize_expression, Location, Predicate, Scene,
    ShapeColor, ShapeKind, ShapeSize, ShapeSpec,
};
pub use split::{split, Split, DEFAULT_SPLIT_SEED};
pub use vocab::{tokenize_pad, Tokenized, Vocabulary, GRAMMAR_WORDS, PAD_ID};

use crate::parallel::{map_range, Execution};
use crate::tensor::{Prng, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid data config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Square image side in pixels; must be divisible by 4.
    pub image_size: usize,
    pub max_words: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Probability of adding one non-essential attribute to an expression.
    pub redundancy: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            max_words: 8,
            min_shapes: 2,
            max_shapes: 5,
            redundancy: 0.3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.image_size < 16 || !self.image_size.is_multiple_of(4) {
            return fail(format!(
                "image size {} must be a multiple of 4 and at least 16",
                self.image_size
            ));
        }
        if self.min_shapes < 2 || self.max_shapes > 5 || self.min_shapes > self.max_shapes {
            return fail(format!(
                "shape count range {}..={} must lie in 2..=5",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.max_words < 2 {
            return fail(format!("max_words {} cannot hold \"the <kind>\"", self.max_words));
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return fail(format!("redundancy {} is not a probability", self.redundancy));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: usize,
    /// `[3×H×W]` in `[0, 1]`.
    pub image: Tensor,
    pub words: Vec<String>,
    pub tokens: Vec<usize>,
    /// `[H×W]` of 0/1.
    pub target_mask: Tensor,
    pub descriptor: String,
}

/// Generated sample together with the scene it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub scene: Scene,
    pub rendered: Rendered,
    pub sample: Sample,
}

/// Sample `sample_id` of the dataset seeded by `seed`. Each sample draws
/// from its own stream, so any subset can be regenerated independently.
pub fn generate_sample(
    cfg: &DataConfig,
    vocab: &Vocabulary,
    seed: u64,
    sample_id: usize,
) -> Result<GeneratedSample, DataError> {
    let mut prng = Prng::derive(seed, sample_id as u64);
    let scene = generate_scene(cfg, &mut prng)?;
    let words = synthesize_expression(&scene, cfg, &mut prng)?;
    let rendered = render(&scene);
    let side = cfg.image_size;
    let sample = Sample {
        sample_id,
        image: rgb_to_tensor(&rendered.rgb, side, side),
        tokens: vocab.encode(&words)?,
        words: words.iter().map(|w| w.to_string()).collect(),
        target_mask: mask_to_tensor(&rendered.masks[scene.target_index], side, side),
        descriptor: scene.target().to_string(),
    };
    Ok(GeneratedSample {
        scene,
        rendered,
        sample,
    })
}

/// Samples `0..count`, identical under either execution mode.
pub fn generate_dataset(cfg: &DataConfig, count: usize, seed: u64, exec: Execution) -> Result<Vec<Sample>, DataError> {
    cfg.validate()?;
    let vocab = Vocabulary::grammar();
    map_range(exec, count, |i| generate_sample(cfg, &vocab, seed, i).map(|g| g.sample))
        .into_iter()
        .collect()
}
