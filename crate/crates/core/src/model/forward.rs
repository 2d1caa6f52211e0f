use super::{QuerySource, VltParams};
use crate::nn::{sine_pos_embed_2d, Session};
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Test and analysis hooks for [`VltParams::forward`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Force every query confidence to 1.
    pub unit_confidence: bool,
    /// Skip the positional embedding before the encoder.
    pub zero_position: bool,
    /// Keep encoder self-attention weights in the result.
    pub record_attention: bool,
}

#[derive(Debug, Clone)]
pub struct LanguageVars {
    /// `[N_l×C]`, rows past the expression are exactly zero.
    pub features: Var,
    /// True for real tokens.
    pub pad_mask: Vec<bool>,
    /// `[C]`.
    pub final_state: Var,
}

/// Graph handles of every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[C×H×W]`.
    pub raw_vision: Var,
    pub language: LanguageVars,
    /// `[N_v×C]`, before gating.
    pub vision: Var,
    /// `[N_q×H·W]`, query-source QGM only.
    pub vision_queries: Option<Var>,
    /// `[N_q×N_l]`, query-source QGM only.
    pub word_attention: Option<Var>,
    pub queries: Var,
    pub memory: Var,
    pub responses: Var,
    /// `[N_q×1]`.
    pub confidence: Var,
    /// `[H'×W']`.
    pub logits: Var,
    /// Per encoder layer, one `[N_v×N_v]` matrix per head (if recorded).
    pub encoder_attention: Vec<Vec<Var>>,
}

/// Owned copy of a forward pass, in the documented layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `[H×W×C]`.
    pub raw_vision: Tensor,
    pub language: Tensor,
    pub pad_mask: Vec<bool>,
    pub final_state: Tensor,
    pub vision: Tensor,
    pub vision_queries: Option<Tensor>,
    pub word_attention: Option<Tensor>,
    pub queries: Tensor,
    pub memory: Tensor,
    pub responses: Tensor,
    pub confidence: Tensor,
    pub logits: Tensor,
    pub encoder_attention: Vec<Vec<Tensor>>,
}

impl ForwardVars {
    pub fn trace(&self, s: &Session<'_>) -> ForwardTrace {
        let get = |v: Var| s.value(v).clone();
        ForwardTrace {
            raw_vision: chw_to_hwc(s.value(self.raw_vision)),
            language: get(self.language.features),
            pad_mask: self.language.pad_mask.clone(),
            final_state: get(self.language.final_state),
            vision: get(self.vision),
            vision_queries: self.vision_queries.map(get),
            word_attention: self.word_attention.map(get),
            queries: get(self.queries),
            memory: get(self.memory),
            responses: get(self.responses),
            confidence: get(self.confidence),
            logits: get(self.logits),
            encoder_attention: self
                .encoder_attention
                .iter()
                .map(|heads| heads.iter().map(|&v| get(v)).collect())
                .collect(),
        }
    }
}

fn chw_to_hwc(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for p in 0..h * w {
        out.extend((0..c).map(|ch| src[ch * h * w + p]));
    }
    Tensor::new(&[h, w, c], out).expect("same element count")
}

fn shape_error(op: &'static str, got: &[usize], want: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: got.to_vec(),
        rhs: want.to_vec(),
    }
}

/// Multiply each position's feature vector by `tanh(final_state)`.
pub fn language_gate(s: &mut Session<'_>, vision: Var, final_state: Var) -> Result<Var> {
    let gate = s.graph.tanh(final_state)?;
    s.graph.mul(vision, gate)
}

/// Scale response row `n` by confidence `n`.
pub fn qbm_apply(s: &mut Session<'_>, responses: Var, confidence: Var) -> Result<Var> {
    let shape = s.graph.shape(responses).to_vec();
    if shape.len() != 2 || s.graph.shape(confidence) != [shape[0], 1] {
        return Err(shape_error("qbm_apply", s.graph.shape(confidence), &[shape[0], 1]));
    }
    let ones = s.constant(Tensor::ones(&[1, shape[1]]));
    let spread = s.graph.matmul(confidence, ones)?;
    s.graph.mul(responses, spread)
}

/// `G ⊙ Σ_n F_rbn`, laid out as a `C×H×W` map.
pub fn fuse(s: &mut Session<'_>, balanced: Var, memory: Var, height: usize, width: usize) -> Result<Var> {
    let pooled = s.graph.sum_rows(balanced)?;
    let fused = s.graph.mul(memory, pooled)?;
    let c = s.graph.shape(fused)[1];
    let channels_first = s.graph.transpose(fused)?;
    s.graph.reshape(channels_first, &[c, height, width])
}

impl VltParams {
    /// `[3×H'×W']` image to `[C×H×W]` features.
    pub fn vision_backbone(&self, s: &mut Session<'_>, image: Var) -> Result<Var> {
        let cfg = &self.config;
        let want = [3, cfg.image_height, cfg.image_width];
        if s.graph.shape(image) != want {
            return Err(shape_error("vision_backbone", s.graph.shape(image), &want));
        }
        let (h, w) = (cfg.feature_height(), cfg.feature_width());
        let mut x = image;
        let mut stages = Vec::with_capacity(3);
        for (i, conv) in self.backbone.convs.iter().enumerate() {
            x = conv.forward_relu(s, x)?;
            if i >= 2 {
                stages.push(x);
            }
        }
        let mut sum: Option<Var> = None;
        for (stage, proj) in stages.into_iter().zip(&self.backbone.projections) {
            let p = proj.forward(s, stage)?;
            let p = if s.graph.shape(p)[1..] == [h, w] {
                p
            } else {
                s.graph.resize_nearest(p, h, w)?
            };
            sum = Some(match sum {
                Some(acc) => s.graph.add(acc, p)?,
                None => p,
            });
        }
        Ok(sum.expect("three stages"))
    }

    pub fn language_encode(&self, s: &mut Session<'_>, tokens: &[usize]) -> Result<LanguageVars> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(TensorError::Validation("empty expression".into()));
        }
        if tokens.len() > cfg.max_words {
            return Err(TensorError::Validation(format!(
                "expression of {} tokens exceeds max_words {}",
                tokens.len(),
                cfg.max_words
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(TensorError::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let table = s.param(self.embedding);
        let embedded = s.graph.gather_rows(table, tokens)?;
        let out = self.gru.forward(s, embedded)?;
        let t = tokens.len();
        let features = if t < cfg.max_words {
            let pad = s.constant(Tensor::zeros(&[cfg.max_words - t, cfg.channels]));
            s.graph.concat_rows(&[out.per_step, pad])?
        } else {
            out.per_step
        };
        Ok(LanguageVars {
            features,
            pad_mask: (0..cfg.max_words).map(|i| i < t).collect(),
            final_state: out.final_state,
        })
    }

    /// Three convolutions, then one flattened spatial map per query.
    pub fn qgm_vision_prep(&self, s: &mut Session<'_>, raw_vision: Var) -> Result<Var> {
        let [a, b, c] = &self.qgm.reduce;
        let x = a.forward_relu(s, raw_vision)?;
        let x = b.forward_relu(s, x)?;
        let x = c.forward(s, x)?;
        s.graph.reshape(x, &[self.config.queries, self.config.positions()])
    }

    /// Word weights per query, `softmax_i(relu(f_vqn·W_v)·relu(f_ti·W_a)ᵀ)`
    /// over real words only.
    pub fn qgm_attention(
        &self,
        s: &mut Session<'_>,
        vision_queries: Var,
        words: Var,
        pad_mask: &[bool],
    ) -> Result<Var> {
        let v = self.qgm.vision.forward(s, vision_queries)?;
        let v = s.graph.relu(v)?;
        let w = self.qgm.words.forward(s, words)?;
        let w = s.graph.relu(w)?;
        let wt = s.graph.transpose(w)?;
        let scores = s.graph.matmul(v, wt)?;
        s.graph.softmax_masked(scores, pad_mask)
    }

    /// `F_q = A·relu(F_t·W_t)`.
    pub fn qgm_queries(&self, s: &mut Session<'_>, attention: Var, words: Var) -> Result<Var> {
        let p = self.qgm.project.forward(s, words)?;
        let p = s.graph.relu(p)?;
        s.graph.matmul(attention, p)
    }

    /// Returns `(F_q, F_vq, A)`; the last two only for the QGM source.
    pub fn make_queries(
        &self,
        s: &mut Session<'_>,
        raw_vision: Var,
        language: &LanguageVars,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        match self.config.query_source {
            QuerySource::Qgm => {
                let fvq = self.qgm_vision_prep(s, raw_vision)?;
                let a = self.qgm_attention(s, fvq, language.features, &language.pad_mask)?;
                let q = self.qgm_queries(s, a, language.features)?;
                Ok((q, Some(fvq), Some(a)))
            }
            QuerySource::LearnedFixed => Ok((s.param(self.learned_queries), None, None)),
            QuerySource::WordsAsQueries => {
                if self.config.queries != self.config.max_words {
                    return Err(TensorError::Validation(
                        "words-as-queries needs queries == max_words".into(),
                    ));
                }
                Ok((language.features, None, None))
            }
        }
    }

    /// Positional embedding plus the encoder stack. Returns the memory and
    /// the per-layer self-attention weights.
    pub fn transformer_encode(
        &self,
        s: &mut Session<'_>,
        gated: Var,
        zero_position: bool,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let mut x = if zero_position {
            gated
        } else {
            let pos = s.constant(self.position_embedding()?);
            s.graph.add(gated, pos)?
        };
        let mut weights = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let out = layer.forward(s, x)?;
            x = out.output;
            weights.push(out.self_attention);
        }
        Ok((x, weights))
    }

    /// `[N_v×C]` sine embedding of the feature grid.
    pub fn position_embedding(&self) -> Result<Tensor> {
        let cfg = &self.config;
        sine_pos_embed_2d(cfg.feature_height(), cfg.feature_width(), cfg.channels)?
            .reshape(&[cfg.positions(), cfg.channels])
    }

    pub fn transformer_decode(&self, s: &mut Session<'_>, queries: Var, memory: Var) -> Result<Var> {
        let mut x = queries;
        for layer in &self.decoder {
            x = layer.forward(s, x, memory)?.output;
        }
        Ok(x)
    }

    /// `σ(W₂·relu(W₁·[F_qn ‖ F_rn]))` per query, `[N_q×1]`.
    pub fn qbm_confidence(&self, s: &mut Session<'_>, queries: Var, responses: Var) -> Result<Var> {
        let joint = s.graph.concat_cols(&[queries, responses])?;
        let h = self.qbm.hidden.forward(s, joint)?;
        let h = s.graph.relu(h)?;
        let z = self.qbm.out.forward(s, h)?;
        s.graph.sigmoid(z)
    }

    /// `[C×H×W]` fused map to `[H'×W']` logits.
    pub fn mask_decode(&self, s: &mut Session<'_>, fused: Var) -> Result<Var> {
        let [a, b, c] = &self.mask.convs;
        let x = a.forward_relu(s, fused)?;
        let x = s.graph.upsample_nearest(x, 2)?;
        let x = b.forward_relu(s, x)?;
        let x = s.graph.upsample_nearest(x, 2)?;
        let x = c.forward_relu(s, x)?;
        let x = self.mask.head.forward(s, x)?;
        s.graph.reshape(x, &[self.config.image_height, self.config.image_width])
    }

    pub fn fuse_and_mask_decode(&self, s: &mut Session<'_>, balanced: Var, memory: Var) -> Result<Var> {
        let cfg = &self.config;
        let fused = fuse(s, balanced, memory, cfg.feature_height(), cfg.feature_width())?;
        self.mask_decode(s, fused)
    }

    /// Full pipeline for one image and expression.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        image: &Tensor,
        tokens: &[usize],
        opts: ForwardOptions,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let image = s.constant(image.clone());
        let raw_vision = self.vision_backbone(s, image)?;
        let language = self.language_encode(s, tokens)?;
        let flat = s.graph.reshape(raw_vision, &[cfg.channels, cfg.positions()])?;
        let vision = s.graph.transpose(flat)?;
        let gated = language_gate(s, vision, language.final_state)?;
        let (queries, vision_queries, word_attention) = self.make_queries(s, raw_vision, &language)?;
        let (memory, encoder_attention) = self.transformer_encode(s, gated, opts.zero_position)?;
        let responses = self.transformer_decode(s, queries, memory)?;
        let confidence = if opts.unit_confidence || !cfg.use_qbm {
            s.constant(Tensor::ones(&[cfg.queries, 1]))
        } else {
            self.qbm_confidence(s, queries, responses)?
        };
        let balanced = qbm_apply(s, responses, confidence)?;
        let logits = self.fuse_and_mask_decode(s, balanced, memory)?;
        Ok(ForwardVars {
            raw_vision,
            language,
            vision,
            vision_queries,
            word_attention,
            queries,
            memory,
            responses,
            confidence,
            logits,
            encoder_attention: if opts.record_attention {
                encoder_attention
            } else {
                Vec::new()
            },
        })
    }

    /// Forward pass on an inference graph, returning the trace.
    pub fn trace(
        &self,
        params: &crate::nn::ParamSet,
        image: &Tensor,
        tokens: &[usize],
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        let mut s = Session::inference(params);
        let vars = self.forward(&mut s, image, tokens, opts)?;
        Ok(vars.trace(&s))
    }

    /// Mask logits only.
    pub fn predict(&self, params: &crate::nn::ParamSet, image: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        let mut s = Session::inference(params);
        let vars = self.forward(&mut s, image, tokens, ForwardOptions::default())?;
        Ok(s.value(vars.logits).clone())
    }
}

/// Mean binary cross-entropy between mask logits and a 0/1 target.
pub fn loss(s: &mut Session<'_>, logits: Var, target: &Tensor) -> Result<Var> {
    s.graph.bce_with_logits(logits, target)
}
