use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, EvalReport, TrainError};
use crate::data::Sample;
use crate::model::{loss, ForwardOptions, VltConfig, VltParams};
use crate::nn::{ParamSet, Session};
use crate::parallel::{map_items, Execution};
use crate::tensor::{Prng, Result, Tensor, TensorError};

use super::metrics::iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs; the last
    /// epoch is always evaluated.
    pub eval_every: usize,
    pub model: VltConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.001,
            seed: 0,
            eval_every: 5,
            model: VltConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(TrainError::Config(
                "epochs, batch size and eval interval must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses.
    pub train_loss: f64,
    pub val: Option<EvalReport>,
}

/// Check that a sample fits `config`.
pub fn check_sample(config: &VltConfig, sample: &Sample) -> Result<(), TrainError> {
    let expect = [3, config.image_height, config.image_width];
    if sample.image.shape() != expect || sample.target_mask.shape() != &expect[1..] {
        return Err(TrainError::Config(format!(
            "sample {} has image {:?}, model expects {:?}",
            sample.sample_id,
            sample.image.shape(),
            expect
        )));
    }
    if sample.tokens.is_empty() || sample.tokens.len() > config.max_words {
        return Err(TrainError::Config(format!(
            "sample {} has {} tokens, model allows 1..={}",
            sample.sample_id,
            sample.tokens.len(),
            config.max_words
        )));
    }
    if let Some(&t) = sample.tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(TrainError::Config(format!(
            "sample {} uses token {t} outside the vocabulary of {}",
            sample.sample_id, config.vocab_size
        )));
    }
    Ok(())
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(model: &VltParams, params: &ParamSet, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut s = Session::new(params);
    let vars = model.forward(&mut s, &sample.image, &sample.tokens, ForwardOptions::default())?;
    let l = loss(&mut s, vars.logits, &sample.target_mask)?;
    let value = s.value(l).item()?;
    Ok((value, s.backward_params(l)?))
}

pub fn sample_loss(model: &VltParams, params: &ParamSet, sample: &Sample) -> Result<f64> {
    let mut s = Session::inference(params);
    let vars = model.forward(&mut s, &sample.image, &sample.tokens, ForwardOptions::default())?;
    let l = loss(&mut s, vars.logits, &sample.target_mask)?;
    s.value(l).item()
}

/// Mean loss and mean gradient over `batch`. Per-sample results are
/// reduced in batch order, so the outcome does not depend on `exec`.
pub fn batch_gradients(
    model: &VltParams,
    params: &ParamSet,
    batch: &[&Sample],
    exec: Execution,
) -> Result<(f64, Vec<Tensor>)> {
    let results = map_items(exec, batch, |_, s| sample_gradients(model, params, s));
    let mut loss_sum = 0.0;
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for r in results {
        let (l, grads) = r?;
        loss_sum += l;
        match &mut acc {
            None => acc = Some(grads.iter().map(Tensor::to_vec).collect()),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let acc = acc.ok_or_else(|| TensorError::Validation("empty batch".into()))?;
    let grads = acc
        .into_iter()
        .zip(params.values())
        .map(|(a, p)| Tensor::new(p.shape(), a.into_iter().map(|x| x / n).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_sum / n, grads))
}

/// Predicted foreground: logit strictly above zero.
pub fn binarize(logits: &Tensor) -> Vec<bool> {
    logits.data().iter().map(|&v| v > 0.0).collect()
}

pub fn mask_bits(mask: &Tensor) -> Vec<bool> {
    mask.data().iter().map(|&v| v > 0.5).collect()
}

/// Forward every sample, threshold at logit 0 and aggregate IoUs.
pub fn evaluate(model: &VltParams, params: &ParamSet, samples: &[Sample], exec: Execution) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(TensorError::Validation("cannot evaluate an empty split".into()));
    }
    let per_sample = map_items(exec, samples, |_, s| {
        let logits = model.predict(params, &s.image, &s.tokens)?;
        Ok((s.sample_id, iou(&binarize(&logits), &mask_bits(&s.target_mask))?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    EvalReport::from_per_sample(per_sample)
}

/// Fresh parameters and optimiser for `cfg`, drawn from `cfg.seed`.
pub fn initialise(cfg: &TrainConfig) -> Result<(VltParams, ParamSet, AdamState), TrainError> {
    cfg.validate()?;
    let (model, params) = VltParams::init(&cfg.model, &mut Prng::derive(cfg.seed, 0))?;
    let adam = AdamState::new(&params, AdamConfig::with_lr(cfg.learning_rate));
    Ok((model, params, adam))
}

/// Mini-batch training. Epoch `e` shuffles with its own stream derived from
/// the seed, so a run is a pure function of config, data and seed.
/// `observe` sees each epoch's record as soon as it is complete.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &TrainConfig,
    model: &VltParams,
    params: &mut ParamSet,
    adam: &mut AdamState,
    train_set: &[Sample],
    val_set: &[Sample],
    exec: Execution,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    for s in train_set.iter().chain(val_set) {
        check_sample(&cfg.model, s)?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Prng::derive(cfg.seed, epoch as u64 + 1).shuffle(&mut order);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let diverged = |detail: String| TrainError::Divergence {
                epoch,
                batch: b,
                detail,
            };
            let (l, grads) = batch_gradients(model, params, &batch, exec).map_err(|e| match e {
                TensorError::NonFinite { op } => diverged(format!("{op} produced a non-finite value")),
                other => other.into(),
            })?;
            if !l.is_finite() {
                return Err(diverged(format!("batch loss is {l}")));
            }
            adam.step(params, &grads)?;
            losses.push(l);
        }
        let last = epoch + 1 == cfg.epochs;
        let val = if !val_set.is_empty() && (last || (epoch + 1) % cfg.eval_every == 0) {
            Some(evaluate(model, params, val_set, exec)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val,
        };
        observe(&record);
        history.push(record);
    }
    Ok(history)
}

/// `epoch  train_loss  IoU  Pr@0.5 … Pr@0.9`, blank metrics when the
/// epoch was not evaluated.
pub fn history_tsv(history: &[EpochRecord]) -> String {
    let mut out = format!("epoch\ttrain_loss\t{}\n", super::METRIC_HEADER.join("\t"));
    for r in history {
        let metrics: Vec<String> = match &r.val {
            Some(v) => v.metrics.values().iter().map(f64::to_string).collect(),
            None => vec![String::new(); 6],
        };
        out.push_str(&format!("{}\t{}\t{}\n", r.epoch, r.train_loss, metrics.join("\t")));
    }
    out
}
