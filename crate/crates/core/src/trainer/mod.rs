//! Two-stream pretraining from detection labels, TE-only finetuning, AdamW
//! and checkpointing.

pub mod adamw;
pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentConfig};
use crate::data::batch::{make_batch_with, make_supervised_batch, Batch};
use crate::data::{pool_of, AnnotatedImage};
use crate::error::{Error, Result};
use crate::losses::{combined_loss_parts, FeatureExtractor, LossBreakdown, LossWeights};
use crate::model::{ModelConfig, PromptedModel, TaskId};
use crate::tensor::Tensor;

pub use adamw::{adamw_step, AdamW, AdamWConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Target of the background-modeling stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BmLoss {
    /// Only non-text pixels are supervised: `B⊙(1−M_text)` against `I⊙(1−M_text)`.
    TextAware,
    /// Plain masked image modeling: `B` against the whole input `I`.
    AllRegion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub image_size: usize,
    pub bm_loss: BmLoss,
    /// Square dilation applied to `M_text` before masking.
    pub mask_dilation: usize,
    pub augment: bool,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub jitter: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            batch_size: 8,
            epochs: 5,
            seed: 0,
            image_size: 64,
            bm_loss: BmLoss::TextAware,
            mask_dilation: 0,
            augment: true,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            jitter: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(crate::model::DOWNSAMPLE) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {}",
                self.image_size,
                crate::model::DOWNSAMPLE
            )));
        }
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()
    }
}

/// Losses of one optimizer step. `l_bm` is absent during finetuning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub l_bm: Option<f64>,
    pub l_te: f64,
    pub l_total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,L_BM,L_TE,L_total";

impl StepReport {
    pub fn csv_row(&self) -> String {
        let bm = self.l_bm.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.step, bm, self.l_te, self.l_total)
    }
}

/// Everything computed by one pretraining forward pass.
#[derive(Clone, Debug)]
pub struct PretrainOutputs {
    /// `I⊙(1−M_text)`
    pub background: Tensor,
    /// `I⊙(1−M_text)⊙(1−M_rand)`
    pub masked: Tensor,
    /// BM stream output on the masked image.
    pub bm_out: Tensor,
    /// `I⊙(1−M_text) + detach(B)⊙M_text`
    pub pseudo: Tensor,
    /// TE stream output on the raw image.
    pub te_out: Tensor,
    pub l_bm: LossBreakdown,
    pub l_te: LossBreakdown,
}

fn complement(mask: &Tensor) -> Tensor {
    mask.neg().add_scalar(1.0)
}

/// Both streams' forward passes and losses. Reads images and masks only.
pub fn pretrain_forward(
    model: &PromptedModel,
    batch: &Batch,
    weights: &LossWeights,
    fx: &FeatureExtractor,
    bm_loss: BmLoss,
) -> Result<PretrainOutputs> {
    let keep_text = complement(&batch.text_masks);
    let background = batch.images.mul(&keep_text)?;
    let masked = background.mul(&complement(&batch.rand_masks))?;
    let bm_out = model.forward(&masked, TaskId::Bm)?;
    let l_bm = match bm_loss {
        BmLoss::TextAware => combined_loss_parts(&bm_out.mul(&keep_text)?, &background, weights, fx)?,
        BmLoss::AllRegion => combined_loss_parts(&bm_out, &batch.images, weights, fx)?,
    };
    let pseudo = background.add(&bm_out.detach().mul(&batch.text_masks)?)?;
    let te_out = model.forward(&batch.images, TaskId::Te)?;
    let l_te = combined_loss_parts(&te_out, &pseudo, weights, fx)?;
    Ok(PretrainOutputs {
        background,
        masked,
        bm_out,
        pseudo,
        te_out,
        l_bm,
        l_te,
    })
}

fn check_finite(name: &str, loss: &LossBreakdown, step: u64) -> Result<()> {
    if let Some(term) = loss.non_finite_term() {
        return Err(Error::NonFinite(format!("{name} ({term} term) at step {step}")));
    }
    if !loss.value().is_finite() {
        return Err(Error::NonFinite(format!("{name} at step {step}")));
    }
    Ok(())
}

fn apply_update(model: &PromptedModel, total: &Tensor, opt: &mut AdamW) -> Result<()> {
    let params = model.named_parameters();
    model.zero_grad();
    if total.requires_grad() {
        total.backward()?;
    }
    opt.step(&params)
}

/// One joint update on `L_BM + L_TE`.
pub fn pretrain_step(
    model: &PromptedModel,
    batch: &Batch,
    weights: &LossWeights,
    fx: &FeatureExtractor,
    opt: &mut AdamW,
    bm_loss: BmLoss,
) -> Result<StepReport> {
    let step = opt.state.step + 1;
    let out = pretrain_forward(model, batch, weights, fx, bm_loss)?;
    check_finite("L_BM", &out.l_bm, step)?;
    check_finite("L_TE", &out.l_te, step)?;
    let total = out.l_bm.total.add(&out.l_te.total)?;
    apply_update(model, &total, opt)?;
    Ok(StepReport {
        step,
        l_bm: Some(out.l_bm.value()),
        l_te: out.l_te.value(),
        l_total: total.item(),
    })
}

/// One supervised TE update against the clean targets.
pub fn finetune_step(
    model: &PromptedModel,
    batch: &Batch,
    weights: &LossWeights,
    fx: &FeatureExtractor,
    opt: &mut AdamW,
) -> Result<StepReport> {
    let step = opt.state.step + 1;
    let clean = batch.cleans.as_ref().ok_or(Error::MissingClean(0))?;
    let out = model.forward(&batch.images, TaskId::Te)?;
    let loss = combined_loss_parts(&out, clean, weights, fx)?;
    check_finite("L_TE", &loss, step)?;
    apply_update(model, &loss.total, opt)?;
    Ok(StepReport {
        step,
        l_bm: None,
        l_te: loss.value(),
        l_total: loss.value(),
    })
}

/// Generator for the data stream of one epoch.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// A model, its optimizer and the position in the deterministic data stream.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: PromptedModel,
    pub optimizer: AdamW,
    pub fx: FeatureExtractor,
    position: RngState,
}

impl Trainer {
    /// Starts at epoch 0 with a fresh optimizer.
    pub fn new(config: TrainConfig, model: PromptedModel) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer, &model.named_parameters());
        let position = RngState::capture(&epoch_rng(config.seed, 0), 0, 0, 0);
        Ok(Trainer {
            config,
            model,
            optimizer,
            fx: FeatureExtractor::new(),
            position,
        })
    }

    /// Continues exactly where `checkpoint` stopped.
    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        let model = checkpoint.model()?;
        let mut trainer = Trainer::new(checkpoint.config.clone(), model)?;
        let names: Vec<String> = trainer.model.named_parameters().into_iter().map(|(n, _)| n).collect();
        let stored: Vec<&String> = checkpoint.optimizer.moments.iter().map(|m| &m.name).collect();
        if stored.len() != names.len() || stored.iter().zip(&names).any(|(a, b)| *a != b) {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        trainer.optimizer.state = checkpoint.optimizer.clone();
        trainer.position = checkpoint.rng.clone();
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.optimizer.state, &self.config, self.position.clone())
    }

    pub fn steps_done(&self) -> u64 {
        self.position.step
    }

    pub fn finished(&self) -> bool {
        self.position.epoch >= self.config.epochs as u64
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    /// Trains until the configured epochs are done or `max_steps` total steps
    /// have run, reporting every step.
    pub fn run(
        &mut self,
        data: &[AnnotatedImage],
        max_steps: Option<u64>,
        on_step: &mut dyn FnMut(&StepReport),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let pretrain = self.config.stage == Stage::Pretrain;
        // pretraining never sees clean targets
        let stripped: Vec<AnnotatedImage>;
        let data = if pretrain {
            stripped = data
                .iter()
                .map(|s| AnnotatedImage {
                    image: s.image.clone(),
                    polygons: s.polygons.clone(),
                    clean: None,
                })
                .collect();
            &stripped[..]
        } else {
            data
        };
        let pool = pool_of(data);
        let bs = self.config.batch_size;
        let nb = self.batches_per_epoch(data.len()) as u64;
        while !self.finished() {
            if max_steps.is_some_and(|m| self.position.step >= m) {
                return Ok(());
            }
            let epoch = self.position.epoch;
            let mut rng = epoch_rng(self.config.seed, epoch);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            if self.position.batch > 0 {
                rng = self.position.restore();
            }
            for b in self.position.batch..nb {
                if max_steps.is_some_and(|m| self.position.step >= m) {
                    return Ok(());
                }
                let lo = b as usize * bs;
                let idx = &order[lo..(lo + bs).min(data.len())];
                let samples: Vec<AnnotatedImage> = idx
                    .iter()
                    .map(|&i| {
                        if self.config.augment {
                            augment(&data[i], &self.config.jitter, &mut rng)
                        } else {
                            data[i].clone()
                        }
                    })
                    .collect();
                let report = if pretrain {
                    let batch = make_batch_with(&samples, idx, &pool, self.config.mask_dilation, &mut rng)?;
                    pretrain_step(
                        &self.model,
                        &batch,
                        &self.config.weights,
                        &self.fx,
                        &mut self.optimizer,
                        self.config.bm_loss,
                    )?
                } else {
                    let batch = make_supervised_batch(&samples)?;
                    finetune_step(&self.model, &batch, &self.config.weights, &self.fx, &mut self.optimizer)?
                };
                let step = self.position.step + 1;
                self.position = if b + 1 == nb {
                    RngState::capture(&epoch_rng(self.config.seed, epoch + 1), epoch + 1, 0, step)
                } else {
                    RngState::capture(&rng, epoch, b + 1, step)
                };
                on_step(&StepReport { step, ..report });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};

    fn corpus(n: usize, size: usize) -> Vec<AnnotatedImage> {
        let cfg = SynthConfig {
            height: size,
            width: size,
            box_width: (6, 10),
            box_height: (4, 6),
            max_boxes: 2,
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n).map(|_| synth_generate(&cfg, &mut rng).unwrap()).collect()
    }

    fn small_config(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            batch_size: 2,
            epochs: 2,
            image_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_rows_per_epoch() {
        let data = corpus(5, 16);
        let mut t = Trainer::new(small_config(Stage::Pretrain), PromptedModel::init(0)).unwrap();
        let mut rows = Vec::new();
        t.run(&data, None, &mut |r| rows.push(*r)).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        assert_eq!(rows.last().unwrap().step, 6);
        assert!(rows.iter().all(|r| r.l_bm.is_some()));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        for stage in [Stage::Pretrain, Stage::Finetune] {
            let data = corpus(5, 16);
            let mut full = Trainer::new(small_config(stage), PromptedModel::init(4)).unwrap();
            let mut a = Vec::new();
            full.run(&data, None, &mut |r| a.push(*r)).unwrap();

            let mut first = Trainer::new(small_config(stage), PromptedModel::init(4)).unwrap();
            let mut b = Vec::new();
            first.run(&data, Some(2), &mut |r| b.push(*r)).unwrap();
            let bytes = first.checkpoint().to_bytes().unwrap();
            let mut second = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            second.run(&data, None, &mut |r| b.push(*r)).unwrap();

            assert_eq!(a, b);
            assert_eq!(full.checkpoint().to_bytes().unwrap(), second.checkpoint().to_bytes().unwrap());
        }
    }

    #[test]
    fn finetune_leaves_bm_prompt_alone() {
        let data = corpus(2, 16);
        let mut t = Trainer::new(small_config(Stage::Finetune), PromptedModel::init(1)).unwrap();
        let before = t.model.prompt_bm.to_vec();
        t.run(&data, Some(1), &mut |_| {}).unwrap();
        assert!(t.model.prompt_bm.grad().is_none());
        assert_eq!(t.model.prompt_bm.to_vec(), before);
    }
}
