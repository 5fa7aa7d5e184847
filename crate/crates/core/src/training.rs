//! Positive/negative sampling and the joint optimization loop.
//!
//! Every step draws its randomness from a generator keyed by
//! `(seed, step)`, so a run resumed from a full-precision checkpoint follows
//! the same trajectory as one that never stopped.

use log::{info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, CorpusSplit, SpanPoint};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{bm25_build, bm25_rank, evaluate, EvalMode, EvalOptions};
use crate::globalspan::{contrastive_concat, contrastive_loss, predictor_loss};
use crate::model::{CcgsModel, ModelConfig, PreparedVideo};
use crate::numcore::{AdamWConfig, ParameterSet, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeStrategy {
    /// Uniform over all videos except the positive.
    #[default]
    Uniform,
    /// The BM25 top-ranked videos other than the positive.
    Bm25Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    /// Negative videos per question (`M`).
    pub negatives: usize,
    /// Questions per step.
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub negative_strategy: NegativeStrategy,
    /// Validate every this many steps; 0 validates only at the end.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    /// Reference-scale settings: `d = 768`, 1024-wide visual features,
    /// `lr = 1e-5`, one negative, two questions per batch.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                encoder: EncoderConfig {
                    d: 768,
                    d_v: 1024,
                    ..EncoderConfig::default()
                },
                ..ModelConfig::default()
            },
            lr: 1e-5,
            weight_decay: 0.01,
            negatives: 1,
            batch_size: 2,
            steps: 1000,
            seed: 0,
            negative_strategy: NegativeStrategy::Uniform,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    /// Small settings that train in seconds on one core: `d = 32`,
    /// `lr = 1e-3`.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                encoder: EncoderConfig {
                    d: 32,
                    d_v: 32,
                    buckets: 1024,
                    ..EncoderConfig::default()
                },
                ..ModelConfig::default()
            },
            lr: 1e-3,
            steps: 500,
            eval_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// A question ready for training: tokens, positive video index and gold
/// span point in that video's token layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub question_id: String,
    pub tokens: Vec<String>,
    pub video: usize,
    pub target: SpanPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub example: usize,
    /// Negative video indices, never the positive.
    pub negatives: Vec<usize>,
    /// Dropout seeds: positive first, then one per negative.
    pub dropout_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
}

/// Batch-mean losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss: f64,
    pub loss1: f64,
    pub loss2: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub rank1_miou: f64,
}

/// Generator for the step that follows optimizer step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Resolves every question of `split` to a training example. Questions
/// whose answer lies entirely past the token cap are skipped with a warning;
/// answers that straddle the cap are clamped to the kept units.
pub fn prepare_examples(split: &CorpusSplit, prepared: &[PreparedVideo]) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::with_capacity(split.qa.len());
    for qa in &split.qa {
        let video = split
            .video_index(&qa.video_id)
            .ok_or_else(|| Error::InvalidArgument(format!("question `{}` has unknown video", qa.question_id)))?;
        match prepared[video].map.time_to_span(&qa.answer) {
            Ok(target) => out.push(TrainingExample {
                question_id: qa.question_id.clone(),
                tokens: tokenize(&qa.question),
                video,
                target,
            }),
            Err(e) => warn!("skipping question {}: {e}", qa.question_id),
        }
    }
    Ok(out)
}

/// Draws one batch. Questions are taken without replacement when the batch
/// fits in the pool.
pub fn sample_batch(
    examples: &[TrainingExample],
    n_videos: usize,
    hard_negatives: Option<&[Vec<usize>]>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no trainable questions".into()));
    }
    if n_videos <= cfg.negatives {
        return Err(Error::InvalidArgument(format!(
            "{} negatives need more than {} videos",
            cfg.negatives, n_videos
        )));
    }
    let picks: Vec<usize> = if cfg.batch_size <= examples.len() {
        sample(rng, examples.len(), cfg.batch_size).into_vec()
    } else {
        (0..cfg.batch_size).map(|_| rng.random_range(0..examples.len())).collect()
    };
    let mut items = Vec::with_capacity(picks.len());
    for example in picks {
        let positive = examples[example].video;
        let negatives = match hard_negatives {
            Some(lists) => lists[example].iter().copied().take(cfg.negatives).collect(),
            None => sample(rng, n_videos - 1, cfg.negatives)
                .into_iter()
                .map(|i| if i >= positive { i + 1 } else { i })
                .collect(),
        };
        let dropout_seeds = (0..=cfg.negatives).map(|_| rng.random()).collect();
        items.push(BatchItem {
            example,
            negatives,
            dropout_seeds,
        });
    }
    Ok(TrainingBatch { items })
}

/// Holds the model together with the prepared training data.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: CcgsModel,
    prepared: Vec<PreparedVideo>,
    examples: Vec<TrainingExample>,
    hard_negatives: Option<Vec<Vec<usize>>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, split: &CorpusSplit) -> Result<Self> {
        let model = CcgsModel::new(cfg.model.clone())?;
        Self::with_model(cfg, split, model)
    }

    /// Continues from an existing model, e.g. one restored from a
    /// checkpoint; its optimizer step counter decides where the run resumes.
    pub fn with_model(cfg: TrainConfig, split: &CorpusSplit, model: CcgsModel) -> Result<Self> {
        cfg.validate()?;
        let prepared = model.prepare_all(split.videos())?;
        let examples = prepare_examples(split, &prepared)?;
        let hard_negatives = match cfg.negative_strategy {
            NegativeStrategy::Uniform => None,
            NegativeStrategy::Bm25Hard => {
                let index = bm25_build(split.videos())?;
                Some(
                    examples
                        .iter()
                        .zip(&split.qa)
                        .map(|(ex, qa)| {
                            bm25_rank(&qa.question, &index)
                                .into_iter()
                                .map(|(v, _)| v)
                                .filter(|&v| v != ex.video)
                                .collect()
                        })
                        .collect(),
                )
            }
        };
        let trainer = Self {
            cfg,
            model,
            prepared,
            examples,
            hard_negatives,
        };
        if trainer.hard_negatives.is_some() && trainer.examples.len() != split.qa.len() {
            // The zip above pairs examples with questions positionally.
            return Err(Error::InvalidArgument(
                "bm25-hard negatives need every question to be trainable".into(),
            ));
        }
        Ok(trainer)
    }

    pub fn examples(&self) -> &[TrainingExample] {
        &self.examples
    }

    pub fn prepared(&self) -> &[PreparedVideo] {
        &self.prepared
    }

    pub fn sample_batch(&self, rng: &mut ChaCha8Rng) -> Result<TrainingBatch> {
        sample_batch(
            &self.examples,
            self.prepared.len(),
            self.hard_negatives.as_deref(),
            &self.cfg,
            rng,
        )
    }

    /// Records the batch-mean loss on `tape`, returning the loss variable
    /// and the loss values.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &TrainingBatch, train: bool) -> Result<(Var, StepLosses)> {
        if batch.items.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut terms = Vec::with_capacity(batch.items.len());
        let (mut l1_sum, mut l2_sum) = (0.0, 0.0);
        for item in &batch.items {
            let ex = &self.examples[item.example];
            let seed = |i: usize| item.dropout_seeds.get(i).copied().unwrap_or(0);
            let pos = self
                .model
                .forward(tape, &ex.tokens, &self.prepared[ex.video], train, seed(0))?;
            let mut negs = Vec::with_capacity(item.negatives.len());
            for (i, &n) in item.negatives.iter().enumerate() {
                if n == ex.video {
                    return Err(Error::InvalidArgument(format!(
                        "negative {n} equals the positive video of {}",
                        ex.question_id
                    )));
                }
                negs.push(self.model.forward(tape, &ex.tokens, &self.prepared[n], train, seed(i + 1))?);
            }
            let l1 = predictor_loss(tape, pos, ex.target)?;
            let global = contrastive_concat(tape, pos, &negs, ex.target)?;
            let l2 = contrastive_loss(tape, &global)?;
            l1_sum += tape.value(l1).item();
            l2_sum += tape.value(l2).item();
            terms.push(tape.add(l1, l2)?);
        }
        let stacked = tape.concat(&terms, crate::numcore::Axis::Cols)?;
        let sum = tape.sum(stacked);
        let n = batch.items.len() as f64;
        let loss = tape.scale(sum, 1.0 / n);
        let losses = StepLosses {
            loss: tape.value(loss).item(),
            loss1: l1_sum / n,
            loss2: l2_sum / n,
        };
        Ok((loss, losses))
    }

    /// Loss values without touching the parameters.
    pub fn compute_losses(&self, batch: &TrainingBatch, train: bool) -> Result<StepLosses> {
        let mut tape = Tape::new();
        Ok(self.batch_loss(&mut tape, batch, train)?.1)
    }

    /// Forward, backward and one AdamW update.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let (loss, losses) = self.batch_loss(&mut tape, batch, true)?;
        let grads = tape.backward(loss)?;
        let params = &mut self.model.params;
        params.zero_grads();
        params.accumulate_grads(&tape, &grads)?;
        params.fill_missing_grads();
        params.adamw_step(&self.cfg.optimizer())?;
        Ok(losses)
    }

    /// Samples the batch for the current optimizer step and trains on it.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.model.params.step();
        let mut rng = step_rng(self.cfg.seed, step);
        let batch = self.sample_batch(&mut rng)?;
        let losses = self.train_step(&batch)?;
        Ok(StepRecord {
            step: step + 1,
            loss: losses.loss,
            loss1: losses.loss1,
            loss2: losses.loss2,
            lr: self.cfg.lr,
            seed: self.cfg.seed,
        })
    }

    /// Eval-mode loss over every training question, with negatives drawn
    /// from `seed`.
    pub fn dataset_loss(&self, seed: u64) -> Result<StepLosses> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TrainConfig {
            batch_size: 1,
            ..self.cfg.clone()
        };
        let mut items = Vec::with_capacity(self.examples.len());
        for example in 0..self.examples.len() {
            let one = sample_batch(
                &self.examples[example..=example],
                self.prepared.len(),
                self.hard_negatives.as_ref().map(|h| &h[example..=example]),
                &cfg,
                &mut rng,
            )?;
            items.extend(one.items.into_iter().map(|it| BatchItem { example, ..it }));
        }
        self.compute_losses(&TrainingBatch { items }, false)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters with the best validation Rank@1 mIoU, or the final ones
    /// when no validation split is given.
    pub best: ParameterSet,
    pub best_step: u64,
    pub best_score: Option<f64>,
    pub last: ParameterSet,
    pub log: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
}

fn validate_rank1(model: &CcgsModel, val: &CorpusSplit) -> Result<f64> {
    let opts = EvalOptions {
        rank_ks: vec![1],
        recall_ks: vec![1],
        ..EvalOptions::default()
    };
    let out = evaluate(Some(model), val, EvalMode::Ccgs, &opts)?;
    Ok(out.report.rank_miou(1).unwrap_or(0.0))
}

/// Trains until the optimizer step counter reaches `cfg.steps`, validating
/// on `val` every `cfg.eval_every` steps and at the end.
pub fn fit(trainer: &mut Trainer, val: Option<&CorpusSplit>) -> Result<FitOutcome> {
    let mut log = Vec::new();
    let mut validations = Vec::new();
    let mut best = trainer.model.params.clone();
    let mut best_step = trainer.model.params.step();
    let mut best_score = None;
    let mut check = |trainer: &Trainer,
                     best: &mut ParameterSet,
                     best_step: &mut u64,
                     best_score: &mut Option<f64>|
     -> Result<()> {
        let step = trainer.model.params.step();
        let Some(val) = val else {
            *best = trainer.model.params.clone();
            *best_step = step;
            return Ok(());
        };
        let score = validate_rank1(&trainer.model, val)?;
        info!("step {step}: validation Rank@1 mIoU {score:.2}");
        validations.push(ValidationRecord { step, rank1_miou: score });
        if best_score.is_none_or(|b| score > b) {
            *best = trainer.model.params.clone();
            *best_step = step;
            *best_score = Some(score);
        }
        Ok(())
    };
    check(trainer, &mut best, &mut best_step, &mut best_score)?;
    while trainer.model.params.step() < trainer.cfg.steps {
        let record = trainer.step()?;
        if !record.loss.is_finite() {
            return Err(Error::InvalidArgument(format!("loss diverged at step {}", record.step)));
        }
        info!(
            "step {}: loss {:.4} (loss1 {:.4}, loss2 {:.4})",
            record.step, record.loss, record.loss1, record.loss2
        );
        let step = record.step;
        log.push(record);
        let periodic = trainer.cfg.eval_every > 0 && step % trainer.cfg.eval_every == 0;
        if periodic || step == trainer.cfg.steps {
            check(trainer, &mut best, &mut best_step, &mut best_score)?;
        }
    }
    Ok(FitOutcome {
        best,
        best_step,
        best_score,
        last: trainer.model.params.clone(),
        log,
        validations,
    })
}

/// Training log as JSON lines.
pub fn log_to_jsonl(log: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
