//! Next-token pretraining of teachers and two-teacher distillation of
//! students.

mod loss;
mod optim;

use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{cross_entropy, distillation_loss, soften, LossGrad, TeacherAggregation};
pub use optim::{clip_grad_norm, learning_rate, AdamW, Schedule};

use crate::error::{Error, Result};
use crate::model::{log_softmax, Checkpoint, CheckpointMeta, ModelConfig, Params, Transformer};
use crate::scalar::Scalar;
use crate::tokenizer::{BOS_ID, EOS_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub distillation_alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Steps between validation passes; 0 evaluates once per epoch.
    pub eval_interval: usize,
    pub schedule: Schedule,
    pub warmup_fraction: f64,
    pub max_steps: Option<usize>,
    pub grad_clip: Option<f64>,
    pub teacher_aggregation: TeacherAggregation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 7e-4,
            epochs: 8,
            batch_size: 128,
            weight_decay: 5.0,
            distillation_alpha: 0.5,
            temperature: 1.0,
            seed: 0,
            eval_interval: 0,
            schedule: Schedule::Cosine,
            warmup_fraction: 0.01,
            max_steps: None,
            grad_clip: Some(1.0),
            teacher_aggregation: TeacherAggregation::MeanKl,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.distillation_alpha) {
            out.push(format!(
                "distillation_alpha must lie in [0, 1], got {}",
                self.distillation_alpha
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            out.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            out.push(format!(
                "warmup_fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                out.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Concatenates `[BOS] doc [EOS]` for every document and cuts the stream
/// into blocks of `context_length` tokens. Consecutive blocks share one
/// token, so every stream token after the first is a target exactly once.
pub fn pack(documents: &[Vec<u32>], context_length: usize) -> Vec<Vec<u32>> {
    assert!(context_length >= 2, "context_length must be at least 2");
    let mut stream = Vec::with_capacity(documents.iter().map(|d| d.len() + 2).sum());
    for doc in documents {
        stream.push(BOS_ID);
        stream.extend_from_slice(doc);
        stream.push(EOS_ID);
    }
    let mut blocks = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + context_length).min(stream.len());
        blocks.push(stream[start..end].to_vec());
        start = end - 1;
    }
    blocks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Index into `evals` of the returned checkpoint.
    pub selected: usize,
    pub wall_time_secs: f64,
}

impl TrainingLog {
    pub fn selected_eval(&self) -> Option<&EvalRecord> {
        self.evals.get(self.selected)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

pub struct TrainOutcome<T> {
    /// Best-validation model; `tokenizer_hash` is left empty for the caller.
    pub checkpoint: Checkpoint<T>,
    pub log: TrainingLog,
}

/// Index of the smallest loss; ties go to the earliest, NaNs never win.
pub fn select_best(losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in losses.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        match best {
            Some(b) if losses[b] <= l => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Picks the checkpoint with the lowest validation loss on `val`.
pub fn select_best_checkpoint<T: Scalar>(checkpoints: &[Checkpoint<T>], val: &[Vec<u32>]) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints to select from".into()));
    }
    let losses = checkpoints
        .iter()
        .map(|c| validation_loss(&c.model, val))
        .collect::<Result<Vec<_>>>()?;
    select_best(&losses).ok_or_else(|| Error::Other("every validation loss is NaN".into()))
}

/// Token-weighted mean next-token cross-entropy over packed blocks.
pub fn validation_loss<T: Scalar>(model: &Transformer<T>, blocks: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for block in blocks.iter().filter(|b| b.len() >= 2) {
        let logits = model.logits(&block[..block.len() - 1])?;
        for (row, &target) in logits.rows().into_iter().zip(&block[1..]) {
            total -= log_softmax(row)[target as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("validation set has no targets".into()));
    }
    Ok(total / count as f64)
}

/// Called after every validation pass with the current model.
pub type EvalSink<'a, T> = dyn FnMut(&EvalRecord, &Transformer<T>) -> Result<()> + 'a;

struct Run<'a, T> {
    config: &'a TrainConfig,
    train: &'a [Vec<u32>],
    val: &'a [Vec<u32>],
    sink: Option<&'a mut EvalSink<'a, T>>,
}

impl<T: Scalar> Run<'_, T> {
    fn execute(
        mut self,
        mut model: Transformer<T>,
        mut loss_fn: impl FnMut(&Array2<T>, &[&[u32]], &[u32]) -> Result<LossGrad<T>>,
    ) -> Result<TrainOutcome<T>> {
        let cfg = self.config;
        cfg.validate()?;
        let started = Instant::now();
        let blocks: Vec<&Vec<u32>> = self.train.iter().filter(|b| b.len() >= 2).collect();
        if cfg.epochs > 0 && blocks.is_empty() {
            return Err(Error::InvalidArgument("training set has no targets".into()));
        }
        let per_epoch = blocks.len().div_ceil(cfg.batch_size);
        let mut total = cfg.epochs * per_epoch;
        if let Some(m) = cfg.max_steps {
            total = total.min(m);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamW::new(model.config(), cfg.weight_decay);
        let mut log = TrainingLog::default();
        let mut best = (f64::INFINITY, model.params().clone(), 0usize);

        let mut evaluate = |model: &Transformer<T>,
                            step: usize,
                            log: &mut TrainingLog,
                            sink: &mut Option<&mut EvalSink<'_, T>>|
         -> Result<()> {
            let val_loss = validation_loss(model, self.val)?;
            let record = EvalRecord {
                step,
                epoch: if per_epoch == 0 {
                    0.0
                } else {
                    step as f64 / per_epoch as f64
                },
                val_loss,
            };
            log::info!("step {step}: val_loss {val_loss:.4}");
            if let Some(s) = sink.as_deref_mut() {
                s(&record, model)?;
            }
            if val_loss < best.0 {
                best = (val_loss, model.params().clone(), log.evals.len());
            }
            log.evals.push(record);
            Ok(())
        };

        evaluate(&model, 0, &mut log, &mut self.sink)?;
        let mut step = 0;
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        'epochs: for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                if step >= total {
                    break 'epochs;
                }
                let inputs: Vec<&[u32]> = chunk.iter().map(|&i| &blocks[i][..blocks[i].len() - 1]).collect();
                let targets: Vec<u32> = chunk.iter().flat_map(|&i| blocks[i][1..].iter().copied()).collect();
                let (logits, cache) = model.forward_train(&inputs)?;
                let lg = loss_fn(&logits, &inputs, &targets)?;
                let mut grads = model.backward(&cache, &lg.dlogits);
                if !lg.loss.is_finite() || !grads.all_finite() {
                    return Err(Error::Diverged { step, loss: lg.loss });
                }
                let grad_norm = match cfg.grad_clip {
                    Some(c) => clip_grad_norm(&mut grads, c),
                    None => grads.sum_of_squares().sqrt(),
                };
                let lr = learning_rate(cfg.schedule, cfg.learning_rate, cfg.warmup_fraction, step, total);
                opt.update(model.params_mut(), &grads, lr);
                log.steps.push(StepRecord {
                    step,
                    epoch,
                    learning_rate: lr,
                    loss: lg.loss,
                    grad_norm,
                });
                step += 1;
                if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
                    evaluate(&model, step, &mut log, &mut self.sink)?;
                }
            }
            if cfg.eval_interval == 0 || step % cfg.eval_interval != 0 {
                evaluate(&model, step, &mut log, &mut self.sink)?;
            }
        }
        if log.evals.last().map(|e| e.step) != Some(step) {
            evaluate(&model, step, &mut log, &mut self.sink)?;
        }

        let (val_loss, params, selected) = best;
        log.selected = selected;
        log.wall_time_secs = started.elapsed().as_secs_f64();
        let record = &log.evals[selected];
        let model = Transformer::from_params(model.config().clone(), params)?;
        let metadata = CheckpointMeta {
            epoch: record.epoch,
            step: record.step,
            val_loss: Some(val_loss).filter(|v| v.is_finite()),
            ..Default::default()
        };
        Ok(TrainOutcome {
            checkpoint: Checkpoint::new(model, "", metadata),
            log,
        })
    }
}

/// Trains a freshly initialized model by next-token cross-entropy.
pub fn train_teacher<T: Scalar>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train: &[Vec<u32>],
    val: &[Vec<u32>],
) -> Result<TrainOutcome<T>> {
    train_teacher_with(model_config, config, train, val, None)
}

pub fn train_teacher_with<'a, T: Scalar>(
    model_config: &ModelConfig,
    config: &'a TrainConfig,
    train: &'a [Vec<u32>],
    val: &'a [Vec<u32>],
    sink: Option<&'a mut EvalSink<'a, T>>,
) -> Result<TrainOutcome<T>> {
    let model = Transformer::new(model_config.clone())?;
    Run {
        config,
        train,
        val,
        sink,
    }
    .execute(model, |logits, _, targets| cross_entropy(logits, targets))
}

/// Softened teacher distributions for a batch, rows aligned with the
/// student's `forward_train` output.
pub fn teacher_distributions<T: Scalar>(
    teacher: &Transformer<T>,
    inputs: &[&[u32]],
    temperature: f64,
) -> Result<Array2<f64>> {
    let parts = inputs
        .iter()
        .map(|seq| Ok(soften(&teacher.logits(seq)?, temperature)))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Other(e.to_string()))
}

/// Trains a fresh student against gold tokens and frozen teachers.
pub fn distill_student<T: Scalar>(
    teachers: &[&Transformer<T>],
    student_config: &ModelConfig,
    config: &TrainConfig,
    train: &[Vec<u32>],
    val: &[Vec<u32>],
) -> Result<TrainOutcome<T>> {
    distill_student_with(teachers, student_config, config, train, val, None)
}

pub fn distill_student_with<'a, T: Scalar>(
    teachers: &[&Transformer<T>],
    student_config: &ModelConfig,
    config: &'a TrainConfig,
    train: &'a [Vec<u32>],
    val: &'a [Vec<u32>],
    sink: Option<&'a mut EvalSink<'a, T>>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if teachers.is_empty() && config.distillation_alpha < 1.0 {
        return Err(Error::InvalidArgument("distillation needs at least one teacher".into()));
    }
    for (i, t) in teachers.iter().enumerate() {
        if t.config().vocab_size != student_config.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "teacher {i} has {} tokens, student {}",
                t.config().vocab_size,
                student_config.vocab_size
            )));
        }
        if t.config().context_length < student_config.context_length {
            return Err(Error::InvalidArgument(format!(
                "teacher {i} context {} is shorter than the student's {}",
                t.config().context_length,
                student_config.context_length
            )));
        }
    }
    let student = Transformer::new(student_config.clone())?;
    let alpha = config.distillation_alpha;
    let temperature = config.temperature;
    let aggregation = config.teacher_aggregation;
    Run {
        config,
        train,
        val,
        sink,
    }
    .execute(student, |logits, inputs, targets| {
        let dists = if alpha < 1.0 {
            teachers
                .iter()
                .map(|t| teacher_distributions(t, inputs, temperature))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        distillation_loss(logits, &dists, targets, alpha, temperature, aggregation)
    })
}

/// Loss and parameter gradient of the distillation objective on one batch
/// of packed blocks, without updating anything.
pub fn batch_loss_and_grad<T: Scalar>(
    student: &Transformer<T>,
    teachers: &[&Transformer<T>],
    blocks: &[&[u32]],
    alpha: f64,
    temperature: f64,
    aggregation: TeacherAggregation,
) -> Result<(f64, Params<T>)> {
    let inputs: Vec<&[u32]> = blocks.iter().map(|b| &b[..b.len() - 1]).collect();
    let targets: Vec<u32> = blocks.iter().flat_map(|b| b[1..].iter().copied()).collect();
    let (logits, cache) = student.forward_train(&inputs)?;
    let dists = if alpha < 1.0 {
        teachers
            .iter()
            .map(|t| teacher_distributions(t, &inputs, temperature))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let lg = distillation_loss(&logits, &dists, &targets, alpha, temperature, aggregation)?;
    Ok((lg.loss, student.backward(&cache, &lg.dlogits)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            n_kv_heads: 1,
            d_model: 16,
            d_ff: 32,
            vocab_size: 12,
            context_length: 16,
            seed,
            ..Default::default()
        }
    }

    fn pattern_docs() -> Vec<Vec<u32>> {
        (0..20).map(|_| (0..30).map(|i| 3 + (i % 4) as u32).collect()).collect()
    }

    #[test]
    fn packing_covers_each_target_once() {
        let docs = vec![vec![5, 6, 7], vec![8], vec![9, 10]];
        let blocks = pack(&docs, 4);
        assert_eq!(
            blocks,
            vec![vec![0, 5, 6, 7], vec![7, 1, 0, 8], vec![8, 1, 0, 9], vec![9, 10, 1]]
        );
        let targets: usize = blocks.iter().map(|b| b.len() - 1).sum();
        assert_eq!(targets, 3 + 1 + 2 + 6 - 1);
    }

    #[test]
    fn select_best_rules() {
        assert_eq!(select_best(&[3.1, 2.9, 3.0]), Some(1));
        assert_eq!(select_best(&[4.0]), Some(0));
        assert_eq!(select_best(&[2.9, 2.9]), Some(0));
        assert_eq!(select_best(&[f64::NAN, 1.0]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let blocks = pack(&pattern_docs(), 16);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train_teacher::<f32>(&tiny(3), &cfg, &blocks, &blocks).unwrap();
        let init = Transformer::<f32>::new(tiny(3)).unwrap();
        assert_eq!(out.checkpoint.model.params(), init.params());
        assert!(out.log.steps.is_empty());
    }

    #[test]
    fn learns_a_periodic_pattern_deterministically() {
        let blocks = pack(&pattern_docs(), 16);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 8,
            weight_decay: 0.0,
            ..Default::default()
        };
        let a = train_teacher::<f32>(&tiny(1), &cfg, &blocks, &blocks).unwrap();
        let b = train_teacher::<f32>(&tiny(1), &cfg, &blocks, &blocks).unwrap();
        assert_eq!(a.log.steps, b.log.steps);
        assert_eq!(a.checkpoint.model.params(), b.checkpoint.model.params());
        let best = a.log.selected_eval().unwrap();
        assert!(best.val_loss < 0.2, "val loss {}", best.val_loss);
        let min = a.log.evals.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(best.val_loss, min);
    }

    #[test]
    fn divergence_is_reported() {
        let blocks = pack(&pattern_docs(), 16);
        let cfg = TrainConfig {
            learning_rate: 1e30,
            epochs: 3,
            batch_size: 4,
            grad_clip: None,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            ..Default::default()
        };
        let err = train_teacher::<f32>(&tiny(1), &cfg, &blocks, &blocks);
        assert!(matches!(err, Err(Error::Diverged { .. })), "{:?}", err.err());
    }

    #[test]
    fn distillation_leaves_teachers_untouched() {
        let blocks = pack(&pattern_docs(), 16);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let t1 = Transformer::<f32>::new(tiny(1)).unwrap();
        let t2 = Transformer::<f32>::new(tiny(2)).unwrap();
        let (p1, p2) = (t1.params().clone(), t2.params().clone());
        distill_student(&[&t1, &t2], &tiny(9), &cfg, &blocks, &blocks).unwrap();
        assert_eq!(t1.params(), &p1);
        assert_eq!(t2.params(), &p2);
        let mut wrong = tiny(4);
        wrong.vocab_size = 13;
        let t3 = Transformer::<f32>::new(wrong).unwrap();
        assert!(matches!(
            distill_student(&[&t1, &t3], &tiny(9), &cfg, &blocks, &blocks),
            Err(Error::VocabMismatch(_))
        ));
        let bad = TrainConfig {
            distillation_alpha: 1.5,
            ..cfg
        };
        assert!(distill_student(&[&t1, &t2], &tiny(9), &bad, &blocks, &blocks).is_err());
    }

    #[test]
    fn alpha_one_matches_teacher_gradient() {
        let blocks = pack(&pattern_docs(), 16);
        let batch: Vec<&[u32]> = blocks.iter().take(3).map(|b| b.as_slice()).collect();
        let student = Transformer::<f64>::new(tiny(5)).unwrap();
        let teacher = Transformer::<f64>::new(tiny(6)).unwrap();
        let (l1, g1) =
            batch_loss_and_grad(&student, &[&teacher], &batch, 1.0, 2.0, TeacherAggregation::MeanKl).unwrap();
        let (l0, g0) = batch_loss_and_grad(&student, &[], &batch, 1.0, 1.0, TeacherAggregation::MeanKl).unwrap();
        assert_eq!(l1, l0);
        assert_eq!(g1, g0);
    }
}
