//! Optimization loops: pre-training on signal targets, fine-tuning on
//! ratings, best-checkpoint retention and multi-stage recipes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{pack, EncoderError, LossSelector, ModelParams, Target, TrainExample};
use crate::evalstats::{kendall_pairwise, StatsError};
use crate::rng::{derive_seed, derived_rng};
use crate::signals::{SignalError, SignalVector, TaskSet, TASK_NAMES};
use crate::synthgen::SyntheticExample;
use crate::textcore::RatedExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Use the encoder's dropout rate during updates.
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-5,
            total_steps: 2000,
            eval_every: 50,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self::default()
    }

    pub fn finetune() -> Self {
        TrainConfig {
            total_steps: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.total_steps > 0 && (self.eval_every == 0 || self.eval_every > self.total_steps) {
            return bad(format!("eval_every {} must be in 1..={}", self.eval_every, self.total_steps));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("moment parameters out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("{stage:?} stage cannot use {found} targets")]
    WrongTarget { stage: Stage, found: &'static str },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("validation statistic: {0}")]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Signals(#[from] SignalError),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<ModelParams>,
        history: TrainHistory,
    },
    #[error("invalid task groups: {0}")]
    BadGroups(String),
}

/// Adam with bias correction and a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(n: usize, config: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// Endless sequence of mini-batches; each epoch is a fresh seeded
/// permutation of the training set.
struct BatchStream {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchStream {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut derived_rng(self.seed, "epoch", self.epoch));
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: Option<f64>,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub stage: Stage,
    pub metric_name: String,
    pub evals: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_metric: f64,
}

/// Keeps the best checkpoint seen. Ties go to the earlier step.
#[derive(Debug, Clone)]
pub struct CheckpointSelector {
    maximize: bool,
    best: Option<(usize, f64, ModelParams)>,
}

impl CheckpointSelector {
    pub fn maximizing() -> Self {
        CheckpointSelector { maximize: true, best: None }
    }

    pub fn minimizing() -> Self {
        CheckpointSelector { maximize: false, best: None }
    }

    /// Returns true when `metric` becomes the new best.
    pub fn offer(&mut self, step: usize, metric: f64, params: &ModelParams) -> bool {
        let better = match &self.best {
            None => true,
            Some((_, b, _)) if self.maximize => metric > *b,
            Some((_, b, _)) => metric < *b,
        };
        if better {
            self.best = Some((step, metric, params.clone()));
        }
        better
    }

    pub fn best(&self) -> Option<(usize, f64, &ModelParams)> {
        self.best.as_ref().map(|(s, m, p)| (*s, *m, p))
    }

    pub fn into_best(self) -> Option<(usize, f64, ModelParams)> {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
}

fn run_loop(
    mut params: ModelParams,
    train: &[TrainExample],
    selector: &LossSelector,
    config: &TrainConfig,
    stage: Stage,
    metric_name: &str,
    mut selection: CheckpointSelector,
    evaluate: &dyn Fn(&ModelParams) -> Result<f64, TrainError>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    let mut history = TrainHistory {
        stage,
        metric_name: metric_name.to_string(),
        evals: Vec::new(),
        best_step: 0,
        best_metric: f64::NAN,
    };
    let m0 = evaluate(&params)?;
    history.evals.push(EvalRecord {
        step: 0,
        train_loss: None,
        metric: m0,
    });
    selection.offer(0, m0, &params);

    let mut adam = Adam::new(params.n_params(), config);
    let mut stream = BatchStream::new(train.len(), derive_seed(config.seed, "batches", 0));
    let (mut window, mut window_steps) = (0.0, 0usize);
    for step in 1..=config.total_steps {
        let batch: Vec<TrainExample> = stream
            .next_batch(config.batch_size)
            .into_iter()
            .map(|i| train[i].clone())
            .collect();
        let dropout = config.dropout.then(|| derive_seed(config.seed, "dropout", step as u64));
        let diverged = |reason: String, params: &ModelParams, history: &TrainHistory| TrainError::Diverged {
            step,
            reason,
            last_good: Box::new(params.clone()),
            history: history.clone(),
        };
        let (loss, grad) = match params.loss_and_gradient(&batch, selector, dropout) {
            Ok(r) => r,
            Err(e @ EncoderError::NonFinite { .. }) => return Err(diverged(e.to_string(), &params, &history)),
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}"), &params, &history));
        }
        adam.step(params.data_mut(), &grad, config.learning_rate);
        window += loss;
        window_steps += 1;
        if step % config.eval_every == 0 || step == config.total_steps {
            let metric = match evaluate(&params) {
                Err(TrainError::Encoder(e @ EncoderError::NonFinite { .. })) => {
                    return Err(diverged(e.to_string(), &params, &history))
                }
                other => other?,
            };
            history.evals.push(EvalRecord {
                step,
                train_loss: Some(window / window_steps as f64),
                metric,
            });
            selection.offer(step, metric, &params);
            window = 0.0;
            window_steps = 0;
        }
    }
    let (best_step, best_metric, best) = selection.into_best().expect("step 0 is always offered");
    history.best_step = best_step;
    history.best_metric = best_metric;
    Ok(TrainOutcome { params: best, history })
}

fn require_targets(data: &[TrainExample], stage: Stage) -> Result<(), TrainError> {
    for ex in data {
        match (&ex.target, stage) {
            (Target::Tasks(_), Stage::Pretrain) | (Target::Rating(_), Stage::Finetune) => {}
            (Target::Rating(_), _) => return Err(TrainError::WrongTarget { stage, found: "rating" }),
            (Target::Tasks(_), _) => return Err(TrainError::WrongTarget { stage, found: "signal" }),
        }
    }
    Ok(())
}

/// Minimizes the weighted multitask loss; keeps the checkpoint with the
/// lowest validation loss.
pub fn pretrain(
    params: ModelParams,
    train: &[TrainExample],
    validation: &[TrainExample],
    tasks: &TaskSet,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if validation.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    require_targets(train, Stage::Pretrain)?;
    require_targets(validation, Stage::Pretrain)?;
    let selector = LossSelector::from_tasks(&params, tasks)?;
    let eval = |p: &ModelParams| Ok(p.loss(validation, &selector)?);
    run_loop(
        params.clone(),
        train,
        &selector,
        config,
        Stage::Pretrain,
        "validation_loss",
        CheckpointSelector::minimizing(),
        &eval,
    )
}

/// Validation Kendall statistic of the rating head, all pairs in one group.
pub fn validation_kendall(params: &ModelParams, validation: &[TrainExample]) -> Result<f64, TrainError> {
    let inputs: Vec<_> = validation.iter().map(|e| e.input.clone()).collect();
    let pred = params.predict_ratings(&inputs)?;
    let human: Vec<f64> = validation
        .iter()
        .map(|e| match e.target {
            Target::Rating(y) => y,
            Target::Tasks(_) => f64::NAN,
        })
        .collect();
    Ok(kendall_pairwise(&human, &pred, &vec![0u8; human.len()])?)
}

/// Minimizes squared error on ratings; keeps the checkpoint with the
/// highest validation Kendall statistic.
pub fn finetune(
    params: ModelParams,
    train: &[TrainExample],
    validation: &[TrainExample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if validation.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    require_targets(train, Stage::Finetune)?;
    require_targets(validation, Stage::Finetune)?;
    let eval = |p: &ModelParams| validation_kendall(p, validation);
    run_loop(
        params,
        train,
        &LossSelector::Supervised,
        config,
        Stage::Finetune,
        "validation_kendall",
        CheckpointSelector::maximizing(),
        &eval,
    )
}

pub enum StageSpec<'a> {
    Pretrain {
        train: &'a [TrainExample],
        validation: &'a [TrainExample],
        tasks: &'a TaskSet,
        config: TrainConfig,
    },
    Finetune {
        train: &'a [TrainExample],
        validation: &'a [TrainExample],
        config: TrainConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub stage: Stage,
    pub config: TrainConfig,
    pub history: TrainHistory,
    pub params_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecipeManifest {
    pub initial_params_hash: String,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Error)]
#[error("stage {failed_stage} failed: {source}")]
pub struct RecipeError {
    pub failed_stage: usize,
    pub manifest: RecipeManifest,
    #[source]
    pub source: TrainError,
}

pub struct RecipeOutcome {
    pub params: ModelParams,
    pub manifest: RecipeManifest,
    /// Best checkpoint of every stage, in stage order.
    pub checkpoints: Vec<ModelParams>,
}

/// Runs stages in order, each starting from the previous stage's best
/// checkpoint.
pub fn run_recipe(initial: ModelParams, stages: &[StageSpec<'_>]) -> Result<RecipeOutcome, RecipeError> {
    let mut manifest = RecipeManifest {
        initial_params_hash: initial.content_hash(),
        stages: Vec::new(),
    };
    let mut params = initial;
    let mut checkpoints = Vec::new();
    for (index, spec) in stages.iter().enumerate() {
        let (result, config) = match spec {
            StageSpec::Pretrain {
                train,
                validation,
                tasks,
                config,
            } => (pretrain(params.clone(), train, validation, tasks, config), config),
            StageSpec::Finetune { train, validation, config } => (finetune(params.clone(), train, validation, config), config),
        };
        match result {
            Ok(out) => {
                manifest.stages.push(StageRecord {
                    index,
                    stage: out.history.stage,
                    config: config.clone(),
                    history: out.history,
                    params_hash: out.params.content_hash(),
                });
                checkpoints.push(out.params.clone());
                params = out.params;
            }
            Err(source) => {
                return Err(RecipeError {
                    failed_stage: index,
                    manifest,
                    source,
                })
            }
        }
    }
    Ok(RecipeOutcome {
        params,
        manifest,
        checkpoints,
    })
}

/// Pre-training examples: packed `(z, z~)` with one target block per head.
pub fn signal_examples(
    params: &ModelParams,
    examples: &[SyntheticExample],
    signals: &[SignalVector],
) -> Result<Vec<TrainExample>, TrainError> {
    if examples.len() != signals.len() {
        return Err(TrainError::BadConfig(format!("{} examples, {} signal vectors", examples.len(), signals.len())));
    }
    let max = params.config().max_seq_len;
    examples
        .iter()
        .zip(signals)
        .map(|(e, s)| {
            Ok(TrainExample {
                input: pack(&e.z, &e.z_tilde, max)?,
                target: Target::Tasks(params.head_targets(s)?),
            })
        })
        .collect()
}

/// Indices of `(train, validation)` pre-training examples. Whole source
/// segments are held out, so no `z` is on both sides.
pub fn split_synthetic(examples: &[SyntheticExample], holdout_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(TrainError::BadConfig(format!("holdout fraction {holdout_fraction}")));
    }
    let mut segments: Vec<&[u32]> = examples.iter().map(|e| e.z.ids()).collect();
    segments.sort_unstable();
    segments.dedup();
    if segments.len() < 2 {
        return Err(TrainError::BadConfig(format!("{} distinct segments; need 2", segments.len())));
    }
    segments.shuffle(&mut derived_rng(seed, "split_synthetic", 0));
    let n = segments.len();
    let n_val = ((holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let held: std::collections::HashSet<&[u32]> = segments[..n_val].iter().copied().collect();
    Ok((0..examples.len()).partition(|&i| !held.contains(examples[i].z.ids())))
}

/// Fine-tuning examples: packed `(reference, candidate)` with the rating.
pub fn rated_examples(data: &[RatedExample], max_seq_len: usize) -> Result<Vec<TrainExample>, TrainError> {
    data.iter()
        .map(|r| {
            Ok(TrainExample {
                input: pack(&r.pair.reference, &r.pair.candidate, max_seq_len)?,
                target: Target::Rating(r.rating),
            })
        })
        .collect()
}

/// Metric tasks, likelihood tasks, and the two classification tasks.
pub fn standard_groups() -> Vec<Vec<String>> {
    let g = |r: std::ops::Range<usize>| TASK_NAMES[r].iter().map(|s| s.to_string()).collect();
    vec![g(0..3), g(3..7), g(7..9)]
}

/// Gives every task in `groups[i]` the weight `weights[i]`. The groups
/// must partition the task names of `base`.
pub fn set_task_weights(base: &TaskSet, groups: &[Vec<String>], weights: &[f64]) -> Result<TaskSet, TrainError> {
    if groups.len() != weights.len() {
        return Err(TrainError::BadGroups(format!("{} groups, {} weights", groups.len(), weights.len())));
    }
    let mut assigned: Vec<Option<f64>> = vec![None; base.len()];
    for (group, &w) in groups.iter().zip(weights) {
        for name in group {
            let i = base
                .names()
                .position(|n| n == name)
                .ok_or_else(|| TrainError::BadGroups(format!("unknown task `{name}`")))?;
            if assigned[i].replace(w).is_some() {
                return Err(TrainError::BadGroups(format!("task `{name}` is in two groups")));
            }
        }
    }
    let w: Vec<f64> = assigned
        .iter()
        .zip(base.names())
        .map(|(a, n)| a.ok_or_else(|| TrainError::BadGroups(format!("task `{n}` is in no group"))))
        .collect::<Result<_, _>>()?;
    Ok(base.with_weights(&w)?)
}

/// Every assignment of `levels` to `n_groups` groups, first group slowest.
pub fn weight_grid(levels: &[f64], n_groups: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n_groups {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                levels.iter().map(move |&l| {
                    let mut p = prefix.clone();
                    p.push(l);
                    p
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncodedPair, EncoderConfig, HeadSpec};

    fn tiny() -> ModelParams {
        let cfg = EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            dropout: 0.1,
            init_seed: 1,
            init_std: 0.1,
        };
        ModelParams::init(cfg, HeadSpec::from_tasks(&TaskSet::standard())).unwrap()
    }

    fn rated(n: usize) -> Vec<TrainExample> {
        (0..n)
            .map(|i| {
                let a = 5 + (i % 6) as u32;
                TrainExample {
                    input: EncodedPair::new(vec![2, a, 3, a + (i % 2) as u32, 3], vec![0, 0, 0, 1, 1]).unwrap(),
                    target: Target::Rating(if i % 2 == 0 { 1.0 } else { -1.0 } + 0.01 * i as f64),
                }
            })
            .collect()
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-2,
            total_steps: steps,
            eval_every: 5.min(steps.max(1)),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn selector_rules() {
        let p = tiny();
        let mut s = CheckpointSelector::maximizing();
        for (step, tau) in [(1, 0.1), (2, 0.3), (3, 0.2)] {
            s.offer(step, tau, &p);
        }
        assert_eq!(s.best().unwrap().0, 2);
        let mut s = CheckpointSelector::minimizing();
        for (step, loss) in [(0, 1.0), (1, 0.5), (2, 0.5), (3, 0.7)] {
            s.offer(step, loss, &p);
        }
        assert_eq!(s.best().unwrap().0, 1);
    }

    #[test]
    fn synthetic_split_keeps_segments_together() {
        use crate::synthgen::{BaseOrigin, Origin};
        use crate::textcore::{TokenSeq, Vocabulary};
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"]);
        let ex: Vec<SyntheticExample> = (0..40)
            .map(|i| SyntheticExample {
                z: TokenSeq::from_tokens(vec![["a", "b", "c", "d"][i % 4].to_string(), format!("{}", i % 10)], &vocab),
                z_tilde: TokenSeq::empty(),
                origin: Origin::Base(BaseOrigin::Backtranslation),
                seed: i as u64,
            })
            .collect();
        let (train, val) = split_synthetic(&ex, 0.25, 3).unwrap();
        assert_eq!(train.len() + val.len(), 40);
        assert!(!val.is_empty() && !train.is_empty());
        for &v in &val {
            assert!(train.iter().all(|&t| ex[t].z.tokens() != ex[v].z.tokens()));
        }
        assert_eq!(split_synthetic(&ex, 0.25, 3).unwrap(), (train, val));
    }

    #[test]
    fn zero_steps_return_the_input() {
        let p = tiny();
        let out = finetune(p.clone(), &rated(8), &rated(6), &quick(0)).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.history.evals.len(), 1);
    }

    #[test]
    fn finetune_is_deterministic_and_keeps_its_best() {
        let p = tiny();
        let a = finetune(p.clone(), &rated(20), &rated(10), &quick(30)).unwrap();
        let b = finetune(p, &rated(20), &rated(10), &quick(30)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        let best = a.history.best_metric;
        assert!(a.history.evals.iter().all(|e| e.metric <= best));
        assert_eq!(a.history.evals.len(), 7);
    }

    #[test]
    fn stage_isolation() {
        let p = tiny();
        let tasks = TaskSet::standard();
        assert!(matches!(
            pretrain(p.clone(), &rated(4), &rated(4), &tasks, &quick(5)),
            Err(TrainError::WrongTarget { .. })
        ));
        assert!(matches!(finetune(p, &rated(4), &[], &quick(5)), Err(TrainError::Empty("validation"))));
    }

    #[test]
    fn adam_without_gradient_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(3, &cfg);
        let mut x = vec![0.5, -1.0, 2.0];
        for _ in 0..10 {
            adam.step(&mut x, &[0.0; 3], 0.1);
        }
        assert_eq!(x, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn empty_recipe_is_identity() {
        let p = tiny();
        let out = run_recipe(p.clone(), &[]).unwrap();
        assert_eq!(out.params, p);
        assert!(out.manifest.stages.is_empty());
    }

    #[test]
    fn single_finetune_recipe_matches_finetune() {
        let p = tiny();
        let (train, val) = (rated(12), rated(6));
        let direct = finetune(p.clone(), &train, &val, &quick(10)).unwrap();
        let out = run_recipe(
            p,
            &[StageSpec::Finetune {
                train: &train,
                validation: &val,
                config: quick(10),
            }],
        )
        .unwrap();
        assert_eq!(out.params, direct.params);
        assert_eq!(out.manifest.stages[0].history, direct.history);
    }

    #[test]
    fn failing_stage_keeps_partial_manifest() {
        let p = tiny();
        let (train, val) = (rated(12), rated(6));
        let err = run_recipe(
            p,
            &[
                StageSpec::Finetune {
                    train: &train,
                    validation: &val,
                    config: quick(5),
                },
                StageSpec::Finetune {
                    train: &train,
                    validation: &[],
                    config: quick(5),
                },
            ],
        )
        .err()
        .unwrap();
        assert_eq!(err.failed_stage, 1);
        assert_eq!(err.manifest.stages.len(), 1);
    }

    #[test]
    fn group_weights() {
        let base = TaskSet::standard();
        let t = set_task_weights(&base, &standard_groups(), &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.weights(), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let singles: Vec<Vec<String>> = TASK_NAMES.iter().map(|n| vec![n.to_string()]).collect();
        let w: Vec<f64> = (0..9).map(|i| i as f64 / 10.0).collect();
        assert_eq!(set_task_weights(&base, &singles, &w).unwrap().weights(), w);
        let mut twice = standard_groups();
        twice[1].push("bleu".into());
        assert!(set_task_weights(&base, &twice, &[1.0, 1.0, 1.0]).is_err());
        let grid = weight_grid(&[0.0, 0.5, 1.0], 3);
        assert_eq!(grid.len(), 27);
        let sets: Vec<_> = grid.iter().map(|w| set_task_weights(&base, &standard_groups(), w).unwrap()).collect();
        assert_eq!(sets.len(), 27);
    }
}
