//! Training procedures: single-task, multitask, transfer, the two SimCSE
//! objectives and the staged pipeline, plus checkpoints.
//!
//! Every procedure draws its randomness from streams derived from
//! `TrainConfig::seed`, so (seed, config, data) fixes every loss value and
//! every checkpoint byte.

mod checkpoint;
mod pipeline;
mod simcse;

pub use checkpoint::{
    from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint, EpochRecord, Stage, StageMetric,
    FORMAT_VERSION, MAGIC,
};
pub use pipeline::{
    run_two_tier, sts_sentences, Inputs, PipelineConfig, ProcedureRegistry, TrainingProcedure, TwoTierConfig,
};
pub use simcse::{alignment, train_sup_simcse, train_unsup_simcse};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{encode_texts, make_batches, Batch, Example, Schema, Vocab};
use crate::dropout::{DropoutCtx, DropoutPolicy, Mode};
use crate::encoder::{init_params, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{accuracy, pearson, Metric, MetricReport};
use crate::objectives::{
    bce_loss, cosine, mse_loss, paraphrase_logit, sst_logits, sts_score, SimilarityHeadKind, Task, DEFAULT_TAU,
    HEAD_PREFIX, NUM_SENTIMENT_CLASSES,
};
use crate::optim::{AdamW, OptimConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;

/// Batch size used for every evaluation pass.
pub const EVAL_BATCH: usize = 64;

const INIT_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SstLoss {
    /// Binary cross-entropy against one-hot targets.
    #[default]
    Bce,
    CrossEntropy,
}

fn default_task() -> Task {
    Task::Sts
}
fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    8
}
fn default_dropout() -> Option<DropoutPolicy> {
    Some(DropoutPolicy::standard(0.3))
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_tasks() -> Vec<Task> {
    Task::ALL.to_vec()
}
fn default_min_count() -> usize {
    1
}

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Dropout for this stage; `None` keeps the encoder's own policy.
    #[serde(default = "default_dropout")]
    pub dropout: Option<DropoutPolicy>,
    #[serde(default)]
    pub sts_head: SimilarityHeadKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    /// Extra dev evaluations every this many steps; epoch ends always evaluate.
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub sst_loss: SstLoss,
    /// Tasks trained by multitask runs.
    #[serde(default = "default_tasks")]
    pub tasks: Vec<Task>,
    /// Train only the task heads.
    #[serde(default)]
    pub freeze_encoder: bool,
    /// Minimum token frequency when a run builds its own vocabulary.
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: default_task(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            optim: OptimConfig::default(),
            dropout: default_dropout(),
            sts_head: SimilarityHeadKind::default(),
            tau: default_tau(),
            seed: 0,
            eval_every: None,
            sst_loss: SstLoss::default(),
            tasks: default_tasks(),
            freeze_encoder: false,
            min_count: default_min_count(),
        }
    }
}

impl TrainConfig {
    /// Unsupervised SimCSE defaults: batch 64, lr 3e-5, dropout 0.1.
    pub fn unsup_simcse() -> Self {
        TrainConfig {
            batch_size: 64,
            optim: OptimConfig::default().with_lr(3e-5),
            dropout: Some(DropoutPolicy::standard(0.1)),
            ..Self::default()
        }
    }

    /// Supervised SimCSE defaults: batch 24, lr 5e-5, dropout 0.1, 5 epochs.
    pub fn sup_simcse() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 24,
            optim: OptimConfig::default().with_lr(5e-5),
            dropout: Some(DropoutPolicy::standard(0.1)),
            ..Self::default()
        }
    }

    /// Zero epochs is allowed and returns the initial weights.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("train.tau must be positive, got {}", self.tau)));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("train.eval_every must be positive when set".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("train.tasks must name at least one task".into()));
        }
        if self.min_count == 0 {
            return Err(Error::Config("train.min_count must be at least 1".into()));
        }
        self.optim.validate()?;
        if let Some(d) = &self.dropout {
            d.validate()?;
        }
        Ok(())
    }

    /// The enabled tasks in canonical order, without repeats.
    fn enabled_tasks(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|t| self.tasks.contains(t)).collect()
    }
}

pub fn task_schema(task: Task) -> Schema {
    match task {
        Task::Sst => Schema::Classification,
        Task::Paraphrase => Schema::PairLabeled,
        Task::Sts => Schema::PairScored,
    }
}

pub fn task_metric(task: Task) -> Metric {
    match task {
        Task::Sts => Metric::Pearson,
        Task::Sst | Task::Paraphrase => Metric::Accuracy,
    }
}

/// Train and dev examples of one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl Split {
    pub fn new(train: Vec<Example>, dev: Vec<Example>) -> Self {
        Split { train, dev }
    }

    fn check(&self, task: Task) -> Result<()> {
        let schema = task_schema(task);
        crate::data::expect_schema(&self.train, schema, &format!("{task} train split"))?;
        crate::data::expect_schema(&self.dev, schema, &format!("{task} dev split"))?;
        if self.train.is_empty() {
            return Err(Error::Dataset(format!("{task} train split is empty")));
        }
        Ok(())
    }
}

/// Per-task splits for multitask runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskSplits {
    pub sst: Option<Split>,
    pub para: Option<Split>,
    pub sts: Option<Split>,
}

impl TaskSplits {
    pub fn get(&self, task: Task) -> Option<&Split> {
        match task {
            Task::Sst => self.sst.as_ref(),
            Task::Paraphrase => self.para.as_ref(),
            Task::Sts => self.sts.as_ref(),
        }
    }

    pub fn require(&self, task: Task) -> Result<&Split> {
        self.get(task)
            .ok_or_else(|| Error::Dataset(format!("no {task} dataset was provided")))
    }
}

/// Where a run's weights come from.
#[derive(Clone, Debug)]
pub enum Init {
    /// Random weights; the vocabulary is built from the run's training text.
    Fresh(EncoderConfig),
    /// Random weights over a given vocabulary.
    FreshWithVocab(EncoderConfig, Vocab),
    /// Continue from a checkpoint.
    From(Checkpoint),
}

/// An untrained checkpoint drawn exactly as a fresh run with this seed would draw it.
pub fn fresh_checkpoint(encoder: &EncoderConfig, vocab: Vocab, seed: u64) -> Result<Checkpoint> {
    let mut config = encoder.clone();
    config.vocab_size = vocab.len();
    let params = init_params(&config, &mut Rng::new(seed).derive(INIT_STREAM))?;
    Ok(Checkpoint {
        encoder: config,
        vocab,
        params,
        stage: Stage::Baseline,
        sts_head: SimilarityHeadKind::default(),
        trained_heads: Vec::new(),
        history: Vec::new(),
        stage_metrics: Vec::new(),
    })
}

struct Setup {
    encoder: EncoderConfig,
    vocab: Vocab,
    params: ParamStore,
    trained_heads: Vec<Task>,
    stage_metrics: Vec<crate::train::StageMetric>,
}

/// Resolves the stage's encoder config and starting weights.
///
/// Parameters the checkpoint lacks (e.g. adaptive-dropout scalars when the
/// stage switches dropout kind) and the heads in `reinit` come from a fresh
/// draw under the stage seed.
fn prepare<'t>(
    init: Init,
    cfg: &TrainConfig,
    texts: impl FnOnce() -> Vec<&'t str>,
    reinit: &[Task],
) -> Result<Setup> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let with_dropout = |mut enc: EncoderConfig| {
        if let Some(d) = &cfg.dropout {
            enc.dropout = d.clone();
        }
        enc
    };
    let (encoder, vocab, base) = match init {
        Init::Fresh(enc) => {
            let vocab = Vocab::build(texts(), cfg.min_count);
            (with_dropout(enc), vocab, None)
        }
        Init::FreshWithVocab(enc, vocab) => (with_dropout(enc), vocab, None),
        Init::From(ckpt) => (with_dropout(ckpt.encoder.clone()), ckpt.vocab.clone(), Some(ckpt)),
    };
    let mut encoder = encoder;
    encoder.vocab_size = vocab.len();
    let fresh = init_params(&encoder, &mut root.derive(INIT_STREAM))?;
    match base {
        None => Ok(Setup {
            encoder,
            vocab,
            params: fresh,
            trained_heads: Vec::new(),
            stage_metrics: Vec::new(),
        }),
        Some(ckpt) => {
            let mut params = ckpt.params;
            for (name, t) in fresh.iter() {
                if !params.contains(name) {
                    params.insert(name, t.clone());
                }
            }
            for task in reinit {
                params.copy_prefix_from(&fresh, task.head_prefix())?;
            }
            let trained_heads = ckpt.trained_heads.into_iter().filter(|t| !reinit.contains(t)).collect();
            Ok(Setup {
                encoder,
                vocab,
                params,
                trained_heads,
                stage_metrics: ckpt.stage_metrics,
            })
        }
    }
}

/// Which parameters receive updates.
#[derive(Clone, Debug)]
struct Scope {
    heads: Vec<Task>,
    encoder: bool,
}

impl Scope {
    fn trainable(&self, name: &str) -> bool {
        if name.starts_with(HEAD_PREFIX) {
            self.heads.iter().any(|t| name.starts_with(t.head_prefix()))
        } else {
            self.encoder
        }
    }
}

/// Optimizer state plus the shared dropout stream of one stage.
struct Trainer {
    encoder: Encoder,
    params: ParamStore,
    scope: Scope,
    mask: Vec<bool>,
    opt: AdamW,
    dropout_rng: Rng,
    step: usize,
}

impl Trainer {
    fn new(encoder: EncoderConfig, params: ParamStore, scope: Scope, cfg: &TrainConfig) -> Result<Self> {
        let mask = params.names().map(|n| scope.trainable(n)).collect();
        Ok(Trainer {
            encoder: Encoder::new(encoder)?,
            params,
            scope,
            mask,
            opt: AdamW::new(cfg.optim.clone())?,
            dropout_rng: Rng::new(cfg.seed).derive(DROPOUT_STREAM),
            step: 0,
        })
    }

    /// One forward/backward/update. `loss` may decline a batch with `None`.
    fn step<F>(&mut self, loss: F) -> Result<Option<f64>>
    where
        F: FnOnce(&mut Graph, &Bound, &Encoder, &mut DropoutCtx<'_>) -> Result<Option<Var>>,
    {
        let mut g = Graph::new();
        let scope = &self.scope;
        let bound = self.params.bind_where(&mut g, |n| scope.trainable(n));
        let mut ctx = DropoutCtx::new(Mode::Train, self.step, &mut self.dropout_rng);
        let Some(loss) = loss(&mut g, &bound, &self.encoder, &mut ctx)? else {
            return Ok(None);
        };
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::invalid(format!("non-finite training loss at step {}", self.step)));
        }
        g.backward(loss)?;
        self.opt.step_masked(&mut self.params, &bound.grads(&g), &self.mask)?;
        self.step += 1;
        Ok(Some(value))
    }

    fn predictor<'a>(&'a self, vocab: &'a Vocab, sts_head: SimilarityHeadKind) -> Predictor<'a> {
        Predictor {
            encoder: &self.encoder,
            params: &self.params,
            vocab,
            sts_head,
        }
    }
}

/// Dev metrics by task name plus the selection score, when defined.
type DevResult = (IndexMap<String, f64>, Option<f64>);

/// History plus the weights of the best-scoring evaluation.
struct Tracker {
    stage: Stage,
    history: Vec<EpochRecord>,
    best: Option<(f64, ParamStore)>,
    loss_sum: f64,
    loss_n: usize,
}

impl Tracker {
    fn new(stage: Stage) -> Self {
        Tracker {
            stage,
            history: Vec::new(),
            best: None,
            loss_sum: 0.0,
            loss_n: 0,
        }
    }

    fn add_loss(&mut self, loss: f64) {
        self.loss_sum += loss;
        self.loss_n += 1;
    }

    fn record(&mut self, epoch: usize, step: usize, (dev, score): DevResult, params: &ParamStore) {
        let train_loss = (self.loss_n > 0).then(|| self.loss_sum / self.loss_n as f64);
        log::info!(
            "{} epoch {epoch} step {step}: train_loss {} dev {:?}",
            self.stage,
            train_loss.map_or("-".into(), |l| format!("{l:.6}")),
            dev
        );
        self.loss_sum = 0.0;
        self.loss_n = 0;
        if let Some(s) = score {
            if self.best.as_ref().is_none_or(|(b, _)| s > *b) {
                self.best = Some((s, params.clone()));
            }
        }
        self.history.push(EpochRecord {
            stage: self.stage,
            epoch,
            step,
            train_loss,
            dev,
            score,
        });
    }

    /// Best-scoring weights, or the final weights when no score was defined.
    fn finish(self, last: ParamStore) -> (ParamStore, Vec<EpochRecord>) {
        let params = self.best.map_or(last, |(_, p)| p);
        (params, self.history)
    }
}

/// Runs `epochs` passes over the items `batches` yields per epoch, with dev
/// evaluations at epoch ends and every `eval_every` steps.
fn drive<B>(
    trainer: &mut Trainer,
    tracker: &mut Tracker,
    cfg: &TrainConfig,
    mut batches: impl FnMut(usize) -> Result<Vec<B>>,
    mut loss: impl FnMut(&mut Graph, &Bound, &Encoder, &mut DropoutCtx<'_>, &B) -> Result<Option<Var>>,
    mut dev: impl FnMut(&Trainer) -> Result<DevResult>,
) -> Result<()> {
    for epoch in 1..=cfg.epochs {
        let items = batches(epoch)?;
        let n = items.len();
        for (i, item) in items.iter().enumerate() {
            if let Some(l) = trainer.step(|g, p, e, ctx| loss(g, p, e, ctx, item))? {
                tracker.add_loss(l);
            }
            let mid = i + 1 < n && cfg.eval_every.is_some_and(|k| trainer.step.is_multiple_of(k));
            if mid {
                let result = dev(trainer)?;
                tracker.record(epoch, trainer.step, result, &trainer.params);
            }
        }
        let result = dev(trainer)?;
        tracker.record(epoch, trainer.step, result, &trainer.params);
    }
    Ok(())
}

fn one_hot(labels: &[usize]) -> Vec<f64> {
    let mut t = vec![0.0; labels.len() * NUM_SENTIMENT_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        t[i * NUM_SENTIMENT_CLASSES + l] = 1.0;
    }
    t
}

/// Supervised loss of one task batch.
fn task_loss(
    g: &mut Graph,
    p: &Bound,
    enc: &Encoder,
    ctx: &mut DropoutCtx<'_>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<Var> {
    match batch {
        Batch::Classification { tokens, labels } => {
            let pooled = enc.encode(g, p, tokens, ctx)?.pooled;
            let logits = sst_logits(g, pooled, p)?;
            match cfg.sst_loss {
                SstLoss::Bce => bce_loss(g, logits, &one_hot(labels)),
                SstLoss::CrossEntropy => g.cross_entropy(logits, labels),
            }
        }
        Batch::PairLabeled { a, b, labels } => {
            let ha = enc.encode(g, p, a, ctx)?.pooled;
            let hb = enc.encode(g, p, b, ctx)?.pooled;
            let logit = paraphrase_logit(g, ha, hb, p, enc.config().para_features)?;
            bce_loss(g, logit, labels)
        }
        Batch::PairScored { a, b, scores } => {
            let ha = enc.encode(g, p, a, ctx)?.pooled;
            let hb = enc.encode(g, p, b, ctx)?.pooled;
            let pred = sts_score(g, ha, hb, cfg.sts_head, p)?;
            mse_loss(g, pred, scores)
        }
        Batch::Triplet { .. } => Err(Error::Dataset("triplets do not belong to a task head".into())),
    }
}

fn merge_heads(mut heads: Vec<Task>, more: &[Task]) -> Vec<Task> {
    for t in more {
        if !heads.contains(t) {
            heads.push(*t);
        }
    }
    heads.sort_by_key(|t| Task::ALL.iter().position(|x| x == t));
    heads
}

/// Round-robin training over the enabled tasks. One task is single-task training.
fn run_tasks(cfg: &TrainConfig, init: Init, splits: &TaskSplits, tasks: &[Task], stage: Stage, reinit: &[Task]) -> Result<Checkpoint> {
    let mut chosen = Vec::new();
    for &t in tasks {
        let split = splits.require(t)?;
        split.check(t)?;
        chosen.push((t, split));
    }
    let setup = prepare(
        init,
        cfg,
        || {
            chosen
                .iter()
                .flat_map(|(_, s)| s.train.iter().flat_map(Example::texts))
                .collect()
        },
        reinit,
    )?;
    let rounds = chosen
        .iter()
        .map(|(_, s)| s.train.len().div_ceil(cfg.batch_size))
        .max()
        .unwrap_or(0);
    let mut encoder_cfg = setup.encoder;
    encoder_cfg.dropout = encoder_cfg.dropout.with_run_length(cfg.epochs * rounds * chosen.len());

    let scope = Scope {
        heads: tasks.to_vec(),
        encoder: !cfg.freeze_encoder,
    };
    let vocab = setup.vocab;
    let max_len = encoder_cfg.max_seq_len;
    let mut trainer = Trainer::new(encoder_cfg.clone(), setup.params, scope, cfg)?;
    let mut tracker = Tracker::new(stage);
    let root = Rng::new(cfg.seed);
    let mut shufflers: Vec<Rng> = chosen
        .iter()
        .map(|(t, _)| root.derive(SHUFFLE_STREAM + Task::ALL.iter().position(|x| x == t).unwrap_or(0) as u64))
        .collect();

    drive(
        &mut trainer,
        &mut tracker,
        cfg,
        |_| {
            let mut streams = Vec::with_capacity(chosen.len());
            for ((_, split), rng) in chosen.iter().zip(&mut shufflers) {
                streams.push(make_batches(&split.train, cfg.batch_size, &vocab, max_len, rng, true)?);
            }
            let mut order = Vec::with_capacity(rounds * streams.len());
            for r in 0..rounds {
                for s in &streams {
                    order.push(s[r % s.len()].clone());
                }
            }
            Ok(order)
        },
        |g, p, e, ctx, batch| task_loss(g, p, e, ctx, batch, cfg).map(Some),
        |t| dev_tasks(&t.predictor(&vocab, cfg.sts_head), &chosen),
    )?;

    let last = std::mem::take(&mut trainer.params);
    let (params, history) = tracker.finish(last);
    Ok(Checkpoint {
        encoder: encoder_cfg,
        vocab,
        params,
        stage,
        sts_head: cfg.sts_head,
        trained_heads: merge_heads(setup.trained_heads, tasks),
        history,
        stage_metrics: setup.stage_metrics,
    })
}

/// Dev metrics of each task; the score is their mean when every one is defined.
fn dev_tasks(pred: &Predictor<'_>, chosen: &[(Task, &Split)]) -> Result<DevResult> {
    let mut dev = IndexMap::new();
    let mut complete = true;
    for (task, split) in chosen {
        if split.dev.is_empty() {
            complete = false;
            continue;
        }
        match pred.evaluate(*task, &split.dev)?.value() {
            Ok(v) => {
                dev.insert(task.name().to_string(), v);
            }
            Err(Error::UndefinedCorrelation(_)) => complete = false,
            Err(e) => return Err(e),
        }
    }
    let score = (complete && !dev.is_empty()).then(|| dev.values().sum::<f64>() / dev.len() as f64);
    Ok((dev, score))
}

/// Trains `cfg.task` alone and returns the best-dev weights.
pub fn train_single_task(cfg: &TrainConfig, init: Init, train: &[Example], dev: &[Example]) -> Result<Checkpoint> {
    let splits = single_split(cfg.task, train, dev);
    run_tasks(cfg, init, &splits, &[cfg.task], Stage::Baseline, &[])
}

/// One shared encoder, one head per task in `cfg.tasks`, batches interleaved
/// round-robin with shorter streams cycling.
pub fn train_multitask(cfg: &TrainConfig, init: Init, splits: &TaskSplits) -> Result<Checkpoint> {
    run_tasks(cfg, init, splits, &cfg.enabled_tasks(), Stage::Baseline, &[])
}

/// Encoder from `source`, a freshly drawn `cfg.task` head, then single-task training.
pub fn transfer_finetune(source: &Checkpoint, cfg: &TrainConfig, train: &[Example], dev: &[Example]) -> Result<Checkpoint> {
    let splits = single_split(cfg.task, train, dev);
    run_tasks(
        cfg,
        Init::From(source.clone()),
        &splits,
        &[cfg.task],
        Stage::Transfer,
        &[cfg.task],
    )
}

fn single_split(task: Task, train: &[Example], dev: &[Example]) -> TaskSplits {
    let split = Some(Split::new(train.to_vec(), dev.to_vec()));
    let mut s = TaskSplits::default();
    match task {
        Task::Sst => s.sst = split,
        Task::Paraphrase => s.para = split,
        Task::Sts => s.sts = split,
    }
    s
}

/// Predictions and targets of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub task: Task,
    /// Class ids (sst), 0/1 (paraphrase) or similarity scores (sts).
    pub preds: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Evaluation {
    pub fn metric(&self) -> Metric {
        task_metric(self.task)
    }

    pub fn n(&self) -> usize {
        self.preds.len()
    }

    pub fn value(&self) -> Result<f64> {
        match self.task {
            Task::Sts => pearson(&self.preds, &self.targets),
            Task::Sst | Task::Paraphrase => {
                let as_ids = |v: &[f64]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
                accuracy(&as_ids(&self.preds), &as_ids(&self.targets))
            }
        }
    }

    pub fn report(&self, model: &str) -> Result<MetricReport> {
        Ok(MetricReport::new(model, self.task.name(), self.metric(), self.value()?, self.n()))
    }
}

/// Eval-mode inference over borrowed weights.
pub struct Predictor<'a> {
    encoder: &'a Encoder,
    params: &'a ParamStore,
    vocab: &'a Vocab,
    sts_head: SimilarityHeadKind,
}

/// An [`Encoder`] built from a checkpoint, for use with [`Predictor`].
pub fn checkpoint_encoder(ckpt: &Checkpoint) -> Result<Encoder> {
    Encoder::new(ckpt.encoder.clone())
}

impl<'a> Predictor<'a> {
    pub fn new(encoder: &'a Encoder, ckpt: &'a Checkpoint) -> Self {
        Predictor {
            encoder,
            params: &ckpt.params,
            vocab: &ckpt.vocab,
            sts_head: ckpt.sts_head,
        }
    }

    /// Pooled eval-mode embeddings, one row per text.
    pub fn embed<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EVAL_BATCH) {
            let batch = encode_texts(chunk, self.vocab, self.encoder.config().max_seq_len)?;
            out.extend(self.encoder.embed_sentences(self.params, &batch)?);
        }
        Ok(out)
    }

    /// Cosine similarity of two texts' embeddings.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let e = self.embed(&[a, b])?;
        cosine(&e[0], &e[1])
    }

    fn forward(&self, task: Task, chunk: &[Example]) -> Result<Vec<f64>> {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs, self.vocab, self.encoder.config().max_seq_len)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mut rng = Rng::new(0);
        let mut ctx = DropoutCtx::new(Mode::Eval, 0, &mut rng);
        let enc = self.encoder;
        let out = match (&batch, task) {
            (Batch::Classification { tokens, .. }, Task::Sst) => {
                let pooled = enc.encode(&mut g, &p, tokens, &mut ctx)?.pooled;
                let logits = sst_logits(&mut g, pooled, &p)?;
                g.value(logits)
                    .rows()
                    .map(|r| {
                        let mut best = 0;
                        for (i, v) in r.iter().enumerate() {
                            if *v > r[best] {
                                best = i;
                            }
                        }
                        best as f64
                    })
                    .collect()
            }
            (Batch::PairLabeled { a, b, .. }, Task::Paraphrase) => {
                let ha = enc.encode(&mut g, &p, a, &mut ctx)?.pooled;
                let hb = enc.encode(&mut g, &p, b, &mut ctx)?.pooled;
                let logit = paraphrase_logit(&mut g, ha, hb, &p, enc.config().para_features)?;
                g.value(logit).data().iter().map(|&z| f64::from(u8::from(z > 0.0))).collect()
            }
            (Batch::PairScored { a, b, .. }, Task::Sts) => {
                let ha = enc.encode(&mut g, &p, a, &mut ctx)?.pooled;
                let hb = enc.encode(&mut g, &p, b, &mut ctx)?.pooled;
                let score = sts_score(&mut g, ha, hb, self.sts_head, &p)?;
                g.value(score).data().to_vec()
            }
            _ => {
                return Err(Error::Dataset(format!(
                    "{} examples cannot be scored by the {task} head",
                    batch.schema()
                )))
            }
        };
        Ok(out)
    }

    pub fn predict(&self, task: Task, examples: &[Example]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_BATCH) {
            out.extend(self.forward(task, chunk)?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, task: Task, examples: &[Example]) -> Result<Evaluation> {
        crate::data::expect_schema(examples, task_schema(task), &format!("{task} evaluation"))?;
        let targets = examples
            .iter()
            .map(|e| match e {
                Example::Classification { label, .. } => *label as f64,
                Example::PairLabeled { label, .. } => f64::from(*label),
                Example::PairScored { score, .. } => *score,
                Example::Triplet { .. } => unreachable!("schema checked"),
            })
            .collect();
        Ok(Evaluation {
            task,
            preds: self.predict(task, examples)?,
            targets,
        })
    }
}

/// Evaluates a checkpoint's `task` head.
pub fn evaluate(ckpt: &Checkpoint, task: Task, examples: &[Example]) -> Result<Evaluation> {
    let encoder = checkpoint_encoder(ckpt)?;
    Predictor::new(&encoder, ckpt).evaluate(task, examples)
}

/// Hex fingerprint of a parameter store.
pub fn params_hash(params: &ParamStore) -> String {
    format!("{:016x}", params.fingerprint())
}
