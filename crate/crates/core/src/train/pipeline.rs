//! Named training procedures and the staged STS pipeline.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{Example, Vocab};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::Task;

use super::{
    evaluate, fresh_checkpoint, params_hash, task_metric, train_multitask, train_single_task, train_sup_simcse,
    train_unsup_simcse, transfer_finetune, Checkpoint, Init, Split, Stage, StageMetric, TaskSplits, TrainConfig,
};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoTierConfig {
    /// Go straight from STS training to supervised SimCSE.
    #[serde(default)]
    pub skip_unsup: bool,
    /// Finish with another round of STS training.
    #[serde(default)]
    pub sts_finetune: bool,
}

/// Everything a procedure needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    /// Single-task, multitask and transfer runs, and STS stages of the pipeline.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "TrainConfig::unsup_simcse")]
    pub unsup: TrainConfig,
    #[serde(default = "TrainConfig::sup_simcse")]
    pub sup: TrainConfig,
    #[serde(default)]
    pub two_tier: TwoTierConfig,
}

impl PipelineConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        PipelineConfig {
            encoder,
            train: TrainConfig::default(),
            unsup: TrainConfig::unsup_simcse(),
            sup: TrainConfig::sup_simcse(),
            two_tier: TwoTierConfig::default(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        for c in [&mut self.train, &mut self.unsup, &mut self.sup] {
            c.seed = seed;
        }
    }

    /// The vocabulary size is taken from data, so it may be left at zero.
    pub fn validate(&self) -> Result<()> {
        let mut encoder = self.encoder.clone();
        encoder.vocab_size = encoder.vocab_size.max(1);
        encoder.validate()?;
        self.train.validate()?;
        self.unsup.validate()?;
        self.sup.validate()
    }
}

/// Datasets and an optional starting checkpoint.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub splits: TaskSplits,
    pub triplets: Vec<Example>,
    /// Unlabeled sentences for unsupervised SimCSE; STS train sentences when empty.
    pub sentences: Vec<String>,
    pub init: Option<Checkpoint>,
}

impl Inputs {
    fn require_init(&self, what: &str) -> Result<&Checkpoint> {
        self.init
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{what} starts from a checkpoint; none was given")))
    }

    fn require_triplets(&self) -> Result<&[Example]> {
        if self.triplets.is_empty() {
            return Err(Error::Dataset("no triplet dataset was provided".into()));
        }
        Ok(&self.triplets)
    }

    fn sts_dev(&self) -> &[Example] {
        self.splits.sts.as_ref().map_or(&[], |s| s.dev.as_slice())
    }
}

/// Every sentence of the STS train split, first occurrences in order.
pub fn sts_sentences(split: &Split) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for ex in &split.train {
        for t in ex.texts() {
            if seen.insert(t) {
                out.push(t.to_string());
            }
        }
    }
    out
}

pub trait TrainingProcedure: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn run(&self, cfg: &PipelineConfig, inputs: &Inputs) -> Result<Checkpoint>;
}

#[derive(Debug)]
struct Single;

impl TrainingProcedure for Single {
    fn name(&self) -> &'static str {
        "single"
    }

    fn run(&self, cfg: &PipelineConfig, inputs: &Inputs) -> Result<Checkpoint> {
        let split = inputs.splits.require(cfg.train.task)?;
        let init = match &inputs.init {
            Some(c) => Init::From(c.clone()),
            None => Init::Fresh(cfg.encoder.clone()),
        };
        train_single_task(&cfg.train, init, &split.train, &split.dev)
    }
}

#[derive(Debug)]
struct Multitask;

impl TrainingProcedure for Multitask {
    fn name(&self) -> &'static str {
        "multitask"
    }

    fn run(&self, cfg: &PipelineConfig, inputs: &Inputs) -> Result<Checkpoint> {
        let init = match &inputs.init {
            Some(c) => Init::From(c.clone()),
            None => Init::Fresh(cfg.encoder.clone()),
        };
        train_multitask(&cfg.train, init, &inputs.splits)
    }
}

#[derive(Debug)]
struct UnsupSimcse;

impl TrainingProcedure for UnsupSimcse {
    fn name(&self) -> &'static str {
        "unsup-simcse"
    }

    fn run(&self, cfg: &PipelineConfig, inputs: &Inputs) -> Result<Checkpoint> {
        let init = inputs.require_init("unsupervised SimCSE")?;
        let sentences = if inputs.sentences.is_empty() {
            sts_sentences(inputs.splits.require(Task::Sts)?)
        } else {
            inputs.sentences.clone()
        };
        train_unsup_simcse(&cfg.unsup, init, &sentences, inputs.sts_dev())
    }
}

#[derive(Debug)]
struct SupSimcse;

impl TrainingProcedure for SupSimcse {
    fn name(&self) -> &'static str {
        "sup-simcse"
    }

    fn run(&self, cfg: &PipelineConfig, inputs: &Inputs) -> Result<Checkpoint> {
        let init = inputs.require_init("supervised SimCSE")?;
        train_sup_simcse(&cfg.sup, init, inputs.require_triplets()?, inputs.sts_dev())
    }
}

#[derive(Debug)]
struct TwoTier;

impl TrainingProcedure for TwoTier {
    fn name(&self) -> &'static str {
        "two-tier"
    }

    fn run(&self, cfg: &PipelineConfig, inputs: &Inputs) -> Result<Checkpoint> {
        run_two_tier(cfg, inputs.splits.require(Task::Sts)?, inputs.require_triplets()?)
    }
}

#[derive(Debug)]
struct Transfer;

impl TrainingProcedure for Transfer {
    fn name(&self) -> &'static str {
        "transfer"
    }

    fn run(&self, cfg: &PipelineConfig, inputs: &Inputs) -> Result<Checkpoint> {
        let source = inputs.require_init("transfer")?;
        let split = inputs.splits.require(cfg.train.task)?;
        transfer_finetune(source, &cfg.train, &split.train, &split.dev)
    }
}

type ProcedureFactory = fn() -> Box<dyn TrainingProcedure>;

/// Training procedures by name.
pub struct ProcedureRegistry {
    factories: IndexMap<&'static str, ProcedureFactory>,
}

impl Default for ProcedureRegistry {
    fn default() -> Self {
        let mut r = ProcedureRegistry {
            factories: IndexMap::new(),
        };
        r.register("single", || Box::new(Single));
        r.register("multitask", || Box::new(Multitask));
        r.register("unsup-simcse", || Box::new(UnsupSimcse));
        r.register("sup-simcse", || Box::new(SupSimcse));
        r.register("two-tier", || Box::new(TwoTier));
        r.register("transfer", || Box::new(Transfer));
        r
    }
}

impl ProcedureRegistry {
    pub fn register(&mut self, name: &'static str, factory: ProcedureFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, name: &str) -> Result<Box<dyn TrainingProcedure>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.names().collect();
            Error::Config(format!("unknown training procedure {name:?} (known: {})", known.join(", ")))
        })?;
        Ok(factory())
    }
}

fn stage_metric(label: &str, ckpt: &Checkpoint, sts_dev: &[Example], init_hash: String) -> Result<StageMetric> {
    let value = if sts_dev.is_empty() {
        None
    } else {
        match evaluate(ckpt, Task::Sts, sts_dev)?.value() {
            Ok(v) => Some(v),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        }
    };
    log::info!("stage {label}: sts pearson {value:?}");
    Ok(StageMetric {
        stage: label.to_string(),
        task: Task::Sts,
        metric: task_metric(Task::Sts),
        value,
        n: sts_dev.len(),
        init_hash,
        final_hash: params_hash(&ckpt.params),
    })
}

/// STS training, then unsupervised SimCSE on the STS sentences, then
/// supervised SimCSE on triplets, with an STS evaluation after each stage.
///
/// The vocabulary covers the STS and triplet text so later stages see no
/// unseen words.
pub fn run_two_tier(cfg: &PipelineConfig, sts: &Split, triplets: &[Example]) -> Result<Checkpoint> {
    cfg.validate()?;
    let texts = sts
        .train
        .iter()
        .chain(triplets)
        .flat_map(Example::texts)
        .collect::<Vec<_>>();
    let vocab = Vocab::build(texts, cfg.train.min_count);

    let mut sts_cfg = cfg.train.clone();
    sts_cfg.task = Task::Sts;
    sts_cfg.tasks = vec![Task::Sts];
    let mut unsup = cfg.unsup.clone();
    let mut sup = cfg.sup.clone();
    unsup.sts_head = sts_cfg.sts_head;
    sup.sts_head = sts_cfg.sts_head;

    let mut start = cfg.encoder.clone();
    if let Some(d) = &sts_cfg.dropout {
        start.dropout = d.clone();
    }
    let mut hash = params_hash(&fresh_checkpoint(&start, vocab.clone(), sts_cfg.seed)?.params);
    let mut metrics = Vec::new();
    let mut history = Vec::new();

    let mut ckpt = train_single_task(&sts_cfg, Init::FreshWithVocab(cfg.encoder.clone(), vocab), &sts.train, &sts.dev)?;
    let mut finish = |label: &str, ckpt: &Checkpoint, hash: &mut String| -> Result<()> {
        metrics.push(stage_metric(label, ckpt, &sts.dev, hash.clone())?);
        history.extend(ckpt.history.iter().cloned());
        *hash = params_hash(&ckpt.params);
        Ok(())
    };
    finish("sts_pretrain", &ckpt, &mut hash)?;

    if !cfg.two_tier.skip_unsup {
        ckpt = train_unsup_simcse(&unsup, &ckpt, &sts_sentences(sts), &sts.dev)?;
        finish("unsup_simcse", &ckpt, &mut hash)?;
    }
    ckpt = train_sup_simcse(&sup, &ckpt, triplets, &sts.dev)?;
    finish("sup_simcse", &ckpt, &mut hash)?;
    if cfg.two_tier.sts_finetune {
        ckpt = train_single_task(&sts_cfg, Init::From(ckpt), &sts.train, &sts.dev)?;
        finish("sts_finetune", &ckpt, &mut hash)?;
    }

    ckpt.stage = Stage::TwoTier;
    ckpt.history = history;
    ckpt.stage_metrics = metrics;
    Ok(ckpt)
}
