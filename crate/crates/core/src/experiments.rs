//! Comparison harness: trains the model variants behind each results table
//! and reports their dev metrics in one shape per table.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{synth_toy_corpus, Example, Schema};
use crate::dropout::{DropoutKind, DropoutPolicy, DEFAULT_ADAPTIVE_ALPHA, DEFAULT_CURRICULUM_GAMMA};
use crate::error::{Error, Result};
use crate::eval::{Metric, MetricReport};
use crate::objectives::Task;
use crate::rng::Rng;
use crate::train::{
    evaluate, run_two_tier, sts_sentences, train_multitask, train_single_task, train_sup_simcse, train_unsup_simcse,
    transfer_finetune, Checkpoint, Init, PipelineConfig, Split, TaskSplits, TrainConfig,
};

/// Column order shared by every table: paraphrase, sentiment, similarity.
pub const TABLE_TASKS: [Task; 3] = [Task::Paraphrase, Task::Sst, Task::Sts];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    /// Single-task against multitask training.
    SingleVsMultitask,
    /// Single-task training under each dropout kind.
    DropoutKinds,
    /// Task training with and without a SimCSE-trained encoder.
    Transfer,
    /// The staged pipeline, then transfer to the other tasks.
    TwoTier,
}

impl TableKind {
    pub const ALL: [TableKind; 4] = [
        TableKind::SingleVsMultitask,
        TableKind::DropoutKinds,
        TableKind::Transfer,
        TableKind::TwoTier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TableKind::SingleVsMultitask => "single-vs-multitask",
            TableKind::DropoutKinds => "dropout-kinds",
            TableKind::Transfer => "transfer",
            TableKind::TwoTier => "two-tier",
        }
    }
}

impl FromStr for TableKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TableKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown table {s:?}")))
    }
}

/// Data for every table: three task splits and a triplet set.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub splits: TaskSplits,
    pub triplets: Vec<Example>,
}

impl ExperimentData {
    /// Templated corpora: `train` rows per task split, `dev` rows per dev split.
    pub fn synthetic(train: usize, dev: usize, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let mut stream = 0;
        let mut draw = |schema: Schema, n: usize| {
            stream += 1;
            synth_toy_corpus(schema, n, &mut root.derive(stream))
        };
        let mut split = |schema| -> Result<Split> { Ok(Split::new(draw(schema, train)?, draw(schema, dev)?)) };
        let splits = TaskSplits {
            sst: Some(split(Schema::Classification)?),
            para: Some(split(Schema::PairLabeled)?),
            sts: Some(split(Schema::PairScored)?),
        };
        let triplets = synth_toy_corpus(Schema::Triplet, train, &mut root.derive(99))?;
        Ok(ExperimentData { splits, triplets })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    /// Epochs for paraphrase runs, which are cut short relative to the others.
    #[serde(default = "default_paraphrase_epochs")]
    pub paraphrase_epochs: usize,
}

fn default_paraphrase_epochs() -> usize {
    5
}

impl ExperimentConfig {
    pub fn new(pipeline: PipelineConfig) -> Self {
        ExperimentConfig {
            pipeline,
            paraphrase_epochs: default_paraphrase_epochs(),
        }
    }

    fn task_config(&self, task: Task) -> TrainConfig {
        let mut c = self.pipeline.train.clone();
        c.task = task;
        c.tasks = vec![task];
        if task == Task::Paraphrase {
            c.epochs = self.paraphrase_epochs;
        }
        c
    }
}

/// Reports of one table, rendered as a model × task grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub kind: TableKind,
    pub reports: Vec<MetricReport>,
}

impl Table {
    /// Header cells: `model`, then `<task>_<metric>` per column task.
    pub fn columns() -> Vec<String> {
        let mut cols = vec!["model".to_string()];
        for t in TABLE_TASKS {
            cols.push(format!("{}_{}", t.name(), crate::train::task_metric(t).name()));
        }
        cols
    }

    /// Model names in first-appearance order.
    pub fn models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.reports {
            if !out.contains(&r.model.as_str()) {
                out.push(&r.model);
            }
        }
        out
    }

    pub fn cell(&self, model: &str, task: Task) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.model == model && r.task == task.name())
            .map(|r| r.value)
    }

    /// Tab-separated grid; a model without a metric for a task shows `-`.
    pub fn to_tsv(&self) -> String {
        let mut out = Self::columns().join("\t");
        out.push('\n');
        for m in self.models() {
            out.push_str(m);
            for t in TABLE_TASKS {
                match self.cell(m, t) {
                    Some(v) => {
                        let _ = write!(out, "\t{v:.4}");
                    }
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn dev_report(model: &str, ckpt: &Checkpoint, task: Task, splits: &TaskSplits) -> Result<MetricReport> {
    let dev = &splits.require(task)?.dev;
    evaluate(ckpt, task, dev)?.report(model)
}

fn single(exp: &ExperimentConfig, data: &ExperimentData, task: Task, dropout: Option<DropoutPolicy>) -> Result<Checkpoint> {
    let mut cfg = exp.task_config(task);
    if dropout.is_some() {
        cfg.dropout = dropout;
    }
    let split = data.splits.require(task)?;
    train_single_task(&cfg, Init::Fresh(exp.pipeline.encoder.clone()), &split.train, &split.dev)
}

fn single_rows(model: &str, exp: &ExperimentConfig, data: &ExperimentData, dropout: Option<DropoutPolicy>) -> Result<Vec<MetricReport>> {
    TABLE_TASKS
        .into_iter()
        .map(|t| dev_report(model, &single(exp, data, t, dropout.clone())?, t, &data.splits))
        .collect()
}

fn single_vs_multitask(exp: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<MetricReport>> {
    let mut out = single_rows("single_task", exp, data, None)?;
    let mut cfg = exp.pipeline.train.clone();
    cfg.tasks = Task::ALL.to_vec();
    let multi = train_multitask(&cfg, Init::Fresh(exp.pipeline.encoder.clone()), &data.splits)?;
    for t in TABLE_TASKS {
        out.push(dev_report("multitask", &multi, t, &data.splits)?);
    }
    Ok(out)
}

/// The three regimes at the stage's dropout rate.
fn dropout_variants(exp: &ExperimentConfig) -> Vec<(DropoutKind, DropoutPolicy)> {
    let p = exp
        .pipeline
        .train
        .dropout
        .as_ref()
        .unwrap_or(&exp.pipeline.encoder.dropout)
        .p;
    let curriculum = DropoutPolicy {
        total_steps: None,
        ..DropoutPolicy::curriculum(p, DEFAULT_CURRICULUM_GAMMA, 1)
    };
    let beta = DropoutPolicy::standard(p).beta_or_default();
    let adaptive = DropoutPolicy::adaptive(p, DEFAULT_ADAPTIVE_ALPHA, beta);
    vec![
        (DropoutKind::Standard, DropoutPolicy::standard(p)),
        (DropoutKind::Adaptive, adaptive),
        (DropoutKind::Curriculum, curriculum),
    ]
}

fn dropout_kinds(exp: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for (kind, policy) in dropout_variants(exp) {
        out.extend(single_rows(&format!("single_task_{}", kind.name()), exp, data, Some(policy))?);
    }
    Ok(out)
}

/// STS-trained checkpoint every SimCSE stage starts from.
fn sts_pretrained(exp: &ExperimentConfig, data: &ExperimentData) -> Result<Checkpoint> {
    single(exp, data, Task::Sts, None)
}

fn transferred_rows(model: &str, source: &Checkpoint, exp: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for t in [Task::Paraphrase, Task::Sst] {
        let split = data.splits.require(t)?;
        let ckpt = transfer_finetune(source, &exp.task_config(t), &split.train, &split.dev)?;
        out.push(dev_report(model, &ckpt, t, &data.splits)?);
    }
    out.push(dev_report(model, source, Task::Sts, &data.splits)?);
    Ok(out)
}

fn transfer(exp: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<MetricReport>> {
    let base = sts_pretrained(exp, data)?;
    let sts = data.splits.require(Task::Sts)?;
    let unsup = train_unsup_simcse(&exp.pipeline.unsup, &base, &sts_sentences(sts), &sts.dev)?;
    let sup = train_sup_simcse(&exp.pipeline.sup, &base, &data.triplets, &sts.dev)?;

    let mut out = Vec::new();
    for t in [Task::Paraphrase, Task::Sst] {
        out.push(dev_report("no_transfer", &single(exp, data, t, None)?, t, &data.splits)?);
    }
    out.extend(transferred_rows("transfer_unsup_simcse", &unsup, exp, data)?);
    out.extend(transferred_rows("transfer_sup_simcse", &sup, exp, data)?);
    Ok(out)
}

fn two_tier(exp: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<MetricReport>> {
    let sts = data.splits.require(Task::Sts)?;
    let ckpt = run_two_tier(&exp.pipeline, sts, &data.triplets)?;
    let mut out = transferred_rows("two_tier", &ckpt, exp, data)?;
    for m in &ckpt.stage_metrics {
        if let Some(v) = m.value {
            out.push(MetricReport::new(format!("two_tier/{}", m.stage), m.task.name(), Metric::Pearson, v, m.n));
        }
    }
    Ok(out)
}

pub fn run_table(kind: TableKind, exp: &ExperimentConfig, data: &ExperimentData) -> Result<Table> {
    exp.pipeline.validate()?;
    let reports = match kind {
        TableKind::SingleVsMultitask => single_vs_multitask(exp, data)?,
        TableKind::DropoutKinds => dropout_kinds(exp, data)?,
        TableKind::Transfer => transfer(exp, data)?,
        TableKind::TwoTier => two_tier(exp, data)?,
    };
    Ok(Table { kind, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::optim::OptimConfig;

    fn tiny() -> (ExperimentConfig, ExperimentData) {
        let mut enc = EncoderConfig::toy(0);
        enc.hidden_dim = 8;
        enc.num_layers = 1;
        enc.num_heads = 2;
        enc.ffn_dim = 16;
        enc.max_seq_len = 16;
        enc.pooling = crate::encoder::Pooling::Mean;
        let mut p = PipelineConfig::new(enc);
        p.train.epochs = 1;
        p.train.optim = OptimConfig::default().with_lr(1e-3);
        p.unsup.epochs = 1;
        p.unsup.batch_size = 8;
        p.sup.epochs = 1;
        p.sup.batch_size = 8;
        p.set_seed(3);
        let mut exp = ExperimentConfig::new(p);
        exp.paraphrase_epochs = 1;
        (exp, ExperimentData::synthetic(16, 12, 1).unwrap())
    }

    fn shape(t: &Table) -> Vec<(String, Vec<bool>)> {
        t.models()
            .into_iter()
            .map(|m| (m.to_string(), TABLE_TASKS.iter().map(|&k| t.cell(m, k).is_some()).collect()))
            .collect()
    }

    #[test]
    fn every_table_has_its_rows_and_columns() {
        let (exp, data) = tiny();
        let full = vec![true; 3];
        let t = run_table(TableKind::SingleVsMultitask, &exp, &data).unwrap();
        assert_eq!(shape(&t), [("single_task".into(), full.clone()), ("multitask".into(), full.clone())]);

        let t = run_table(TableKind::DropoutKinds, &exp, &data).unwrap();
        let models: Vec<&str> = t.models();
        assert_eq!(models, ["single_task_standard", "single_task_adaptive", "single_task_curriculum"]);

        let t = run_table(TableKind::Transfer, &exp, &data).unwrap();
        assert_eq!(
            shape(&t),
            [
                ("no_transfer".into(), vec![true, true, false]),
                ("transfer_unsup_simcse".into(), full.clone()),
                ("transfer_sup_simcse".into(), full.clone()),
            ]
        );

        let t = run_table(TableKind::TwoTier, &exp, &data).unwrap();
        assert_eq!(t.models()[0], "two_tier");
        assert_eq!(shape(&t)[0].1, full);
        assert_eq!(t.models().len(), 4);
        for r in &t.reports {
            let ok = match r.metric {
                Metric::Pearson => (-1.0..=1.0).contains(&r.value),
                _ => (0.0..=1.0).contains(&r.value),
            };
            assert!(ok, "{r:?}");
            assert_eq!(r.n, 12);
        }
    }

    #[test]
    fn grid_rendering() {
        let t = Table {
            kind: TableKind::Transfer,
            reports: vec![
                MetricReport::new("a", "sts", Metric::Pearson, 0.5, 3),
                MetricReport::new("a", "paraphrase", Metric::Accuracy, 0.25, 3),
            ],
        };
        assert_eq!(
            t.to_tsv(),
            "model\tparaphrase_accuracy\tsst_accuracy\tsts_pearson\na\t0.2500\t-\t0.5000\n"
        );
        assert_eq!("two-tier".parse::<TableKind>().unwrap(), TableKind::TwoTier);
        assert!("table9".parse::<TableKind>().is_err());
    }
}
