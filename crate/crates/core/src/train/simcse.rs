//! Contrastive fine-tuning stages.

use crate::data::{batch_indices, encode_texts, Example, Schema};
use crate::dropout::{DropoutCtx, DropoutPolicy, Mode};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::objectives::{cosine, sup_simcse_loss, unsup_simcse_loss, Task};
use crate::rng::Rng;

use super::{
    dev_tasks, drive, prepare, Checkpoint, Init, Scope, Split, Stage, Tracker, TrainConfig, Trainer, EVAL_BATCH,
    SHUFFLE_STREAM,
};

const UNSUP_SHUFFLE: u64 = SHUFFLE_STREAM + 5;
const SUP_SHUFFLE: u64 = SHUFFLE_STREAM + 6;

struct Stream<'a> {
    stage: Stage,
    init: &'a Checkpoint,
    n: usize,
    shuffle: u64,
    sts_dev: &'a [Example],
}

/// Shared driver: `loss` receives the batch's example indices.
fn run<F>(cfg: &TrainConfig, s: Stream<'_>, mut loss: F) -> Result<Checkpoint>
where
    F: FnMut(
        &mut crate::Graph,
        &crate::Bound,
        &Encoder,
        &mut DropoutCtx<'_>,
        &[usize],
        usize,
    ) -> Result<Option<crate::Var>>,
{
    if cfg.freeze_encoder {
        return Err(Error::Config(format!("{} trains only the encoder; freeze_encoder leaves nothing to train", s.stage)));
    }
    let setup = prepare(Init::From(s.init.clone()), cfg, Vec::new, &[])?;
    let mut encoder_cfg = setup.encoder;
    encoder_cfg.dropout = encoder_cfg
        .dropout
        .with_run_length(cfg.epochs * s.n.div_ceil(cfg.batch_size));
    let scope = Scope {
        heads: Vec::new(),
        encoder: true,
    };
    let vocab = setup.vocab;
    let max_len = encoder_cfg.max_seq_len;
    let mut trainer = Trainer::new(encoder_cfg.clone(), setup.params, scope, cfg)?;
    let mut tracker = Tracker::new(s.stage);
    let mut shuffler = Rng::new(cfg.seed).derive(s.shuffle);
    let dev_split = Split::new(Vec::new(), s.sts_dev.to_vec());
    let chosen = [(Task::Sts, &dev_split)];

    drive(
        &mut trainer,
        &mut tracker,
        cfg,
        |_| batch_indices(s.n, cfg.batch_size, &mut shuffler, true),
        |g, p, e, ctx, idx| loss(g, p, e, ctx, idx, max_len),
        |t| dev_tasks(&t.predictor(&vocab, cfg.sts_head), &chosen),
    )?;

    let last = std::mem::take(&mut trainer.params);
    let (params, history) = tracker.finish(last);
    Ok(Checkpoint {
        encoder: encoder_cfg,
        vocab,
        params,
        stage: s.stage,
        sts_head: cfg.sts_head,
        trained_heads: setup.trained_heads,
        history,
        stage_metrics: setup.stage_metrics,
    })
}

/// Each sentence is encoded twice in train mode; the two dropout masks make
/// the positive pair and the rest of the batch supplies negatives.
///
/// Batches of one sentence carry no negatives and are skipped with a warning.
pub fn train_unsup_simcse(
    cfg: &TrainConfig,
    init: &Checkpoint,
    sentences: &[String],
    sts_dev: &[Example],
) -> Result<Checkpoint> {
    if sentences.is_empty() {
        return Err(Error::Dataset("unsupervised SimCSE needs at least one sentence".into()));
    }
    crate::data::expect_schema(sts_dev, Schema::PairScored, "sts dev split")?;
    let stream = Stream {
        stage: Stage::UnsupSimcse,
        init,
        n: sentences.len(),
        shuffle: UNSUP_SHUFFLE,
        sts_dev,
    };
    run(cfg, stream, |g, p, e, ctx, idx, max_len| {
        if idx.len() < 2 {
            log::warn!("skipping a batch of {} sentence(s): no in-batch negatives", idx.len());
            return Ok(None);
        }
        let texts: Vec<&str> = idx.iter().map(|&i| sentences[i].as_str()).collect();
        let tokens = encode_texts(&texts, &init.vocab, max_len)?;
        let h = e.encode(g, p, &tokens, ctx)?.pooled;
        let h_plus = e.encode(g, p, &tokens, ctx)?.pooled;
        unsup_simcse_loss(g, h, h_plus, cfg.tau).map(Some)
    })
}

/// Entailed sentences are positives and contradictions hard negatives.
pub fn train_sup_simcse(
    cfg: &TrainConfig,
    init: &Checkpoint,
    triplets: &[Example],
    sts_dev: &[Example],
) -> Result<Checkpoint> {
    if triplets.is_empty() {
        return Err(Error::Dataset("supervised SimCSE needs at least one triplet".into()));
    }
    crate::data::expect_schema(triplets, Schema::Triplet, "triplet dataset")?;
    crate::data::expect_schema(sts_dev, Schema::PairScored, "sts dev split")?;
    let stream = Stream {
        stage: Stage::SupSimcse,
        init,
        n: triplets.len(),
        shuffle: SUP_SHUFFLE,
        sts_dev,
    };
    run(cfg, stream, |g, p, e, ctx, idx, max_len| {
        let column = |k: usize| {
            let texts: Vec<&str> = idx.iter().map(|&i| triplets[i].texts()[k]).collect();
            encode_texts(&texts, &init.vocab, max_len)
        };
        let h = e.encode(g, p, &column(0)?, ctx)?.pooled;
        let h_plus = e.encode(g, p, &column(1)?, ctx)?.pooled;
        let h_minus = e.encode(g, p, &column(2)?, ctx)?.pooled;
        sup_simcse_loss(g, h, h_plus, h_minus, cfg.tau).map(Some)
    })
}

/// Mean cosine between two train-mode passes over each sentence under `dropout`.
pub fn alignment(ckpt: &Checkpoint, sentences: &[String], dropout: &DropoutPolicy, seed: u64) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::invalid("alignment of zero sentences"));
    }
    let mut config = ckpt.encoder.clone();
    config.dropout = dropout.clone();
    let encoder = Encoder::new(config)?;
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    for chunk in sentences.chunks(EVAL_BATCH) {
        let tokens = encode_texts(chunk, &ckpt.vocab, encoder.config().max_seq_len)?;
        let mut g = crate::Graph::new();
        let p = ckpt.params.bind_frozen(&mut g);
        let mut ctx = DropoutCtx::new(Mode::Train, 0, &mut rng);
        let h = encoder.encode(&mut g, &p, &tokens, &mut ctx)?.pooled;
        let h_plus = encoder.encode(&mut g, &p, &tokens, &mut ctx)?.pooled;
        for (a, b) in g.value(h).rows().zip(g.value(h_plus).rows()) {
            total += cosine(a, b)?;
        }
    }
    Ok(total / sentences.len() as f64)
}
