use crate::error::{Error, Result};
use crate::rng::Rng;

use super::batch::TokenBatch;
use super::example::{Example, Schema};
use super::vocab::Vocab;

/// Tokenized, padded inputs for one mini-batch, shaped by dataset schema.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Classification { tokens: TokenBatch, labels: Vec<usize> },
    PairLabeled { a: TokenBatch, b: TokenBatch, labels: Vec<f64> },
    PairScored { a: TokenBatch, b: TokenBatch, scores: Vec<f64> },
    Triplet { anchor: TokenBatch, positive: TokenBatch, negative: TokenBatch },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Classification { tokens, .. } => tokens.batch_size,
            Batch::PairLabeled { a, .. } | Batch::PairScored { a, .. } => a.batch_size,
            Batch::Triplet { anchor, .. } => anchor.batch_size,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn schema(&self) -> Schema {
        match self {
            Batch::Classification { .. } => Schema::Classification,
            Batch::PairLabeled { .. } => Schema::PairLabeled,
            Batch::PairScored { .. } => Schema::PairScored,
            Batch::Triplet { .. } => Schema::Triplet,
        }
    }

    /// Tokenizes one chunk of same-schema examples.
    pub fn from_examples(examples: &[&Example], vocab: &Vocab, max_seq_len: usize) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::invalid("cannot build an empty batch"))?;
        let schema = first.schema();
        if let Some(e) = examples.iter().find(|e| e.schema() != schema) {
            return Err(Error::Dataset(format!("mixed {schema} and {} examples in one batch", e.schema())));
        }
        let column = |k: usize| -> Result<TokenBatch> {
            let seqs: Vec<Vec<usize>> = examples.iter().map(|e| vocab.encode(e.texts()[k], max_seq_len)).collect();
            TokenBatch::from_sequences(&seqs, max_seq_len)
        };
        Ok(match schema {
            Schema::Classification => Batch::Classification {
                tokens: column(0)?,
                labels: examples
                    .iter()
                    .map(|e| match e {
                        Example::Classification { label, .. } => *label,
                        _ => unreachable!(),
                    })
                    .collect(),
            },
            Schema::PairLabeled => Batch::PairLabeled {
                a: column(0)?,
                b: column(1)?,
                labels: examples
                    .iter()
                    .map(|e| match e {
                        Example::PairLabeled { label, .. } => f64::from(*label),
                        _ => unreachable!(),
                    })
                    .collect(),
            },
            Schema::PairScored => Batch::PairScored {
                a: column(0)?,
                b: column(1)?,
                scores: examples
                    .iter()
                    .map(|e| match e {
                        Example::PairScored { score, .. } => *score,
                        _ => unreachable!(),
                    })
                    .collect(),
            },
            Schema::Triplet => Batch::Triplet {
                anchor: column(0)?,
                positive: column(1)?,
                negative: column(2)?,
            },
        })
    }
}

/// Index chunks of `0..n`: optionally Fisher–Yates shuffled, last chunk may be short.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    vocab: &Vocab,
    max_seq_len: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    batch_indices(examples.len(), batch_size, rng, shuffle)?
        .into_iter()
        .map(|idx| {
            let chunk: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&chunk, vocab, max_seq_len)
        })
        .collect()
}

/// Tokenizes free-standing sentences into one padded batch.
pub fn encode_texts<S: AsRef<str>>(texts: &[S], vocab: &Vocab, max_seq_len: usize) -> Result<TokenBatch> {
    let seqs: Vec<Vec<usize>> = texts.iter().map(|t| vocab.encode(t.as_ref(), max_seq_len)).collect();
    TokenBatch::from_sequences(&seqs, max_seq_len)
}
