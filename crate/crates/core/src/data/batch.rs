use crate::error::{Error, Result};

/// Padded token-id matrix `[batch_size, seq_len]` with its attention mask.
///
/// `mask[i·T + j]` is 1 exactly when token `j` of row `i` is real; padded
/// positions hold id 0 (`[PAD]`) and mask 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<f64>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    /// Pads `seqs` to the longest row, truncating rows beyond `max_seq_len`.
    pub fn from_sequences(seqs: &[Vec<usize>], max_seq_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("cannot batch zero sequences"));
        }
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::invalid("cannot batch an empty token sequence"));
        }
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(1).min(max_seq_len);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            for j in 0..seq_len {
                match s.get(j) {
                    Some(&id) => {
                        ids.push(id);
                        mask.push(1.0);
                    }
                    None => {
                        ids.push(0);
                        mask.push(0.0);
                    }
                }
            }
        }
        Ok(TokenBatch {
            ids,
            mask,
            batch_size: seqs.len(),
            seq_len,
        })
    }

    pub fn row_ids(&self, row: usize) -> &[usize] {
        &self.ids[row * self.seq_len..(row + 1) * self.seq_len]
    }

    pub fn row_len(&self, row: usize) -> usize {
        self.mask[row * self.seq_len..(row + 1) * self.seq_len]
            .iter()
            .filter(|&&m| m > 0.0)
            .count()
    }
}
