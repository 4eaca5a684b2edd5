//! Frozen text embedding: a fixed random token table and a fixed linear
//! reduction to the model width. Stands in for a frozen pretrained text
//! encoder; it is derived from the run seed and never receives gradients.

use crate::dialog::{TokenSeq, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::{matmul, Tensor};

/// Width of the raw token table before reduction.
pub const TABLE_DIM: usize = 64;

#[derive(Clone, Debug)]
pub struct FrozenTextEmbedding {
    table: Tensor,      // vocab_size x TABLE_DIM
    projection: Tensor, // TABLE_DIM x out_dim
}

impl FrozenTextEmbedding {
    /// Deterministic table and reduction for a given seed.
    pub fn new(vocab_size: usize, out_dim: usize, seed: u64) -> Self {
        let mut r = rng::rng_for(seed, tags::EMBED);
        let table = Tensor::randn(&[vocab_size, TABLE_DIM], 1.0, &mut r);
        // variance-preserving reduction: entries N(0, 1/TABLE_DIM)
        let projection = Tensor::randn(
            &[TABLE_DIM, out_dim],
            1.0 / (TABLE_DIM as f64).sqrt(),
            &mut r,
        );
        FrozenTextEmbedding { table, projection }
    }

    pub fn from_parts(table: Tensor, projection: Tensor) -> Result<Self> {
        if table.shape().len() != 2 || projection.shape().len() != 2 {
            return Err(Error::Data("embedding parts must be rank-2".into()));
        }
        if table.shape()[1] != projection.shape()[0] {
            return Err(Error::shape(
                format!("projection rows = {}", table.shape()[1]),
                format!("{}", projection.shape()[0]),
            ));
        }
        Ok(FrozenTextEmbedding { table, projection })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    /// y_0: one projected table row per token, padded with the PAD row to
    /// `text_len` rows.
    pub fn embed(&self, tokens: &TokenSeq, text_len: usize) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Preprocessing("empty token sequence".into()));
        }
        if tokens.len() > text_len {
            return Err(Error::Data(format!(
                "token sequence length {} exceeds text_len {}",
                tokens.len(),
                text_len
            )));
        }
        let vocab = self.vocab_size() as u32;
        let mut rows = Tensor::zeros(&[text_len, self.table.shape()[1]]);
        for i in 0..text_len {
            let id = tokens.ids.get(i).copied().unwrap_or(PAD_ID);
            if id >= vocab {
                return Err(Error::Data(format!(
                    "token id {id} out of range for vocabulary of {vocab}"
                )));
            }
            rows.row_mut(i).copy_from_slice(self.table.row(id as usize));
        }
        Ok(matmul(&rows, &self.projection))
    }
}
