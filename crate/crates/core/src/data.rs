use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Embeddings of one model over a fixed corpus, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub model_id: String,
    /// Identifies the corpus and its row order; equal across a pool.
    pub corpus_hash: String,
    pub data: Matrix,
}

impl EmbeddingSet {
    pub fn new(model_id: impl Into<String>, corpus_hash: impl Into<String>, data: Matrix) -> Self {
        Self {
            model_id: model_id.into(),
            corpus_hash: corpus_hash.into(),
            data,
        }
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn d(&self) -> usize {
        self.data.cols()
    }

    pub fn select(&self, rows: &[usize]) -> Matrix {
        self.data.select_rows(rows)
    }
}

/// Checks that every set in a pool covers the same corpus in the same order.
pub fn check_pool_alignment(pool: &[EmbeddingSet]) -> Result<()> {
    let Some(first) = pool.first() else {
        return Ok(());
    };
    for e in &pool[1..] {
        if e.corpus_hash != first.corpus_hash {
            return Err(Error::Alignment(format!(
                "{} has corpus hash {} but {} has {}",
                e.model_id, e.corpus_hash, first.model_id, first.corpus_hash
            )));
        }
        if e.n() != first.n() {
            return Err(Error::Alignment(format!(
                "{} has {} rows but {} has {}",
                e.model_id,
                e.n(),
                first.model_id,
                first.n()
            )));
        }
    }
    let mut ids: Vec<&str> = pool.iter().map(|e| e.model_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("model ids in a pool must be unique".into()));
    }
    Ok(())
}
