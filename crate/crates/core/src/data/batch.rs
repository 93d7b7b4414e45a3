use super::vocab::{TokenId, PAD};
use crate::error::{Error, Result};

/// Right-padded id matrix, row-major `rows × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<TokenId>,
    /// `true` at real tokens.
    pub mask: Vec<bool>,
    pub rows: usize,
    pub width: usize,
}

impl Batch {
    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.width..(r + 1) * self.width]
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.mask[r * self.width..(r + 1) * self.width]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| self.row_mask(r).iter().filter(|&&m| m).count())
            .collect()
    }

    /// Real (non-pad) tokens in the batch.
    pub fn tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Pads `sentences` to the longest one. The width is the longest length,
/// not `max_len`, which only bounds it.
pub fn encode_batch<S: AsRef<[TokenId]>>(sentences: &[S], max_len: usize) -> Result<Batch> {
    let mut width = 0;
    for (index, s) in sentences.iter().enumerate() {
        let len = s.as_ref().len();
        if len > max_len {
            return Err(Error::SequenceTooLong { index, len, max_len });
        }
        width = width.max(len);
    }
    let rows = sentences.len();
    let mut ids = vec![PAD; rows * width];
    let mut mask = vec![false; rows * width];
    for (r, s) in sentences.iter().enumerate() {
        let s = s.as_ref();
        ids[r * width..r * width + s.len()].copy_from_slice(s);
        mask[r * width..r * width + s.len()].fill(true);
    }
    Ok(Batch { ids, mask, rows, width })
}
