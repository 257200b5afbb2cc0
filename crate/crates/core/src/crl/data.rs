use crate::dataio::{Conversation, Dims, Modality};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One modality of one conversation: `[T, D_m]` values (zeros where absent)
/// and the per-turn observation flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBlock {
    pub values: Tensor,
    pub observed: Vec<bool>,
}

impl ModalityBlock {
    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn observed_rows(&self) -> Vec<usize> {
        (0..self.observed.len()).filter(|&t| self.observed[t]).collect()
    }

    pub fn missing_rows(&self) -> Vec<usize> {
        (0..self.observed.len()).filter(|&t| !self.observed[t]).collect()
    }

    /// 1 on observed rows, 0 elsewhere, broadcast to `[T, D_m]`.
    pub fn mask_matrix(&self) -> Tensor {
        let d = self.dim();
        let data = self
            .observed
            .iter()
            .flat_map(|&o| std::iter::repeat_n(if o { 1.0 } else { 0.0 }, d))
            .collect();
        Tensor::new(vec![self.observed.len(), d], data).expect("mask matches values")
    }
}

/// Label-free view of one conversation for common-representation learning.
#[derive(Clone, Debug, PartialEq)]
pub struct CrlInput {
    pub id: String,
    pub blocks: Vec<ModalityBlock>,
}

impl CrlInput {
    /// Audio, text and visual blocks, plus an always-observed block from
    /// `extra` (one row per turn) when given.
    pub fn build(conv: &Conversation, dims: &Dims, extra: Option<&Tensor>) -> Result<Self> {
        let turns = conv.len();
        let mut blocks = Vec::with_capacity(4);
        for m in Modality::ALL {
            let d = dims.get(m);
            let mut data = Vec::with_capacity(turns * d);
            let mut observed = Vec::with_capacity(turns);
            for u in &conv.utterances {
                match u.feature(m) {
                    Some(v) if v.len() == d => {
                        data.extend_from_slice(v);
                        observed.push(true);
                    }
                    Some(v) => return Err(Error::shape("modality", &[d], &[v.len()])),
                    None => {
                        data.extend(std::iter::repeat_n(0.0, d));
                        observed.push(false);
                    }
                }
            }
            blocks.push(ModalityBlock {
                values: Tensor::new(vec![turns, d], data)?,
                observed,
            });
        }
        if let Some(e) = extra {
            if e.rows() != turns {
                return Err(Error::Data(format!(
                    "extra table for {} has {} rows, conversation has {turns} turns",
                    conv.id,
                    e.rows()
                )));
            }
            blocks.push(ModalityBlock {
                values: e.clone(),
                observed: vec![true; turns],
            });
        }
        Ok(Self {
            id: conv.id.clone(),
            blocks,
        })
    }

    pub fn turns(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.observed.len())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(ModalityBlock::dim).collect()
    }

    /// Drops every block past the first `n` (used to hide the extra modality).
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            id: self.id.clone(),
            blocks: self.blocks.iter().take(n).cloned().collect(),
        }
    }
}
