use crate::crl::CrlInput;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::panet::ConversationInput;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttachmentKind {
    /// Common representations, appended to the classifier input.
    H,
    /// Classifier states, an extra always-observed modality for the learner.
    B,
}

/// A dataset with one attached vector per utterance.
#[derive(Clone, Debug)]
pub struct AugmentedDataset<'a> {
    pub base: &'a Dataset,
    pub kind: AttachmentKind,
    /// One `[T, D]` table per conversation.
    pub table: Vec<Tensor>,
}

/// Checks that `table` covers every utterance of `dataset` exactly once.
pub fn extend_with(dataset: &Dataset, table: Vec<Tensor>, kind: AttachmentKind) -> Result<AugmentedDataset<'_>> {
    if table.len() != dataset.conversations.len() {
        return Err(Error::Data(format!(
            "{} attachment tables for {} conversations",
            table.len(),
            dataset.conversations.len()
        )));
    }
    let width = table.first().map_or(0, Tensor::cols);
    for (conv, t) in dataset.conversations.iter().zip(&table) {
        if t.rows() != conv.len() || t.cols() != width {
            return Err(Error::Data(format!(
                "attachment for {} is {:?}, expected [{}, {width}]",
                conv.id,
                t.shape(),
                conv.len()
            )));
        }
    }
    Ok(AugmentedDataset {
        base: dataset,
        kind,
        table,
    })
}

impl AugmentedDataset<'_> {
    pub fn width(&self) -> usize {
        self.table.first().map_or(0, Tensor::cols)
    }

    /// Classifier inputs `u_t ++ h_t`.
    pub fn panet_inputs(&self) -> Result<Vec<ConversationInput>> {
        if self.kind != AttachmentKind::H {
            return Err(Error::Model("only h attachments extend the classifier input".into()));
        }
        self.base
            .conversations
            .iter()
            .zip(&self.table)
            .map(|(c, t)| ConversationInput::build(c, &self.base.dims, Some(t)))
            .collect()
    }

    /// Learner inputs with `b` as the fourth modality.
    pub fn crl_inputs(&self) -> Result<Vec<CrlInput>> {
        if self.kind != AttachmentKind::B {
            return Err(Error::Model("only b attachments add a modality".into()));
        }
        self.base
            .conversations
            .iter()
            .zip(&self.table)
            .map(|(c, t)| CrlInput::build(c, &self.base.dims, Some(t)))
            .collect()
    }
}

/// Classifier inputs with no attachment.
pub(crate) fn plain_inputs(dataset: &Dataset) -> Result<Vec<ConversationInput>> {
    dataset
        .conversations
        .iter()
        .map(|c| ConversationInput::build(c, &dataset.dims, None))
        .collect()
}

pub(crate) fn zero_tables(dataset: &Dataset, width: usize) -> Vec<Tensor> {
    dataset
        .conversations
        .iter()
        .map(|c| Tensor::zeros(&[c.len(), width]))
        .collect()
}
