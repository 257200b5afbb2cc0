use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of input modalities (audio, text, visual).
pub const NUM_MODALITIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::Audio, Modality::Text, Modality::Visual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
            Modality::Visual => "visual",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub audio: usize,
    pub text: usize,
    pub visual: usize,
}

impl Dims {
    pub fn uniform(d: usize) -> Self {
        Self {
            audio: d,
            text: d,
            visual: d,
        }
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio,
            Modality::Text => self.text,
            Modality::Visual => self.visual,
        }
    }

    pub fn as_array(&self) -> [usize; NUM_MODALITIES] {
        [self.audio, self.text, self.visual]
    }

    pub fn total(&self) -> usize {
        self.audio + self.text + self.visual
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub turn: usize,
    pub speaker: usize,
    pub label: usize,
    /// Indexed by [`Modality::index`]; `None` marks an absent modality.
    pub features: [Option<Vec<f64>>; NUM_MODALITIES],
}

impl Utterance {
    pub fn feature(&self, m: Modality) -> Option<&[f64]> {
        self.features[m.index()].as_deref()
    }

    pub fn observed(&self) -> [bool; NUM_MODALITIES] {
        [0, 1, 2].map(|i| self.features[i].is_some())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub num_parties: usize,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }

    pub fn mask(&self) -> ModalityMask {
        ModalityMask {
            rows: self.utterances.iter().map(Utterance::observed).collect(),
        }
    }
}

/// Per-turn observation flags: `rows[t][m]` is true iff modality `m` is observed at turn `t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub rows: Vec<[bool; NUM_MODALITIES]>,
}

impl ModalityMask {
    pub fn all_observed(turns: usize) -> Self {
        Self {
            rows: vec![[true; NUM_MODALITIES]; turns],
        }
    }

    pub fn turns(&self) -> usize {
        self.rows.len()
    }

    pub fn absent_slots(&self) -> usize {
        self.rows.iter().flatten().filter(|&&s| !s).count()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.rows.iter().position(|r| r.iter().all(|&s| !s)) {
            return Err(Error::Mask(format!("turn {t} has no observed modality")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub classes: Vec<String>,
    pub conversations: Vec<Conversation>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total_turns(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn max_parties(&self) -> usize {
        self.conversations.iter().map(|c| c.num_parties).max().unwrap_or(0)
    }

    pub fn masks(&self) -> Vec<ModalityMask> {
        self.conversations.iter().map(Conversation::mask).collect()
    }

    /// Fraction of absent (turn, modality) slots.
    pub fn missing_rate(&self) -> f64 {
        missing_rate(&self.masks())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Data("class list is empty".into()));
        }
        let dims = self.dims.as_array();
        if dims.contains(&0) {
            return Err(Error::Data(format!("modality dims must be >= 1, got {dims:?}")));
        }
        for conv in &self.conversations {
            validate_conversation(conv, &dims, self.classes.len())?;
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            dims: self.dims,
            classes: self.classes.clone(),
            conversations: indices.iter().map(|&i| self.conversations[i].clone()).collect(),
        }
    }
}

pub(crate) fn validate_conversation(
    conv: &Conversation,
    dims: &[usize; NUM_MODALITIES],
    num_classes: usize,
) -> Result<()> {
    let id = &conv.id;
    if conv.num_parties == 0 {
        return Err(Error::Data(format!("conversation {id}: num_parties must be >= 1")));
    }
    if conv.utterances.is_empty() {
        return Err(Error::Data(format!("conversation {id}: no utterances")));
    }
    for (t, u) in conv.utterances.iter().enumerate() {
        if u.turn != t {
            return Err(Error::Data(format!(
                "conversation {id}: turn index {} at position {t}",
                u.turn
            )));
        }
        if u.speaker >= conv.num_parties {
            return Err(Error::Data(format!(
                "conversation {id} turn {t}: speaker {} >= num_parties {}",
                u.speaker, conv.num_parties
            )));
        }
        if u.label >= num_classes {
            return Err(Error::Data(format!(
                "conversation {id} turn {t}: label {} >= class count {num_classes}",
                u.label
            )));
        }
        if u.features.iter().all(Option::is_none) {
            return Err(Error::Data(format!(
                "conversation {id} turn {t}: every modality is absent"
            )));
        }
        for m in Modality::ALL {
            if let Some(v) = u.feature(m) {
                if v.len() != dims[m.index()] {
                    return Err(Error::Data(format!(
                        "conversation {id} turn {t}: {} has dim {}, expected {}",
                        m.name(),
                        v.len(),
                        dims[m.index()]
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Data(format!(
                        "conversation {id} turn {t}: non-finite {} feature",
                        m.name()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Absent slots over all `T_total * M` slots.
pub fn missing_rate(masks: &[ModalityMask]) -> f64 {
    let turns: usize = masks.iter().map(ModalityMask::turns).sum();
    if turns == 0 {
        return 0.0;
    }
    let absent: usize = masks.iter().map(ModalityMask::absent_slots).sum();
    absent as f64 / (turns * NUM_MODALITIES) as f64
}

/// Drops the feature vectors of every slot the mask marks absent.
pub fn apply_mask(dataset: &Dataset, masks: &[ModalityMask]) -> Result<Dataset> {
    if masks.len() != dataset.conversations.len() {
        return Err(Error::Mask(format!(
            "{} masks for {} conversations",
            masks.len(),
            dataset.conversations.len()
        )));
    }
    let mut out = dataset.clone();
    for (conv, mask) in out.conversations.iter_mut().zip(masks) {
        if mask.turns() != conv.len() {
            return Err(Error::Mask(format!(
                "conversation {}: mask has {} rows, conversation has {} turns",
                conv.id,
                mask.turns(),
                conv.len()
            )));
        }
        mask.validate()?;
        for (u, row) in conv.utterances.iter_mut().zip(&mask.rows) {
            for m in 0..NUM_MODALITIES {
                if !row[m] {
                    u.features[m] = None;
                } else if u.features[m].is_none() {
                    return Err(Error::Mask(format!(
                        "conversation {} turn {}: mask observes an absent modality",
                        conv.id, u.turn
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Conversation-level split: roughly `ratio` of the conversations go to the first part.
pub fn split_dataset(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = dataset.conversations.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} conversation(s)")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut first = order[..k].to_vec();
    let mut second = order[k..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((dataset.subset(&first), dataset.subset(&second)))
}
