use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::model::{Dataset, ModalityMask, NUM_MODALITIES};
use crate::error::{Error, Result};

/// Largest missing rate that still leaves one modality per turn.
pub const MAX_MISSING_RATE: f64 = (NUM_MODALITIES - 1) as f64 / NUM_MODALITIES as f64;

/// Draws a mask with `round(eta * T_total * M)` absent slots.
///
/// Slots are visited in a seeded uniformly random order and dropped while
/// their turn still keeps another observed modality, so each drop is uniform
/// over the currently eligible slots. Slots that are already absent in the
/// dataset count towards the target. For a fixed seed and dataset the masks
/// are nested in `eta`.
pub fn generate_mask(dataset: &Dataset, eta: f64, seed: u64) -> Result<Vec<ModalityMask>> {
    if !(0.0..=MAX_MISSING_RATE + 1e-12).contains(&eta) {
        return Err(Error::Mask(format!(
            "target missing rate {eta} outside [0, {MAX_MISSING_RATE:.6}]"
        )));
    }
    let mut masks = dataset.masks();
    let turns: usize = masks.iter().map(ModalityMask::turns).sum();
    let total = turns * NUM_MODALITIES;
    let target = ((eta * total as f64).round() as usize).min(turns * (NUM_MODALITIES - 1));
    let mut absent: usize = masks.iter().map(ModalityMask::absent_slots).sum();
    if absent > target {
        return Err(Error::Mask(format!(
            "dataset already has {absent} absent slots, more than the target {target}"
        )));
    }

    let mut slots: Vec<(usize, usize, usize)> = Vec::with_capacity(total);
    for (c, mask) in masks.iter().enumerate() {
        for t in 0..mask.turns() {
            for m in 0..NUM_MODALITIES {
                slots.push((c, t, m));
            }
        }
    }
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    for (c, t, m) in slots {
        if absent == target {
            break;
        }
        let row = &mut masks[c].rows[t];
        let observed = row.iter().filter(|&&s| s).count();
        if row[m] && observed >= 2 {
            row[m] = false;
            absent += 1;
        }
    }
    debug_assert_eq!(absent, target);
    Ok(masks)
}
