use super::vocab::{CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID};
use crate::model::TokenBatch;
use crate::rng::{stream, Rng};
use rand::Rng as _;

/// Probability that an eligible position becomes a prediction target.
pub const MLM_SELECT_RATE: f64 = 0.15;

/// A masked position and the id it originally held.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlmTarget {
    pub row: usize,
    pub position: usize,
    pub original: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub batch: TokenBatch,
    pub targets: Vec<MlmTarget>,
}

fn maskable(id: u32) -> bool {
    !matches!(id, PAD_ID | CLS_ID | SEP_ID | MASK_ID)
}

/// BERT-style dynamic masking: every maskable position is selected with
/// probability 0.15; a selected position becomes `[MASK]` 80% of the time,
/// a random non-special token 10% and stays unchanged 10%.
pub fn mask_with_rng(batch: &TokenBatch, vocab_size: usize, rng: &mut Rng) -> MaskedBatch {
    let mut ids = batch.ids.clone();
    let mut targets = Vec::new();
    let random_pool = (vocab_size as u32).saturating_sub(NUM_SPECIAL);
    for (k, id) in ids.iter_mut().enumerate() {
        if !maskable(*id) || rng.random::<f64>() >= MLM_SELECT_RATE {
            continue;
        }
        targets.push(MlmTarget {
            row: k / batch.seq,
            position: k % batch.seq,
            original: *id,
        });
        let action: f64 = rng.random();
        if action < 0.8 {
            *id = MASK_ID;
        } else if action < 0.9 && random_pool > 0 {
            *id = NUM_SPECIAL + rng.random_range(0..random_pool);
        }
    }
    MaskedBatch {
        batch: TokenBatch {
            ids,
            batch: batch.batch,
            seq: batch.seq,
        },
        targets,
    }
}

pub fn mask_for_mlm(batch: &TokenBatch, vocab_size: usize, seed: u64) -> MaskedBatch {
    mask_with_rng(batch, vocab_size, &mut stream(seed, "mlm-mask"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: usize, len: usize) -> TokenBatch {
        let seqs: Vec<Vec<u32>> = (0..rows)
            .map(|r| {
                let mut s = vec![CLS_ID];
                s.extend((0..len - 2 - (r % 3)).map(|i| NUM_SPECIAL + ((r * 7 + i) % 50) as u32));
                s.push(SEP_ID);
                s
            })
            .collect();
        TokenBatch::pad(&seqs).unwrap()
    }

    #[test]
    fn specials_never_selected_and_shape_kept() {
        let b = batch(64, 20);
        let m = mask_for_mlm(&b, 60, 11);
        assert_eq!(m.batch.ids.len(), b.ids.len());
        for t in &m.targets {
            let orig = b.ids[t.row * b.seq + t.position];
            assert!(maskable(orig));
            assert_eq!(orig, t.original);
        }
        for (a, z) in b.ids.iter().zip(&m.batch.ids) {
            if matches!(*a, PAD_ID | CLS_ID | SEP_ID) {
                assert_eq!(a, z);
            }
        }
    }

    #[test]
    fn selection_rate_near_expectation() {
        // 100k maskable positions; the binomial std is ~0.0011, so ±0.005
        // is more than four standard deviations.
        let seqs: Vec<Vec<u32>> = (0..1000)
            .map(|r| {
                let mut s = vec![CLS_ID];
                s.extend((0..100).map(|i| NUM_SPECIAL + ((r + i) % 40) as u32));
                s.push(SEP_ID);
                s
            })
            .collect();
        let b = TokenBatch::pad(&seqs).unwrap();
        let m = mask_for_mlm(&b, 45, 5);
        let rate = m.targets.len() as f64 / 100_000.0;
        assert!((rate - 0.15).abs() <= 0.005, "rate {rate}");
        let masked = m
            .targets
            .iter()
            .filter(|t| m.batch.ids[t.row * b.seq + t.position] == MASK_ID)
            .count() as f64
            / m.targets.len() as f64;
        assert!((masked - 0.8).abs() < 0.02, "mask share {masked}");
    }

    #[test]
    fn tiny_batch_may_have_no_targets() {
        let b = TokenBatch::pad(&[vec![CLS_ID, SEP_ID]]).unwrap();
        assert!(mask_for_mlm(&b, 10, 1).targets.is_empty());
    }

    #[test]
    fn deterministic_under_seed() {
        let b = batch(8, 12);
        assert_eq!(mask_for_mlm(&b, 60, 3), mask_for_mlm(&b, 60, 3));
    }
}
