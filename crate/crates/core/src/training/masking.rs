use log::warn;
use rand::Rng;

use crate::data::{TokenBatch, MASK, RESERVED};
use crate::error::{Error, Result};

/// What replaces a selected token in the model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random(usize),
    Keep,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskedSentence {
    /// 0-based positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`, the prediction targets.
    pub targets: Vec<usize>,
    pub actions: Vec<MaskAction>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    /// One entry per batch row; empty rows get an empty entry.
    pub sentences: Vec<MaskedSentence>,
    pub skipped_empty: usize,
}

impl MaskingPlan {
    pub fn num_masked(&self) -> usize {
        self.sentences.iter().map(|s| s.positions.len()).sum()
    }

    /// Copy of `batch` with the plan's replacements applied.
    pub fn apply(&self, batch: &TokenBatch) -> TokenBatch {
        let mut out = batch.clone();
        for (row, plan) in out.ids.iter_mut().zip(&self.sentences) {
            for (&p, &a) in plan.positions.iter().zip(&plan.actions) {
                match a {
                    MaskAction::Mask => row[p] = MASK,
                    MaskAction::Random(id) => row[p] = id,
                    MaskAction::Keep => {}
                }
            }
        }
        out
    }
}

/// Number of positions to select in a sentence of `n` tokens: `rate·n`
/// stochastically rounded, never below one.
fn mask_count<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> usize {
    let count = (rate * n as f64 + rng.gen::<f64>()).floor() as usize;
    count.clamp(1, n)
}

/// Selects positions per sentence and assigns 80/10/10 mask/random/keep actions.
/// With `force_mask`, every selected position becomes the mask token.
pub fn mask_batch<R: Rng + ?Sized>(
    batch: &TokenBatch,
    vocab_size: usize,
    rate: f64,
    force_mask: bool,
    rng: &mut R,
) -> Result<MaskingPlan> {
    if vocab_size <= MASK {
        return Err(Error::Config(format!(
            "vocabulary of size {vocab_size} has no mask token"
        )));
    }
    let first_word = RESERVED.len();
    let mut skipped_empty = 0;
    let mut sentences = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let row = batch.row(b);
        let n = row.len();
        if n == 0 {
            warn!("empty sentence in batch row {b}; nothing masked");
            skipped_empty += 1;
            sentences.push(MaskedSentence::default());
            continue;
        }
        let count = mask_count(n, rate, rng);
        let mut positions = rand::seq::index::sample(rng, n, count).into_vec();
        positions.sort_unstable();
        let actions = positions
            .iter()
            .map(|_| {
                if force_mask {
                    return MaskAction::Mask;
                }
                let u: f64 = rng.gen();
                if u < 0.8 {
                    MaskAction::Mask
                } else if u < 0.9 && vocab_size > first_word {
                    MaskAction::Random(rng.gen_range(first_word..vocab_size))
                } else {
                    MaskAction::Keep
                }
            })
            .collect();
        sentences.push(MaskedSentence {
            targets: positions.iter().map(|&p| row[p]).collect(),
            positions,
            actions,
        });
    }
    Ok(MaskingPlan {
        sentences,
        skipped_empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(lengths: &[usize]) -> TokenBatch {
        let seqs = lengths.iter().map(|&n| (0..n).map(|i| 3 + i % 20).collect()).collect();
        TokenBatch::from_sequences(seqs, (0..lengths.len()).collect()).unwrap()
    }

    #[test]
    fn deterministic_given_seed() {
        let b = batch(&[5, 9, 12]);
        let a = mask_batch(&b, 30, 0.15, false, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = mask_batch(&b, 30, 0.15, false, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn single_token_sentence_masks_once() {
        let b = batch(&[1]);
        for seed in 0..20 {
            let p = mask_batch(&b, 30, 0.15, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(p.sentences[0].positions, vec![0]);
        }
    }

    #[test]
    fn forced_mask_and_apply() {
        let b = batch(&[6, 4]);
        let p = mask_batch(&b, 30, 0.5, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let masked = p.apply(&b);
        for (r, s) in p.sentences.iter().enumerate() {
            assert!(s.actions.iter().all(|&a| a == MaskAction::Mask));
            for (&pos, &t) in s.positions.iter().zip(&s.targets) {
                assert_eq!(masked.ids[r][pos], MASK);
                assert_eq!(b.ids[r][pos], t);
            }
        }
        assert_eq!(masked.lengths, b.lengths);
    }

    #[test]
    fn rejects_vocab_without_mask() {
        let b = batch(&[2]);
        assert!(matches!(
            mask_batch(&b, 2, 0.15, false, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn action_mix_is_roughly_80_10_10() {
        let b = batch(&[40; 50]);
        let p = mask_batch(&b, 30, 0.5, false, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let all: Vec<MaskAction> = p.sentences.iter().flat_map(|s| s.actions.clone()).collect();
        let frac = |f: fn(&MaskAction) -> bool| all.iter().filter(|a| f(a)).count() as f64 / all.len() as f64;
        assert!((frac(|a| *a == MaskAction::Mask) - 0.8).abs() < 0.03);
        assert!((frac(|a| matches!(a, MaskAction::Random(_))) - 0.1).abs() < 0.03);
        assert!((frac(|a| *a == MaskAction::Keep) - 0.1).abs() < 0.03);
    }
}
