//! Span masking for characters and contiguous frame masking for speech.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_TEXT_SPAN: usize = 20;
pub const DEFAULT_TEXT_RATIO: f64 = 0.15;
pub const DEFAULT_SPEECH_START_PROB: f64 = 0.065;
pub const DEFAULT_SPEECH_SPAN: usize = 10;

/// What the model substitutes at a masked position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    /// Text: the `MASK` token id.
    MaskToken,
    /// Speech: the learned mask embedding.
    MaskEmbedding,
}

/// Sorted, unique masked positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    positions: Vec<usize>,
    replacement: Replacement,
}

impl MaskPlan {
    pub fn empty(replacement: Replacement) -> Self {
        Self {
            positions: Vec::new(),
            replacement,
        }
    }

    pub fn from_positions(mut positions: Vec<usize>, replacement: Replacement) -> Self {
        positions.sort_unstable();
        positions.dedup();
        Self {
            positions,
            replacement,
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn replacement(&self) -> Replacement {
        self.replacement
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.positions.binary_search(&i).is_ok()
    }

    /// Indicator vector of length `len`.
    pub fn indicator(&self, len: usize) -> Vec<bool> {
        let mut v = vec![false; len];
        for &p in &self.positions {
            if p < len {
                v[p] = true;
            }
        }
        v
    }

    /// Re-indexes a plan computed over the valid positions onto the
    /// padded sequence described by `valid`.
    fn onto(self, valid: &[bool]) -> Self {
        let idx: Vec<usize> = valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        Self {
            positions: self.positions.into_iter().map(|p| idx[p]).collect(),
            replacement: self.replacement,
        }
    }
}

/// `max(1, round(ratio·len/span_len))` non-overlapping spans of
/// `min(span_len, len)` positions, placed uniformly.
pub fn mask_text_spans<R: Rng>(len: usize, span_len: usize, ratio: f64, rng: &mut R) -> MaskPlan {
    if len == 0 {
        return MaskPlan::empty(Replacement::MaskToken);
    }
    let span = span_len.clamp(1, len);
    let wanted = ((ratio * len as f64 / span_len.max(1) as f64).round() as usize).max(1);
    let n = wanted.min(len / span);
    let free = len - n * span;
    // Choosing n of (free + n) slots places n spans among `free` unmasked
    // positions, uniformly over all non-overlapping arrangements.
    let mut slots = sample(rng, free + n, n).into_vec();
    slots.sort_unstable();
    let mut positions = Vec::with_capacity(n * span);
    for (i, s) in slots.into_iter().enumerate() {
        let start = s - i + i * span;
        positions.extend(start..start + span);
    }
    MaskPlan::from_positions(positions, Replacement::MaskToken)
}

pub fn mask_text_spans_seeded(len: usize, span_len: usize, ratio: f64, seed: u64) -> MaskPlan {
    mask_text_spans(len, span_len, ratio, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Span masking restricted to positions where `valid` is true.
pub fn mask_text_spans_padded<R: Rng>(valid: &[bool], span_len: usize, ratio: f64, rng: &mut R) -> MaskPlan {
    let n = valid.iter().filter(|&&v| v).count();
    mask_text_spans(n, span_len, ratio, rng).onto(valid)
}

/// Every frame starts a span with probability `start_prob`; each span
/// covers `span_len` frames, clipped at the end; overlaps merge.
pub fn mask_speech_frames<R: Rng>(len: usize, start_prob: f64, span_len: usize, rng: &mut R) -> MaskPlan {
    let mut hit = vec![false; len];
    for i in 0..len {
        if rng.gen::<f64>() < start_prob {
            for h in hit.iter_mut().skip(i).take(span_len) {
                *h = true;
            }
        }
    }
    MaskPlan {
        positions: (0..len).filter(|&i| hit[i]).collect(),
        replacement: Replacement::MaskEmbedding,
    }
}

pub fn mask_speech_frames_seeded(len: usize, start_prob: f64, span_len: usize, seed: u64) -> MaskPlan {
    mask_speech_frames(len, start_prob, span_len, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn mask_speech_frames_padded<R: Rng>(valid: &[bool], start_prob: f64, span_len: usize, rng: &mut R) -> MaskPlan {
    let n = valid.iter().filter(|&&v| v).count();
    mask_speech_frames(n, start_prob, span_len, rng).onto(valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spans(plan: &MaskPlan) -> usize {
        let p = plan.positions();
        if p.is_empty() {
            return 0;
        }
        1 + p.windows(2).filter(|w| w[1] != w[0] + 1).count()
    }

    #[test]
    fn span_count_rule() {
        let p = mask_text_spans_seeded(400, 20, 0.15, 1);
        assert_eq!(p.len(), 60);
        let p = mask_text_spans_seeded(100, 20, 0.15, 1);
        assert_eq!((p.len(), spans(&p)), (20, 1));
        let p = mask_text_spans_seeded(10, 20, 0.15, 1);
        assert_eq!(p.positions(), &(0..10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn speech_degenerate_cases() {
        assert!(mask_speech_frames_seeded(50, 0.0, 10, 3).is_empty());
        assert_eq!(mask_speech_frames_seeded(50, 1.0, 50, 3).len(), 50);
    }

    /// Expected masked fraction from the per-position coverage formula,
    /// accounting for the shorter start window at the sequence head.
    fn analytic_speech_fraction(len: usize, p: f64, span: usize) -> f64 {
        (0..len)
            .map(|i| 1.0 - (1.0 - p).powi((i + 1).min(span) as i32))
            .sum::<f64>()
            / len as f64
    }

    #[test]
    fn speech_masked_fraction_matches_overlap_formula() {
        let expected = analytic_speech_fraction(1000, 0.065, 10);
        assert!((expected - (1.0 - 0.935f64.powi(10))).abs() < 0.01);
        let mean = (0..200)
            .map(|s| mask_speech_frames_seeded(1000, 0.065, 10, s).len() as f64 / 1000.0)
            .sum::<f64>()
            / 200.0;
        assert!((mean - expected).abs() < 0.03, "{mean} vs {expected}");
        assert!((mean - 0.49).abs() < 0.03);
    }

    #[test]
    fn padding_never_masked() {
        let valid: Vec<bool> = (0..30).map(|i| i < 17).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let p = mask_speech_frames_padded(&valid, 0.3, 4, &mut rng);
            assert!(p.positions().iter().all(|&i| i < 17));
            let p = mask_text_spans_padded(&valid, 3, 0.3, &mut rng);
            assert!(!p.is_empty() && p.positions().iter().all(|&i| i < 17));
        }
    }

    proptest! {
        #[test]
        fn text_plan_properties(len in 1usize..300, span in 1usize..25, ratio in 0.01f64..0.99, seed in 0u64..1000) {
            let p = mask_text_spans_seeded(len, span, ratio, seed);
            prop_assert_eq!(&p, &mask_text_spans_seeded(len, span, ratio, seed));
            prop_assert!(p.positions().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.positions().iter().all(|&i| i < len));
            let s = span.min(len);
            prop_assert_eq!(p.len() % s, 0);
            let n = p.len() / s;
            let wanted = ((ratio * len as f64 / span as f64).round() as usize).max(1);
            prop_assert_eq!(n, wanted.min(len / s));
            // fraction within one span of the nominal count
            let nominal = (wanted * s) as f64 / len as f64;
            prop_assert!((p.len() as f64 / len as f64 - nominal).abs() <= s as f64 / len as f64 * wanted as f64);
        }

        #[test]
        fn speech_plan_deterministic(len in 1usize..200, prob in 0.0f64..1.0, span in 1usize..12, seed in 0u64..100) {
            let p = mask_speech_frames_seeded(len, prob, span, seed);
            prop_assert_eq!(&p, &mask_speech_frames_seeded(len, prob, span, seed));
            prop_assert!(p.positions().iter().all(|&i| i < len));
        }
    }
}
