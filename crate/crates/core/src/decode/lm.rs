use crate::error::{Error, Result};
use crate::transducer::{check_labels, BLANK};

/// External scorer for shallow fusion. Must be pure and return finite values.
pub trait LanguageModel {
    /// `log P(next | history)` for a non-blank `next`.
    fn log_prob(&self, history: &[usize], next: usize) -> f64;
}

/// Add-k smoothed bigram model over non-blank symbols. The blank id stands
/// for the sentence start.
#[derive(Clone, Debug, PartialEq)]
pub struct BigramLm {
    vocab_size: usize,
    /// `[prev × next]` log-probabilities; column 0 unused.
    table: Vec<f64>,
}

impl BigramLm {
    pub fn estimate(sequences: &[Vec<usize>], vocab_size: usize, add_k: f64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::invalid("bigram model needs at least one symbol"));
        }
        if !(add_k > 0.0) {
            return Err(Error::invalid(format!("smoothing constant {add_k} must be positive")));
        }
        let v = vocab_size;
        let mut counts = vec![add_k; v * v];
        for seq in sequences {
            check_labels(seq, v)?;
            let mut prev = BLANK;
            for &s in seq {
                counts[prev * v + s] += 1.0;
                prev = s;
            }
        }
        let mut table = vec![f64::NEG_INFINITY; v * v];
        for prev in 0..v {
            let row = &counts[prev * v + 1..(prev + 1) * v];
            let total: f64 = row.iter().sum();
            for (next, c) in row.iter().enumerate() {
                table[prev * v + next + 1] = (c / total).ln();
            }
        }
        Ok(Self { vocab_size, table })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

impl LanguageModel for BigramLm {
    fn log_prob(&self, history: &[usize], next: usize) -> f64 {
        let prev = history.last().copied().unwrap_or(BLANK);
        self.table[prev * self.vocab_size + next]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_distributions() {
        let lm = BigramLm::estimate(&[vec![1, 2, 1], vec![2, 3]], 4, 0.5).unwrap();
        for prev in 0..4 {
            let s: f64 = (1..4).map(|n| lm.log_prob(&[prev], n).exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // start → 1 seen once, → 2 once, → 3 never: (1.5, 1.5, 0.5) / 3.5
        assert!((lm.log_prob(&[], 3) - (0.5f64 / 3.5).ln()).abs() < 1e-12);
        // 2 → 1 once, 2 → 3 once
        assert!((lm.log_prob(&[2], 1) - (1.5f64 / 3.5).ln()).abs() < 1e-12);
        assert!(BigramLm::estimate(&[vec![0]], 4, 1.0).is_err());
    }
}
