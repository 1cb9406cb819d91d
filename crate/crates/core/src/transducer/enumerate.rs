//! Explicit alignment enumeration, the small-instance reference for the
//! forward recursion.

use super::{check_instance, LogProbGrid, BLANK};
use crate::error::{Error, Result};
use crate::tensor::logsumexp_slice;

/// Largest `T + U` accepted by enumeration.
pub const MAX_ENUMERATION: usize = 14;

/// One path through the lattice: `(symbol, frame)` pairs with 0-based frames.
/// Blanks advance the frame, labels advance the label position, and the path
/// ends with the blank that consumes the last frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub steps: Vec<(usize, usize)>,
}

impl Alignment {
    /// The label sequence with blanks removed.
    pub fn labels(&self) -> Vec<usize> {
        self.steps.iter().map(|&(s, _)| s).filter(|&s| s != BLANK).collect()
    }

    /// Sum of the local log-probabilities along the path.
    pub fn log_prob(&self, grid: &LogProbGrid) -> f64 {
        let mut u = 0;
        let mut total = 0.0;
        for &(s, t) in &self.steps {
            total += grid.get(t, u, s);
            if s != BLANK {
                u += 1;
            }
        }
        total
    }
}

/// Every alignment of `y` over `frames` frames.
pub fn enumerate_alignments(frames: usize, y: &[usize]) -> Result<Vec<Alignment>> {
    if frames + y.len() > MAX_ENUMERATION {
        return Err(Error::TooLarge(frames + y.len(), MAX_ENUMERATION));
    }
    let mut out = Vec::new();
    if frames == 0 {
        return Ok(out);
    }
    let mut steps = Vec::with_capacity(frames + y.len());
    extend(frames, y, 0, 0, &mut steps, &mut out);
    Ok(out)
}

fn extend(frames: usize, y: &[usize], t: usize, u: usize, steps: &mut Vec<(usize, usize)>, out: &mut Vec<Alignment>) {
    if u < y.len() {
        steps.push((y[u], t));
        extend(frames, y, t, u + 1, steps, out);
        steps.pop();
    }
    if t + 1 < frames {
        steps.push((BLANK, t));
        extend(frames, y, t + 1, u, steps, out);
        steps.pop();
    } else if u == y.len() {
        steps.push((BLANK, t));
        out.push(Alignment { steps: steps.clone() });
        steps.pop();
    }
}

/// `log P(y | x)` by summing every alignment's probability.
pub fn brute_force_log_prob(grid: &LogProbGrid, y: &[usize]) -> Result<f64> {
    check_instance(grid, y)?;
    let paths = enumerate_alignments(grid.frames(), y)?;
    let logs: Vec<f64> = paths.iter().map(|a| a.log_prob(grid)).collect();
    Ok(logsumexp_slice(&logs))
}
