use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::AttentionWindow;

/// How far attention reaches on one side of the current position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ContextRepr", into = "ContextRepr")]
pub enum Context {
    Limited(usize),
    Unlimited,
}

impl Context {
    pub fn limit(self) -> Option<usize> {
        match self {
            Context::Limited(n) => Some(n),
            Context::Unlimited => None,
        }
    }

    pub fn is_limited(self) -> bool {
        matches!(self, Context::Limited(_))
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Context::Limited(n) => write!(f, "{n}"),
            Context::Unlimited => f.write_str("unlimited"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ContextRepr {
    Frames(u64),
    Word(String),
}

impl TryFrom<ContextRepr> for Context {
    type Error = String;

    fn try_from(r: ContextRepr) -> Result<Self, String> {
        match r {
            ContextRepr::Frames(n) => Ok(Context::Limited(n as usize)),
            ContextRepr::Word(w) if w == "unlimited" => Ok(Context::Unlimited),
            ContextRepr::Word(w) => Err(format!(
                "expected a non-negative integer or \"unlimited\", found \"{w}\""
            )),
        }
    }
}

impl From<Context> for ContextRepr {
    fn from(c: Context) -> Self {
        match c {
            Context::Limited(n) => ContextRepr::Frames(n as u64),
            Context::Unlimited => ContextRepr::Word("unlimited".into()),
        }
    }
}

/// Left/right attention window shared by every layer of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionMask {
    pub left: Context,
    pub right: Context,
}

impl AttentionMask {
    pub const FULL: AttentionMask = AttentionMask {
        left: Context::Unlimited,
        right: Context::Unlimited,
    };

    pub fn new(left: usize, right: usize) -> Self {
        Self {
            left: Context::Limited(left),
            right: Context::Limited(right),
        }
    }

    /// Causal mask with `left` frames of history.
    pub fn causal(left: usize) -> Self {
        Self::new(left, 0)
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        let left_ok = self.left.limit().is_none_or(|l| j + l >= i);
        let right_ok = self.right.limit().is_none_or(|r| j <= i + r);
        left_ok && right_ok
    }

    pub fn window(&self, query_offset: usize) -> AttentionWindow {
        AttentionWindow {
            query_offset,
            left: self.left.limit(),
            right: self.right.limit(),
        }
    }

    /// Offsets beyond which relative positions are indistinguishable, when
    /// both sides are bounded.
    pub fn span(&self) -> Option<usize> {
        Some(self.left.limit()? + self.right.limit()?)
    }
}

/// `mask[i][j]` is true iff position `i` may attend position `j`.
pub fn build_mask(seq_len: usize, mask: AttentionMask) -> Vec<Vec<bool>> {
    (0..seq_len)
        .map(|i| (0..seq_len).map(|j| mask.allows(i, j)).collect())
        .collect()
}

/// Positions reachable through a stack, and the look-ahead delay it implies.
/// `None` marks an unbounded side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceptiveField {
    pub past_frames: Option<usize>,
    pub future_frames: Option<usize>,
    pub future_latency_ms: Option<f64>,
}

/// Each layer widens the field by the mask on each side, so right context
/// delays the output by `num_layers · right` frames.
pub fn receptive_field(num_layers: usize, mask: AttentionMask, frame_ms: f64) -> ReceptiveField {
    let past_frames = mask.left.limit().map(|l| l * num_layers);
    let future_frames = mask.right.limit().map(|r| r * num_layers);
    ReceptiveField {
        past_frames,
        future_frames,
        future_latency_ms: future_frames.map(|f| f as f64 * frame_ms),
    }
}
