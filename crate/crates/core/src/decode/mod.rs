//! Frame-synchronous decoding: greedy, beam search with shallow fusion, and
//! streaming inference with cached encoder states.

mod lm;
mod stream;

pub use lm::{BigramLm, LanguageModel};
pub use stream::{stream_decode, StepStats, StreamDecoder, StreamRun};

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransducerModel;
use crate::tensor::{log_add_exp, Tensor};
use crate::transducer::BLANK;

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 10;

fn default_cap() -> usize {
    DEFAULT_MAX_SYMBOLS_PER_FRAME
}

fn default_beam() -> usize {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// Non-blank emissions allowed per frame before a blank is forced.
    #[serde(default = "default_cap")]
    pub max_symbols_per_frame: usize,
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default)]
    pub lm_weight: f64,
    #[serde(default)]
    pub length_bonus: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME,
            beam_width: default_beam(),
            lm_weight: 0.0,
            length_bonus: 0.0,
        }
    }
}

/// Shallow fusion: each emitted symbol adds `lm_weight · log P_LM + length_bonus`.
#[derive(Clone, Copy)]
pub struct Fusion<'a> {
    pub lm_weight: f64,
    pub length_bonus: f64,
    pub lm: Option<&'a dyn LanguageModel>,
}

impl Fusion<'_> {
    pub const OFF: Fusion<'static> = Fusion {
        lm_weight: 0.0,
        length_bonus: 0.0,
        lm: None,
    };

    pub fn is_enabled(&self) -> bool {
        self.lm_weight != 0.0 || self.length_bonus != 0.0
    }

    fn bonus(&self, history: &[usize], next: usize) -> Result<f64> {
        let lm = if self.lm_weight != 0.0 {
            let lm = self
                .lm
                .ok_or_else(|| Error::invalid("lm_weight is non-zero but no language model was given"))?;
            self.lm_weight * lm.log_prob(history, next)
        } else {
            0.0
        };
        Ok(lm + self.length_bonus)
    }
}

/// A decoded label sequence and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    /// Ranking score: acoustic plus fusion terms.
    pub score: f64,
    /// Log-probability under the transducer alone.
    pub acoustic: f64,
}

impl Hypothesis {
    fn empty() -> Self {
        Self {
            labels: Vec::new(),
            score: 0.0,
            acoustic: 0.0,
        }
    }
}

/// Projected label-encoder rows keyed by the history suffix that
/// determines them.
pub struct LabelCache<'m> {
    model: &'m TransducerModel,
    map: HashMap<Vec<usize>, Vec<f64>>,
}

const LABEL_CACHE_LIMIT: usize = 4096;

impl<'m> LabelCache<'m> {
    pub fn new(model: &'m TransducerModel) -> Self {
        Self {
            model,
            map: HashMap::new(),
        }
    }

    /// The state reads the last `context + 1` sequence positions; a shorter
    /// key means the start symbol is among them.
    fn key<'h>(&self, history: &'h [usize]) -> &'h [usize] {
        match self.model.config.label_context() {
            Some(c) => &history[history.len().saturating_sub(c + 1)..],
            None => history,
        }
    }

    /// `W_l · label_state(history)`.
    pub fn get(&mut self, history: &[usize]) -> Result<&[f64]> {
        let key = self.key(history);
        if !self.map.contains_key(key) {
            if self.map.len() >= LABEL_CACHE_LIMIT {
                self.map.clear();
            }
            let state = self.model.label_state(key)?;
            let row = Tensor::new([1, state.len()], state)?;
            let proj = self.model.joint.project_label(&self.model.store, &row)?;
            self.map.insert(key.to_vec(), proj.into_data());
        }
        Ok(&self.map[key])
    }
}

/// Joint distribution at one projected audio row and a label history.
fn joint_at(cache: &mut LabelCache<'_>, audio_proj: &[f64], history: &[usize]) -> Result<Vec<f64>> {
    let model = cache.model;
    let label = cache.get(history)?;
    model.joint.log_probs(&model.store, audio_proj, label)
}

/// Audio encoder output projected into the joint space, one row per frame.
pub fn project_audio(model: &TransducerModel, features: &Tensor) -> Result<Tensor> {
    let audio = model.encode_audio(features)?;
    model.joint.project_audio(&model.store, &audio)
}

/// Index of the largest entry, lowest index on ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy emissions for one frame, extending `hyp` in place. Returns the
/// number of symbols emitted.
pub(crate) fn greedy_frame(
    cache: &mut LabelCache<'_>,
    audio_proj: &[f64],
    hyp: &mut Hypothesis,
    cap: usize,
) -> Result<usize> {
    let mut emitted = 0;
    loop {
        let lp = joint_at(cache, audio_proj, &hyp.labels)?;
        let k = if emitted == cap { BLANK } else { argmax(&lp) };
        hyp.acoustic += lp[k];
        hyp.score += lp[k];
        if k == BLANK {
            return Ok(emitted);
        }
        hyp.labels.push(k);
        emitted += 1;
    }
}

pub fn greedy_decode(model: &TransducerModel, features: &Tensor, max_symbols_per_frame: usize) -> Result<Hypothesis> {
    let audio = project_audio(model, features)?;
    let mut cache = LabelCache::new(model);
    let mut hyp = Hypothesis::empty();
    for t in 0..audio.rows() {
        greedy_frame(&mut cache, audio.row(t), &mut hyp, max_symbols_per_frame)?;
    }
    Ok(hyp)
}

fn by_rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.labels.cmp(&b.labels))
}

struct Candidate {
    parent: usize,
    symbol: usize,
    score: f64,
    acoustic: f64,
}

/// Frame-synchronous beam search. Within a frame, the live hypotheses are
/// expanded by one symbol at a time and the best `beam_width` extensions
/// survive; blank extensions end the frame. Hypotheses ending the frame with
/// the same labels are merged by adding their probabilities. Returns up to
/// `beam_width` hypotheses, best first, ordered by score then labels.
pub fn beam_decode(
    model: &TransducerModel,
    features: &Tensor,
    beam_width: usize,
    max_symbols_per_frame: usize,
    fusion: Fusion<'_>,
) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let audio = project_audio(model, features)?;
    let mut cache = LabelCache::new(model);
    let mut beam = vec![Hypothesis::empty()];
    for t in 0..audio.rows() {
        let mut finished: Vec<Hypothesis> = Vec::new();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut live = beam;
        for depth in 0..=max_symbols_per_frame {
            let mut cands = Vec::new();
            for (i, h) in live.iter().enumerate() {
                let lp = joint_at(&mut cache, audio.row(t), &h.labels)?;
                cands.push(Candidate {
                    parent: i,
                    symbol: BLANK,
                    score: h.score + lp[BLANK],
                    acoustic: h.acoustic + lp[BLANK],
                });
                if depth < max_symbols_per_frame {
                    for (k, &l) in lp.iter().enumerate().skip(1) {
                        cands.push(Candidate {
                            parent: i,
                            symbol: k,
                            score: h.score + l + fusion.bonus(&h.labels, k)?,
                            acoustic: h.acoustic + l,
                        });
                    }
                }
            }
            // Stable sort keeps parents in rank order and symbols ascending
            // among equal scores.
            cands.sort_by(|a, b| b.score.total_cmp(&a.score));
            cands.truncate(beam_width);
            let mut next = Vec::new();
            for c in cands {
                let parent = &live[c.parent];
                if c.symbol == BLANK {
                    match index.get(&parent.labels) {
                        Some(&j) => {
                            let m = &mut finished[j];
                            m.score = log_add_exp(m.score, c.score);
                            m.acoustic = log_add_exp(m.acoustic, c.acoustic);
                        }
                        None => {
                            index.insert(parent.labels.clone(), finished.len());
                            finished.push(Hypothesis {
                                labels: parent.labels.clone(),
                                score: c.score,
                                acoustic: c.acoustic,
                            });
                        }
                    }
                } else {
                    let mut labels = parent.labels.clone();
                    labels.push(c.symbol);
                    next.push(Hypothesis {
                        labels,
                        score: c.score,
                        acoustic: c.acoustic,
                    });
                }
            }
            if next.is_empty() {
                break;
            }
            live = next;
        }
        finished.sort_by(by_rank);
        finished.truncate(beam_width);
        beam = finished;
    }
    Ok(beam)
}

/// Search procedure used by [`transcribe`].
#[derive(Clone, Copy)]
pub enum Strategy<'a> {
    Greedy,
    Beam { width: usize, fusion: Fusion<'a> },
    Stream,
}

/// Best label sequence for one utterance.
pub fn transcribe(
    model: &TransducerModel,
    features: &Tensor,
    strategy: Strategy<'_>,
    max_symbols_per_frame: usize,
) -> Result<Vec<usize>> {
    Ok(match strategy {
        Strategy::Greedy => greedy_decode(model, features, max_symbols_per_frame)?.labels,
        Strategy::Beam { width, fusion } => beam_decode(model, features, width, max_symbols_per_frame, fusion)?
            .swap_remove(0)
            .labels,
        Strategy::Stream => stream_decode(model, features, max_symbols_per_frame)?.hypothesis.labels,
    })
}
