use std::collections::VecDeque;

use super::{greedy_frame, Hypothesis, LabelCache};
use crate::attention::{encoder_layer, final_norm, input_projection, score_evaluations, LayerContext};
use crate::error::{Error, Result};
use crate::model::TransducerModel;
use crate::params::Bound;
use crate::tensor::{Graph, Tensor};
use crate::transducer::joint_evaluations;

/// Work done by one call to [`StreamDecoder::push`] or [`StreamDecoder::flush`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    /// Encoder positions that reached the joint network.
    pub frames_emitted: usize,
    pub audio_score_evaluations: u64,
    pub label_score_evaluations: u64,
    pub joint_evaluations: u64,
    pub labels_emitted: usize,
}

/// Rows of one stack level with absolute positions `base..base + len`.
#[derive(Default)]
struct Level {
    base: usize,
    rows: VecDeque<Vec<f64>>,
}

impl Level {
    fn end(&self) -> usize {
        self.base + self.rows.len()
    }

    fn push(&mut self, row: Vec<f64>) {
        self.rows.push_back(row);
    }

    fn drop_before(&mut self, pos: usize) {
        while self.base < pos && !self.rows.is_empty() {
            self.rows.pop_front();
            self.base += 1;
        }
    }

    fn window(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let rows: Vec<&[f64]> = (lo..hi).map(|p| self.rows[p - self.base].as_slice()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Incremental greedy decoder over a finite attention window.
///
/// Level 0 holds input projections and level `l+1` the outputs of layer
/// `l`. A level-`l+1` row at position `p` is computed once level `l` holds
/// `p + right` (or the stream has ended), from the rows `p - left ..= p + right`
/// only, and rows that no later position can see are dropped. The work per
/// frame is therefore bounded by the window, independent of how many frames
/// came before. Outputs equal the batch encoder because every attention
/// score depends only on relative offsets.
pub struct StreamDecoder<'m> {
    model: &'m TransducerModel,
    left: usize,
    right: usize,
    max_symbols_per_frame: usize,
    levels: Vec<Level>,
    emitted_frames: usize,
    cache: LabelCache<'m>,
    hyp: Hypothesis,
    flushed: bool,
    record: Option<Vec<Vec<f64>>>,
}

impl<'m> StreamDecoder<'m> {
    pub fn new(model: &'m TransducerModel, max_symbols_per_frame: usize) -> Result<Self> {
        let mask = model.config.audio.mask;
        let left = mask
            .left
            .limit()
            .ok_or_else(|| Error::Stream("streaming requires a finite left context".into()))?;
        let right = mask
            .right
            .limit()
            .ok_or_else(|| Error::Stream("streaming requires a finite right context".into()))?;
        Ok(Self {
            model,
            left,
            right,
            max_symbols_per_frame,
            levels: (0..=model.config.audio.num_layers).map(|_| Level::default()).collect(),
            emitted_frames: 0,
            cache: LabelCache::new(model),
            hyp: Hypothesis {
                labels: Vec::new(),
                score: 0.0,
                acoustic: 0.0,
            },
            flushed: false,
            record: None,
        })
    }

    /// Keeps a copy of every audio encoder output row, for inspection.
    pub fn record_activations(mut self) -> Self {
        self.record = Some(Vec::new());
        self
    }

    pub fn activations(&self) -> Option<&[Vec<f64>]> {
        self.record.as_deref()
    }

    pub fn frames_consumed(&self) -> usize {
        self.levels[0].end()
    }

    pub fn hypothesis(&self) -> &Hypothesis {
        &self.hyp
    }

    pub fn labels(&self) -> &[usize] {
        &self.hyp.labels
    }

    /// Rows currently held across all levels.
    pub fn buffered_rows(&self) -> usize {
        self.levels.iter().map(|l| l.rows.len()).sum()
    }

    /// Consumes one feature frame; returns the labels it made final.
    pub fn push(&mut self, frame: &[f64]) -> Result<(Vec<usize>, StepStats)> {
        if self.flushed {
            return Err(Error::Stream("push after flush".into()));
        }
        let cfg = &self.model.config.audio;
        if frame.len() != cfg.input_dim {
            return Err(Error::Shape {
                op: "stream_push",
                lhs: vec![frame.len()],
                rhs: vec![cfg.input_dim],
            });
        }
        let (x, _) = self.run(|g, bound| {
            let x = g.constant(Tensor::new([1, frame.len()], frame.to_vec())?);
            input_projection(g, x, cfg, &self.model.audio, bound)
        })?;
        self.levels[0].push(x);
        self.advance(false)
    }

    /// Ends the stream, finishing every pending position with the right
    /// context truncated at the last frame.
    pub fn flush(&mut self) -> Result<(Vec<usize>, StepStats)> {
        if self.flushed {
            return Err(Error::Stream("stream already flushed".into()));
        }
        self.flushed = true;
        self.advance(true)
    }

    /// Runs `f` on a fresh inference graph and returns its single-row output.
    fn run<F>(&self, f: F) -> Result<(Vec<f64>, u64)>
    where
        F: for<'g> FnOnce(&mut Graph<'g>, &Bound) -> Result<crate::tensor::Var>,
    {
        let before = score_evaluations();
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.model.store, false);
        let out = f(&mut g, &bound)?;
        Ok((g.value(out).row(0).to_vec(), score_evaluations() - before))
    }

    fn advance(&mut self, end: bool) -> Result<(Vec<usize>, StepStats)> {
        let mut stats = StepStats::default();
        let model = self.model;
        let cfg = &model.config.audio;
        let (left, right) = (self.left, self.right);
        for l in 0..cfg.num_layers {
            loop {
                let p = self.levels[l + 1].end();
                let avail = self.levels[l].end();
                if p >= avail || (!end && avail <= p + right) {
                    break;
                }
                let lo = p.saturating_sub(left);
                let hi = (p + right + 1).min(avail);
                let window = self.levels[l].window(lo, hi)?;
                let layer = &model.audio.layers[l];
                let (row, evals) = self.run(|g, bound| {
                    let x = g.constant(window);
                    let ctx = LayerContext {
                        cfg,
                        stack: &model.audio,
                        layer,
                        bound,
                    };
                    encoder_layer(g, x, p - lo..p - lo + 1, &ctx, None)
                })?;
                stats.audio_score_evaluations += evals;
                self.levels[l + 1].push(row);
                self.levels[l].drop_before((p + 1).saturating_sub(left));
            }
        }
        let top = cfg.num_layers;
        let mut labels = Vec::new();
        while self.emitted_frames < self.levels[top].end() {
            let p = self.emitted_frames;
            let row = self.levels[top].rows[p - self.levels[top].base].clone();
            let (audio, _) = self.run(|g, bound| {
                let x = g.constant(Tensor::new([1, row.len()], row)?);
                final_norm(g, x, cfg, &model.audio, bound)
            })?;
            if let Some(rec) = &mut self.record {
                rec.push(audio.clone());
            }
            let proj = model
                .joint
                .project_audio(&model.store, &Tensor::new([1, audio.len()], audio)?)?;
            let (j0, s0) = (joint_evaluations(), score_evaluations());
            let before = self.hyp.labels.len();
            greedy_frame(&mut self.cache, proj.row(0), &mut self.hyp, self.max_symbols_per_frame)?;
            stats.joint_evaluations += joint_evaluations() - j0;
            stats.label_score_evaluations += score_evaluations() - s0;
            labels.extend_from_slice(&self.hyp.labels[before..]);
            self.emitted_frames += 1;
            stats.frames_emitted += 1;
            self.levels[top].drop_before(p + 1);
        }
        stats.labels_emitted = labels.len();
        Ok((labels, stats))
    }
}

/// Result of streaming a whole utterance frame by frame.
#[derive(Clone, Debug)]
pub struct StreamRun {
    pub hypothesis: Hypothesis,
    /// Audio encoder rows in emission order.
    pub activations: Vec<Vec<f64>>,
    /// One entry per pushed frame, then one for the flush.
    pub steps: Vec<StepStats>,
}

/// Pushes every row of `features` through a [`StreamDecoder`] and flushes.
pub fn stream_decode(model: &TransducerModel, features: &Tensor, max_symbols_per_frame: usize) -> Result<StreamRun> {
    let mut s = StreamDecoder::new(model, max_symbols_per_frame)?.record_activations();
    let mut steps = Vec::with_capacity(features.rows() + 1);
    for t in 0..features.rows() {
        steps.push(s.push(features.row(t))?.1);
    }
    steps.push(s.flush()?.1);
    Ok(StreamRun {
        hypothesis: s.hyp.clone(),
        activations: s.record.take().unwrap_or_default(),
        steps,
    })
}
