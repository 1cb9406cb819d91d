//! The assembled transducer: audio encoder, label encoder and joint network.
//!
//! The label encoder reads `[blank, y_1, ..., y_U]` through an embedding
//! table, so its row `u` summarizes the first `u` labels. Its mask must be
//! causal; with `left` context per layer the row at position `u` depends only
//! on positions `u - num_layers · left ..= u`, which is what lets decoders
//! evaluate label states on truncated histories.

use serde::{Deserialize, Serialize};

use crate::attention::{encode, AttentionMask, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{init_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Rng, Tensor, Var};
use crate::transducer::{check_labels, log_prob_grid_graph, rnnt_log_prob_graph, JointConfig, JointParams, LogProbGrid, BLANK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output symbols including the blank.
    pub vocab_size: usize,
    pub audio: EncoderConfig,
    /// `input_dim` is the label embedding width.
    pub label: EncoderConfig,
    pub joint: JointConfig,
}

impl ModelConfig {
    /// Small default: 2 audio layers, 1 label layer, width 32, 2 heads.
    pub fn toy(feature_dim: usize, symbols: usize, audio_mask: AttentionMask, label_left: usize) -> Self {
        let encoder = |input_dim, num_layers, mask| EncoderConfig {
            input_dim,
            num_layers,
            model_dim: 32,
            ff_dim1: 64,
            ff_dim2: 32,
            num_heads: 2,
            head_dim: 16,
            dropout_ratio: 0.0,
            mask,
            max_relative_offset: None,
            layer_norm_eps: 1e-5,
        };
        Self {
            vocab_size: symbols + 1,
            audio: encoder(feature_dim, 2, audio_mask),
            label: encoder(16, 1, AttentionMask::causal(label_left)),
            joint: JointConfig { joint_dim: 32 },
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config(format!("{key}.vocab_size"), "needs the blank and at least one symbol"));
        }
        self.audio.validate(&format!("{key}.audio"))?;
        self.label.validate(&format!("{key}.label"))?;
        if self.label.mask.right != crate::attention::Context::Limited(0) {
            return Err(Error::config(
                format!("{key}.label.mask.right"),
                "label encoder must be causal (right = 0)",
            ));
        }
        if self.joint.joint_dim == 0 {
            return Err(Error::config(format!("{key}.joint.joint_dim"), "must be positive"));
        }
        Ok(())
    }

    /// How many positions back a label state can see, if bounded.
    pub fn label_context(&self) -> Option<usize> {
        self.label.mask.left.limit().map(|l| l * self.label.num_layers)
    }
}

#[derive(Clone, Debug)]
pub struct TransducerModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub audio: EncoderParams,
    pub label: EncoderParams,
    pub embedding: ParamId,
    pub joint: JointParams,
}

impl TransducerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate("model")?;
        let mut rng = Rng::new(seed).fork("init");
        let mut store = ParamStore::new();
        let audio = EncoderParams::init(&mut store, "audio", &config.audio, &mut rng);
        let label = EncoderParams::init(&mut store, "label", &config.label, &mut rng);
        let embedding = store.add(
            "label.embedding",
            init_normal(&mut rng.fork("embedding"), &[config.vocab_size, config.label.input_dim], 1.0),
        );
        let joint = JointParams::init(
            &mut store,
            "joint",
            config.audio.model_dim,
            config.label.model_dim,
            config.joint.joint_dim,
            config.vocab_size,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            audio,
            label,
            embedding,
            joint,
        })
    }

    /// Model of the given shape holding `tensors` (name, value) in store order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.store.replace_all(tensors)?;
        Ok(model)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// `log P(y | x)` as a graph node. `bound` may hold perturbed weights.
    pub fn log_prob_graph(
        &self,
        g: &mut Graph<'_>,
        bound: &Bound,
        features: Var,
        labels: &[usize],
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        check_labels(labels, self.vocab_size())?;
        let frames = g.value(features).rows();
        let audio = encode(g, features, &self.config.audio, &self.audio, bound, dropout.as_deref_mut())?;
        let label = self.label_graph(g, bound, labels, dropout)?;
        let grid = log_prob_grid_graph(g, audio, label, &self.joint, bound)?;
        rnnt_log_prob_graph(g, grid, frames, labels)
    }

    fn label_graph(&self, g: &mut Graph<'_>, bound: &Bound, labels: &[usize], dropout: Option<&mut Rng>) -> Result<Var> {
        let ids: Vec<usize> = std::iter::once(BLANK).chain(labels.iter().copied()).collect();
        let emb = g.gather_rows(bound.var(self.embedding), &ids)?;
        encode(g, emb, &self.config.label, &self.label, bound, dropout)
    }

    pub fn encode_audio(&self, features: &Tensor) -> Result<Tensor> {
        crate::attention::encode_tensor(features, &self.config.audio, &self.audio, &self.store)
    }

    /// Label encoder rows for `[blank, labels...]`, `[(U+1) × d_l]`.
    pub fn encode_labels(&self, labels: &[usize]) -> Result<Tensor> {
        check_labels(labels, self.vocab_size())?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.store, false);
        let out = self.label_graph(&mut g, &bound, labels, None)?;
        Ok(g.value(out).clone())
    }

    /// Label encoder row for the full `history`, evaluated on the shortest
    /// suffix that determines it. Equal bitwise to the last row of
    /// [`Self::encode_labels`].
    pub fn label_state(&self, history: &[usize]) -> Result<Vec<f64>> {
        check_labels(history, self.vocab_size())?;
        // Sequence positions are [blank, history...]; the last one is
        // `history.len()`, reaching back `context` positions.
        let ids: Vec<usize> = std::iter::once(BLANK).chain(history.iter().copied()).collect();
        let start = match self.config.label_context() {
            Some(c) => ids.len().saturating_sub(c + 1),
            None => 0,
        };
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.store, false);
        let emb = g.gather_rows(bound.var(self.embedding), &ids[start..])?;
        let out = encode(&mut g, emb, &self.config.label, &self.label, &bound, None)?;
        let v = g.value(out);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    pub fn grid(&self, features: &Tensor, labels: &[usize]) -> Result<LogProbGrid> {
        let audio = self.encode_audio(features)?;
        let label = self.encode_labels(labels)?;
        crate::transducer::log_prob_grid(&audio, &label, &self.joint, &self.store)
    }

    pub fn log_prob(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        crate::transducer::rnnt_log_prob(&self.grid(features, labels)?, labels)
    }
}
