//! Joint network, alignment lattice and the transducer loss.
//!
//! For frames `t < T` and label positions `u ≤ U`, the joint network turns one
//! audio activation and one label activation into a distribution over the
//! vocabulary (blank included). The probability of a target sequence sums
//! over every alignment through the `T × (U+1)` lattice, computed in log
//! space with the forward variable
//!
//! ```text
//! α(0, 0) = 0
//! α(t, u) = logaddexp(α(t-1, u) + b(t-1, u), α(t, u-1) + ŷ(t, u-1))
//! log P(y | x) = α(T-1, U) + b(T-1, U)
//! ```
//!
//! where `b` is the blank log-probability and `ŷ(t, u)` the log-probability of
//! the next target label `y[u]`.

mod enumerate;

pub use enumerate::{brute_force_log_prob, enumerate_alignments, Alignment, MAX_ENUMERATION};

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_linear, Bound, ParamId, ParamStore};
use crate::tensor::{log_add_exp, CustomOp, Graph, Rng, Tensor, Var};

/// Index of the blank symbol in every vocabulary.
pub const BLANK: usize = 0;

thread_local! {
    static JOINT_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
    static PERTURB_RECURSION: Cell<bool> = const { Cell::new(false) };
}

/// Single-point joint evaluations on this thread since the last reset.
pub fn joint_evaluations() -> u64 {
    JOINT_EVALUATIONS.with(Cell::get)
}

pub fn reset_joint_evaluations() {
    JOINT_EVALUATIONS.with(|c| c.set(0));
}

/// Test hook: while enabled on the current thread, the forward recursion
/// adds a small bias to every label transition. Used to show that the
/// self-test suites notice a broken recursion.
pub fn set_recursion_fault(enabled: bool) {
    PERTURB_RECURSION.with(|c| c.set(enabled));
}

fn recursion_fault() -> f64 {
    if PERTURB_RECURSION.with(Cell::get) {
        1e-3
    } else {
        0.0
    }
}

/// Output symbols. Entry 0 is the blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
}

impl Vocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::invalid("vocabulary needs the blank and at least one symbol"));
        }
        Ok(Self { names })
    }

    /// Blank plus `symbols` names `a`, `b`, ... (or `s27`, ... past `z`).
    pub fn with_symbols(symbols: usize) -> Result<Self> {
        let names = std::iter::once("<b>".to_string())
            .chain((0..symbols).map(|i| {
                if i < 26 {
                    char::from(b'a' + i as u8).to_string()
                } else {
                    format!("s{}", i + 1)
                }
            }))
            .collect();
        Self::new(names)
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn render(&self, labels: &[usize]) -> String {
        labels.iter().map(|&l| self.name(l)).collect::<Vec<_>>().join(" ")
    }
}

/// Checks that `y` is a blank-free sequence over a vocabulary of size `v`.
pub fn check_labels(y: &[usize], v: usize) -> Result<()> {
    for (i, &l) in y.iter().enumerate() {
        if l == BLANK {
            return Err(Error::invalid(format!("target position {i} is the blank")));
        }
        if l >= v {
            return Err(Error::invalid(format!(
                "target position {i}: label {l} outside vocabulary of size {v}"
            )));
        }
    }
    Ok(())
}

/// `[T × (U+1) × V]` log-probabilities, row `t·(U+1) + u` of a `[T·(U+1) × V]`
/// matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbGrid {
    frames: usize,
    labels: usize,
    vocab: usize,
    values: Tensor,
}

impl LogProbGrid {
    pub fn new(frames: usize, labels: usize, values: Tensor) -> Result<Self> {
        let rows = frames * (labels + 1);
        if values.rank() != 2 || values.rows() != rows || values.cols() < 2 {
            return Err(Error::Shape {
                op: "log_prob_grid",
                lhs: values.shape().to_vec(),
                rhs: vec![rows, 0],
            });
        }
        let vocab = values.cols();
        Ok(Self {
            frames,
            labels,
            vocab,
            values,
        })
    }

    /// Grid whose every entry is `ln(1/V)`.
    pub fn uniform(frames: usize, labels: usize, vocab: usize) -> Result<Self> {
        let v = -(vocab as f64).ln();
        Self::new(frames, labels, Tensor::full([frames * (labels + 1), vocab], v))
    }

    /// Random well-formed grid: log-softmax of Gaussian logits.
    pub fn random(frames: usize, labels: usize, vocab: usize, rng: &mut Rng) -> Result<Self> {
        let rows = frames * (labels + 1);
        let logits = Tensor::new([rows, vocab], (0..rows * vocab).map(|_| 2.0 * rng.normal()).collect())?;
        Self::new(frames, labels, logits.log_softmax(1)?)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn at(&self, t: usize, u: usize) -> &[f64] {
        self.values.row(t * (self.labels + 1) + u)
    }

    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.at(t, u)[k]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub joint_dim: usize,
}

/// `logits = W_o · tanh(W_a·a + b_a + W_l·l) + b_o`.
#[derive(Clone, Debug)]
pub struct JointParams {
    pub audio: ParamId,
    pub audio_bias: ParamId,
    pub label: ParamId,
    pub output: ParamId,
    pub output_bias: ParamId,
}

impl JointParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        audio_dim: usize,
        label_dim: usize,
        joint_dim: usize,
        vocab: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut rng = rng.fork(prefix);
        Self {
            audio: store.add(format!("{prefix}.audio.weight"), init_linear(&mut rng, audio_dim, joint_dim)),
            audio_bias: store.add(format!("{prefix}.audio.bias"), Tensor::zeros([joint_dim])),
            label: store.add(format!("{prefix}.label.weight"), init_linear(&mut rng, label_dim, joint_dim)),
            output: store.add(format!("{prefix}.output.weight"), init_linear(&mut rng, joint_dim, vocab)),
            output_bias: store.add(format!("{prefix}.output.bias"), Tensor::zeros([vocab])),
        }
    }

    /// `W_a·a + b_a` for every row of `audio`.
    pub fn project_audio(&self, store: &ParamStore, audio: &Tensor) -> Result<Tensor> {
        let mut h = audio.matmul(store.get(self.audio))?;
        add_bias(&mut h, store.get(self.audio_bias));
        Ok(h)
    }

    /// `W_l·l` for every row of `label`.
    pub fn project_label(&self, store: &ParamStore, label: &Tensor) -> Result<Tensor> {
        label.matmul(store.get(self.label))
    }

    /// Log-distribution for one projected audio row and one projected label
    /// row. Same arithmetic as the batched grid, so results agree bitwise.
    pub fn log_probs(&self, store: &ParamStore, audio_proj: &[f64], label_proj: &[f64]) -> Result<Vec<f64>> {
        if audio_proj.len() != label_proj.len() {
            return Err(Error::Shape {
                op: "joint",
                lhs: vec![audio_proj.len()],
                rhs: vec![label_proj.len()],
            });
        }
        JOINT_EVALUATIONS.with(|c| c.set(c.get() + 1));
        let hidden: Vec<f64> = audio_proj.iter().zip(label_proj).map(|(a, l)| (a + l).tanh()).collect();
        let mut logits = Tensor::new([1, hidden.len()], hidden)?.matmul(store.get(self.output))?;
        add_bias(&mut logits, store.get(self.output_bias));
        Ok(logits.log_softmax(1)?.into_data())
    }
}

fn add_bias(x: &mut Tensor, bias: &Tensor) {
    for r in 0..x.rows() {
        for (v, b) in x.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

/// Raw joint logits for a single (audio, label) activation pair.
pub fn joint_logits(audio_t: &[f64], label_u: &[f64], params: &JointParams, store: &ParamStore) -> Result<Vec<f64>> {
    let a = params.project_audio(store, &Tensor::new([1, audio_t.len()], audio_t.to_vec())?)?;
    let l = params.project_label(store, &Tensor::new([1, label_u.len()], label_u.to_vec())?)?;
    let hidden: Vec<f64> = a.data().iter().zip(l.data()).map(|(a, l)| (a + l).tanh()).collect();
    let mut logits = Tensor::new([1, hidden.len()], hidden)?.matmul(store.get(params.output))?;
    add_bias(&mut logits, store.get(params.output_bias));
    Ok(logits.into_data())
}

/// Differentiable log-probability grid `[T·(U+1) × V]` from audio activations
/// `[T × d_a]` and label activations `[(U+1) × d_l]`.
pub fn log_prob_grid_graph(g: &mut Graph<'_>, audio: Var, label: Var, params: &JointParams, bound: &Bound) -> Result<Var> {
    let a = g.matmul(audio, bound.var(params.audio))?;
    let a = g.add_row(a, bound.var(params.audio_bias))?;
    let l = g.matmul(label, bound.var(params.label))?;
    let pair = g.pair_add(a, l)?;
    let h = g.tanh(pair)?;
    let logits = g.matmul(h, bound.var(params.output))?;
    let logits = g.add_row(logits, bound.var(params.output_bias))?;
    g.log_softmax(logits)
}

pub fn log_prob_grid(audio: &Tensor, label: &Tensor, params: &JointParams, store: &ParamStore) -> Result<LogProbGrid> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, store, false);
    let (a, l) = (g.constant_ref(audio), g.constant_ref(label));
    let out = log_prob_grid_graph(&mut g, a, l, params, &bound)?;
    LogProbGrid::new(audio.rows(), label.rows() - 1, g.value(out).clone())
}

fn check_instance(grid: &LogProbGrid, y: &[usize]) -> Result<()> {
    if y.len() != grid.labels() {
        return Err(Error::invalid(format!(
            "target length {} does not match grid label extent {}",
            y.len(),
            grid.labels()
        )));
    }
    if grid.frames() == 0 {
        return Err(Error::invalid("transducer probability needs at least one frame"));
    }
    check_labels(y, grid.vocab())
}

/// Forward variables `α[t][u]`, flattened as `t·(U+1) + u`.
fn forward(grid: &LogProbGrid, y: &[usize]) -> Vec<f64> {
    let (t_len, u_len) = (grid.frames(), y.len());
    let fault = recursion_fault();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * (u_len + 1)];
    let idx = |t: usize, u: usize| t * (u_len + 1) + u;
    for t in 0..t_len {
        for u in 0..=u_len {
            alpha[idx(t, u)] = match (t, u) {
                (0, 0) => 0.0,
                (0, u) => alpha[idx(0, u - 1)] + grid.get(0, u - 1, y[u - 1]) + fault,
                (t, 0) => alpha[idx(t - 1, 0)] + grid.get(t - 1, 0, BLANK),
                (t, u) => log_add_exp(
                    alpha[idx(t - 1, u)] + grid.get(t - 1, u, BLANK),
                    alpha[idx(t, u - 1)] + grid.get(t, u - 1, y[u - 1]) + fault,
                ),
            };
        }
    }
    alpha
}

/// Backward variables: `β[t][u]` is the log-probability of completing the
/// alignment from `(t, u)`, final blank included.
fn backward(grid: &LogProbGrid, y: &[usize]) -> Vec<f64> {
    let (t_len, u_len) = (grid.frames(), y.len());
    let mut beta = vec![f64::NEG_INFINITY; t_len * (u_len + 1)];
    let idx = |t: usize, u: usize| t * (u_len + 1) + u;
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            let blank = if t + 1 < t_len {
                beta[idx(t + 1, u)] + grid.get(t, u, BLANK)
            } else if u == u_len {
                grid.get(t, u, BLANK)
            } else {
                f64::NEG_INFINITY
            };
            let label = if u < u_len {
                beta[idx(t, u + 1)] + grid.get(t, u, y[u])
            } else {
                f64::NEG_INFINITY
            };
            beta[idx(t, u)] = log_add_exp(blank, label);
        }
    }
    beta
}

/// `log P(y | x)` by the forward recursion.
pub fn rnnt_log_prob(grid: &LogProbGrid, y: &[usize]) -> Result<f64> {
    check_instance(grid, y)?;
    let alpha = forward(grid, y);
    let (t, u) = (grid.frames() - 1, y.len());
    Ok(alpha[t * (u + 1) + u] + grid.get(t, u, BLANK))
}

/// Gradient of `log P(y | x)` with respect to every grid entry: the posterior
/// occupancy of each lattice transition.
pub fn rnnt_grid_gradient(grid: &LogProbGrid, y: &[usize]) -> Result<Tensor> {
    check_instance(grid, y)?;
    let alpha = forward(grid, y);
    let beta = backward(grid, y);
    let (t_len, u_len) = (grid.frames(), y.len());
    let idx = |t: usize, u: usize| t * (u_len + 1) + u;
    let total = beta[0];
    let mut grad = Tensor::zeros([t_len * (u_len + 1), grid.vocab()]);
    for t in 0..t_len {
        for u in 0..=u_len {
            let row = grad.row_mut(idx(t, u));
            let a = alpha[idx(t, u)];
            let next_blank = if t + 1 < t_len {
                beta[idx(t + 1, u)]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            row[BLANK] = (a + grid.get(t, u, BLANK) + next_blank - total).exp();
            if u < u_len {
                row[y[u]] += (a + grid.get(t, u, y[u]) + beta[idx(t, u + 1)] - total).exp();
            }
        }
    }
    Ok(grad)
}

struct TransducerLogProb {
    frames: usize,
    labels: Vec<usize>,
}

impl CustomOp for TransducerLogProb {
    fn name(&self) -> &'static str {
        "rnnt_log_prob"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let grid = LogProbGrid::new(self.frames, self.labels.len(), inputs[0].clone())?;
        let upstream = grad.item()?;
        Ok(vec![rnnt_grid_gradient(&grid, &self.labels)?.map(|v| v * upstream)])
    }
}

/// Differentiable `log P(y | x)` of a grid held in the graph as a
/// `[T·(U+1) × V]` matrix.
pub fn rnnt_log_prob_graph(g: &mut Graph<'_>, grid: Var, frames: usize, y: &[usize]) -> Result<Var> {
    let view = LogProbGrid::new(frames, y.len(), g.value(grid).clone())?;
    let value = rnnt_log_prob(&view, y)?;
    g.custom(
        &[grid],
        Tensor::scalar(value),
        Box::new(TransducerLogProb {
            frames,
            labels: y.to_vec(),
        }),
    )
}

/// `-Σ_i log P(y_i | x_i)`, summed in index order.
pub fn batch_loss(examples: &[(&LogProbGrid, &[usize])]) -> Result<f64> {
    let mut loss = 0.0;
    for (grid, y) in examples {
        loss -= rnnt_log_prob(grid, y)?;
    }
    Ok(loss)
}

/// Graph form of [`batch_loss`] over per-example log-probability nodes.
pub fn batch_loss_graph(g: &mut Graph<'_>, log_probs: &[Var]) -> Result<Var> {
    let (first, rest) = log_probs
        .split_first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let mut total = *first;
    for &lp in rest {
        total = g.add(total, lp)?;
    }
    g.scale(total, -1.0)
}
