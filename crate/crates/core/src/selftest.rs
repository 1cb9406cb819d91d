//! Consistency suites run in-process by `tt selftest`.

use std::fmt;

use crate::attention::AttentionMask;
use crate::decode::{greedy_decode, stream_decode};
use crate::error::Result;
use crate::model::{ModelConfig, TransducerModel};
use crate::params::Bound;
use crate::tensor::gradcheck::{compare, numeric_gradients, GradCheckReport, DEFAULT_STEP};
use crate::tensor::{Graph, Rng, Tensor};
use crate::train::{lr_at, ScheduleConfig};
use crate::transducer::{brute_force_log_prob, rnnt_log_prob, LogProbGrid, BLANK};

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<10} {}", self.name, self.detail)
    }
}

fn suite(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    match run() {
        Ok((passed, detail)) => SuiteResult { name, passed, detail },
        Err(e) => SuiteResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all() -> Vec<SuiteResult> {
    vec![oracle_suite(), gradcheck_suite(), streaming_suite(), schedule_suite()]
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).expect("shape and data agree")
}

/// Freshly initialized model with every tensor jittered, so no gradient
/// path or emission is degenerate.
pub fn random_model(config: ModelConfig, seed: u64, jitter: f64) -> Result<TransducerModel> {
    let mut model = TransducerModel::new(config, seed)?;
    let mut rng = Rng::new(seed).fork("jitter");
    for t in model.store.tensors_mut() {
        let noise = random_tensor(&mut rng, t.shape(), jitter);
        *t = t.add(&noise)?;
    }
    Ok(model)
}

/// Model small enough for exhaustive finite differences.
pub fn tiny_config(feature_dim: usize, symbols: usize, audio_mask: AttentionMask, label_left: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(feature_dim, symbols, audio_mask, label_left);
    for enc in [&mut cfg.audio, &mut cfg.label] {
        enc.num_layers = 1;
        enc.model_dim = 6;
        enc.ff_dim1 = 8;
        enc.ff_dim2 = 6;
        enc.num_heads = 2;
        enc.head_dim = 3;
    }
    cfg.label.input_dim = 4;
    cfg.joint.joint_dim = 5;
    cfg
}

/// Reverse-mode gradient of `-log P(y | x)` against central differences of
/// every parameter entry.
pub fn model_gradient_check(model: &TransducerModel, x: &Tensor, y: &[usize]) -> Result<GradCheckReport> {
    let objective = |g: &mut Graph, bound: &Bound| {
        let xv = g.constant(x.clone());
        let lp = model.log_prob_graph(g, bound, xv, y, None)?;
        g.scale(lp, -1.0)
    };
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &model.store, true);
    let root = objective(&mut g, &bound)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = model
        .store
        .ids()
        .map(|id| {
            grads
                .get(bound.var(id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(model.store.get(id).shape().to_vec()))
        })
        .collect();
    let mut values = model.store.tensors().to_vec();
    let numeric = numeric_gradients(&mut values, DEFAULT_STEP, |ps| {
        let mut g = Graph::new();
        let bound = Bound::owned(&mut g, ps.to_vec(), false);
        let root = objective(&mut g, &bound)?;
        g.value(root).item()
    })?;
    Ok(compare(&analytic, &numeric))
}

/// Worst disagreement between the forward recursion and alignment
/// enumeration over `instances` random grids with T ≤ 4, U ≤ 3, V ≤ 4.
pub fn oracle_max_error(instances: usize, seed: u64) -> Result<f64> {
    let root = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = root.fork_indexed("instance", i as u64);
        let t = rng.range_inclusive(1, 4);
        let u = rng.range_inclusive(0, 3);
        let v = rng.range_inclusive(2, 4);
        let y: Vec<usize> = (0..u).map(|_| rng.range_inclusive(1, v - 1)).collect();
        let grid = LogProbGrid::random(t, u, v, &mut rng)?;
        let err = (rnnt_log_prob(&grid, &y)? - brute_force_log_prob(&grid, &y)?).abs();
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(worst)
}

fn oracle_suite() -> SuiteResult {
    suite("oracle", || {
        let n = 500;
        let worst = oracle_max_error(n, 0x0AC1E)?;
        let uniform = rnnt_log_prob(&LogProbGrid::uniform(2, 1, 2)?, &[1])?;
        let uniform_err = (uniform - 0.25f64.ln()).abs();
        Ok((
            worst < 1e-9 && uniform_err < 1e-12,
            format!("{n} instances, max |forward - enumeration| = {worst:.2e}; uniform grid error {uniform_err:.2e}"),
        ))
    })
}

fn gradcheck_suite() -> SuiteResult {
    suite("gradcheck", || {
        let model = random_model(tiny_config(3, 3, AttentionMask::new(2, 1), 2), 11, 0.3)?;
        let x = random_tensor(&mut Rng::new(12), &[3, 3], 1.0);
        let report = model_gradient_check(&model, &x, &[2, 1])?;
        Ok((
            report.passes(1e-4),
            format!("{} entries, max relative error {:.2e}", report.checked, report.max_relative_error),
        ))
    })
}

fn streaming_suite() -> SuiteResult {
    suite("streaming", || {
        let mut rng = Rng::new(21);
        let mut cases = 0;
        let mut worst: f64 = 0.0;
        let mut mismatches = 0;
        for (left, right) in [(10, 0), (10, 2), (2, 0)] {
            for label_left in [2, 20] {
                let mut cfg = tiny_config(3, 3, AttentionMask::new(left, right), label_left);
                cfg.audio.num_layers = 2;
                let mut model = random_model(cfg, 22 + cases as u64, 0.5)?;
                let bias = model.joint.output_bias;
                model.store.get_mut(bias).data_mut()[BLANK] -= 1.0;
                for len in [1, 7, 25] {
                    let x = random_tensor(&mut rng, &[len, 3], 1.0);
                    let run = stream_decode(&model, &x, 10)?;
                    let batch = greedy_decode(&model, &x, 10)?;
                    let enc = model.encode_audio(&x)?;
                    if run.hypothesis.labels != batch.labels || run.activations.len() != len {
                        mismatches += 1;
                    }
                    for (t, row) in run.activations.iter().enumerate() {
                        for (a, b) in row.iter().zip(enc.row(t)) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                    cases += 1;
                }
            }
        }
        Ok((
            mismatches == 0 && worst <= 1e-9,
            format!("{cases} utterances, {mismatches} transcript mismatches, max activation difference {worst:.2e}"),
        ))
    })
}

fn schedule_suite() -> SuiteResult {
    suite("schedule", || {
        let s = ScheduleConfig::large();
        s.validate("schedule")?;
        let points = [(0, 0.0), (4_000, 2.5e-4), (30_000, 2.5e-4), (115_000, 2.5e-5), (200_000, 2.5e-6)];
        let mut worst: f64 = 0.0;
        for (step, want) in points {
            let got = lr_at(step, &s);
            let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
            worst = worst.max(err);
        }
        Ok((worst < 1e-12, format!("{} reference steps, max relative error {worst:.2e}", points.len())))
    })
}
