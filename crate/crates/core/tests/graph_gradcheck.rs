//! Reverse-mode gradients of every graph op against central differences.

use tt_core::tensor::gradcheck::{compare, numeric_gradients, DEFAULT_STEP};
use tt_core::tensor::{AttentionWindow, Graph, Rng, Tensor, Var};
use tt_core::Result;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Projects `out` onto a fixed random direction so every output entry
/// contributes to the scalar being differentiated.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let dir = random(&mut Rng::new(seed), &shape);
    let d = g.constant(dir);
    let m = g.mul(out, d)?;
    g.sum(m)
}

fn check<F>(name: &str, mut inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p)).collect();
        let out = build(&mut g, &vars)?;
        let root = project(&mut g, out, 99)?;
        g.value(root).item()
    };
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|p| g.param(p)).collect();
        let out = build(&mut g, &vars).unwrap();
        let root = project(&mut g, out, 99).unwrap();
        let grads = g.backward(root).unwrap();
        vars.iter()
            .zip(&inputs)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect::<Vec<_>>()
    };
    let numeric = numeric_gradients(&mut inputs, DEFAULT_STEP, eval).unwrap();
    let report = compare(&analytic, &numeric);
    assert!(report.passes(1e-4), "{name}: {report:?}");
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = Rng::new(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let c = random(&mut rng, &[3, 4]);
        let row = random(&mut rng, &[4]);
        let lanes = random(&mut rng, &[2, 3, 4]);

        check("matmul", vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
        check("transpose", vec![a.clone()], |g, v| g.transpose(v[0]));
        check("add", vec![a.clone(), c.clone()], |g, v| g.add(v[0], v[1]));
        check("mul", vec![a.clone(), c.clone()], |g, v| g.mul(v[0], v[1]));
        check("scale", vec![a.clone()], |g, v| g.scale(v[0], -0.7));
        check("add_row", vec![a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]));
        check("tanh", vec![a.clone()], |g, v| g.tanh(v[0]));
        check("relu", vec![a.clone()], |g, v| g.relu(v[0]));
        check(
            "layer_norm",
            vec![a.clone(), row.clone(), random(&mut rng, &[4])],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        );
        check("log_softmax", vec![a.clone()], |g, v| g.log_softmax(v[0]));
        check("softmax", vec![a.clone()], |g, v| g.softmax(v[0]));
        for axis in 0..3 {
            check("logsumexp", vec![lanes.clone()], move |g, v| g.logsumexp(v[0], axis));
        }
        let window = AttentionWindow {
            query_offset: 1,
            left: Some(1),
            right: Some(1),
        };
        check("masked_softmax", vec![a.clone()], move |g, v| {
            g.masked_softmax(v[0], window)
        });
        check("dropout", vec![a.clone()], move |g, v| {
            g.dropout(v[0], 0.3, &mut Rng::new(seed), true)
        });
        check("slice_rows", vec![a.clone()], |g, v| g.slice_rows(v[0], 1..3));
        check("slice_cols", vec![a.clone()], |g, v| g.slice_cols(v[0], 1..3));
        check("concat_cols", vec![a.clone(), random(&mut rng, &[2, 3])], |g, v| {
            let t = g.transpose(v[1])?;
            g.concat_cols(&[v[0], t, v[0]])
        });
        check("gather_rows", vec![a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]));
        check("relative_gather", vec![random(&mut rng, &[3, 5])], |g, v| {
            g.relative_gather(v[0], 6, 1, 2)
        });
        check("pair_add", vec![a.clone(), random(&mut rng, &[2, 4])], |g, v| {
            g.pair_add(v[0], v[1])
        });
        check("sum", vec![a.clone()], |g, v| {
            let s = g.sum(v[0])?;
            g.mul(s, s)
        });
    }
}

#[test]
fn random_composite_graphs() {
    // Chains of randomly chosen row-preserving ops on a [3×4] input.
    for seed in 0..40u64 {
        let mut rng = Rng::new(1000 + seed);
        let ops: Vec<usize> = (0..6).map(|_| rng.range_inclusive(0, 6)).collect();
        let w = random(&mut rng, &[4, 4]);
        let bias = random(&mut rng, &[4]);
        let x = random(&mut rng, &[3, 4]);
        check("composite", vec![x, w, bias], |g, v| {
            let mut h = v[0];
            for &op in &ops {
                h = match op {
                    0 => g.matmul(h, v[1])?,
                    1 => g.tanh(h)?,
                    2 => g.add_row(h, v[2])?,
                    3 => g.layer_norm(h, v[2], v[2], 1e-5)?,
                    4 => g.softmax(h)?,
                    5 => {
                        let y = g.mul(h, h)?;
                        g.add(y, h)?
                    }
                    _ => g.log_softmax(h)?,
                };
            }
            Ok(h)
        });
    }
}

#[test]
fn identical_inputs_give_bitwise_identical_gradients() {
    let run = || {
        let mut rng = Rng::new(5);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 3]);
        let mut g = Graph::new();
        let (av, bv) = (g.param(&a), g.param(&b));
        let m = g.matmul(av, bv).unwrap();
        let s = g.log_softmax(m).unwrap();
        let d = g.dropout(s, 0.2, &mut rng, true).unwrap();
        let r = g.sum(d).unwrap();
        let grads = g.backward(r).unwrap();
        (
            g.value(r).item().unwrap(),
            grads.get(av).unwrap().clone(),
            grads.get(bv).unwrap().clone(),
        )
    };
    let (x, y) = (run(), run());
    assert_eq!(x.0.to_bits(), y.0.to_bits());
    assert_eq!(x.1, y.1);
    assert_eq!(x.2, y.2);
}

#[test]
fn exp_log_softmax_rows_sum_to_one() {
    let mut rng = Rng::new(8);
    for _ in 0..50 {
        let x = random(&mut rng, &[5, 7]).map(|v| v * 10.0);
        let ls = x.log_softmax(1).unwrap();
        let sm = x.softmax(1).unwrap();
        for r in 0..5 {
            let s: f64 = ls.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for (a, b) in ls.row(r).iter().zip(sm.row(r)) {
                assert!((a.exp() - b).abs() < 1e-12);
            }
        }
    }
}
