use tt_core::attention::{
    attention_scores, encode, encode_tensor, encoder_layer, AttentionMask, Context, EncoderConfig,
    EncoderParams, LayerContext,
};
use tt_core::params::{Bound, ParamStore};
use tt_core::tensor::gradcheck::{compare, numeric_gradients, DEFAULT_STEP};
use tt_core::tensor::{Graph, Rng, Tensor};

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn small_config(num_layers: usize, mask: AttentionMask) -> EncoderConfig {
    EncoderConfig {
        input_dim: 3,
        num_layers,
        model_dim: 8,
        ff_dim1: 12,
        ff_dim2: 8,
        num_heads: 2,
        head_dim: 4,
        dropout_ratio: 0.0,
        mask,
        max_relative_offset: None,
        layer_norm_eps: 1e-5,
    }
}

fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, EncoderParams) {
    let mut store = ParamStore::new();
    let params = EncoderParams::init(&mut store, "enc", cfg, &mut Rng::new(seed));
    // Give the zero-initialized biases some mass so they are exercised.
    let mut rng = Rng::new(seed + 1);
    for t in store.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = random(&mut rng, t.shape()).map(|v| 0.1 * v);
        }
    }
    (store, params)
}

#[test]
fn zero_position_parameters_give_plain_dot_product() {
    let mut rng = Rng::new(0);
    let (q, k) = (random(&mut rng, &[4, 3]), random(&mut rng, &[5, 3]));
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let rel = g.constant(Tensor::zeros([5, 3]));
    let zero_bias = g.constant(Tensor::zeros([1, 3]));
    let s = attention_scores(&mut g, qv, kv, rel, zero_bias, zero_bias, 0, 2).unwrap();
    let plain = q.matmul(&k.transpose().unwrap()).unwrap().map(|v| v / 3f64.sqrt());
    for (a, b) in g.value(s).data().iter().zip(plain.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn scores_depend_only_on_relative_offset() {
    let mut rng = Rng::new(1);
    let max_offset = 3;
    let rel = random(&mut rng, &[2 * max_offset + 1, 4]);
    let (u, v) = (random(&mut rng, &[1, 4]), random(&mut rng, &[1, 4]));
    let q = random(&mut rng, &[3, 4]);
    let k = random(&mut rng, &[3, 4]);
    let run = |shift: usize| {
        // Embed the same q/k content at positions shift.. of a longer sequence.
        let mut kk = random(&mut Rng::new(99), &[shift + 3, 4]);
        for r in 0..3 {
            kk.row_mut(shift + r).copy_from_slice(k.row(r));
        }
        let mut g = Graph::new();
        let ids = [q.clone(), kk, rel.clone(), u.clone(), v.clone()].map(|t| g.constant(t));
        let s = attention_scores(&mut g, ids[0], ids[1], ids[2], ids[3], ids[4], shift, max_offset)
            .unwrap();
        let sv = g.value(s);
        (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| sv.get2(i, shift + j))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(0), run(5));
    assert_eq!(run(0), run(11));
}

#[test]
fn offsets_beyond_limit_use_boundary_embedding() {
    let mut rng = Rng::new(2);
    let max_offset = 2;
    let rel = random(&mut rng, &[2 * max_offset + 1, 4]);
    let zero = Tensor::zeros([1, 4]);
    let q = random(&mut rng, &[1, 4]);
    // Identical keys so only the position term varies with j.
    let key = random(&mut rng, &[1, 4]);
    let k = Tensor::from_rows(&vec![key.row(0).to_vec(); 6]).unwrap();
    let mut g = Graph::new();
    let ids = [q, k, rel, zero.clone(), zero].map(|t| g.constant(t));
    // Query at position 5: key 3 is offset 2 (= max), key 2 is offset 3.
    let s = attention_scores(&mut g, ids[0], ids[1], ids[2], ids[3], ids[4], 5, max_offset).unwrap();
    let sv = g.value(s);
    assert_eq!(sv.get2(0, 3), sv.get2(0, 2));
    assert_ne!(sv.get2(0, 3), sv.get2(0, 4));
}

#[test]
fn zero_projections_reduce_layer_to_its_normalizations() {
    let cfg = small_config(1, AttentionMask::new(2, 1));
    let (mut store, params) = build(&cfg, 3);
    let layer = &params.layers[0];
    for id in [
        layer.query,
        layer.key,
        layer.value,
        layer.output,
        layer.output_bias,
        layer.ff1,
        layer.ff1_bias,
        layer.ff2,
        layer.ff2_bias,
    ] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = random(&mut Rng::new(4), &[5, 8]);
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, false);
    let xv = g.constant(x.clone());
    let ctx = LayerContext {
        cfg: &cfg,
        stack: &params,
        layer,
        bound: &bound,
    };
    let out = encoder_layer(&mut g, xv, 0..5, &ctx, None).unwrap();
    let n1 = x
        .layer_norm(store.get(layer.attn_norm_gain), store.get(layer.attn_norm_bias), 1e-5)
        .unwrap();
    let n2 = n1
        .layer_norm(store.get(layer.ff_norm_gain), store.get(layer.ff_norm_bias), 1e-5)
        .unwrap();
    assert_eq!(g.value(out), &n2);
}

#[test]
fn single_position_is_finite_and_shape_preserving() {
    let cfg = small_config(2, AttentionMask::new(0, 0));
    let (store, params) = build(&cfg, 5);
    let out = encode_tensor(&random(&mut Rng::new(6), &[1, 3]), &cfg, &params, &store).unwrap();
    assert_eq!(out.shape(), &[1, 8]);
    assert!(out.is_finite());
}

#[test]
fn empty_stack_is_input_projection() {
    let cfg = small_config(0, AttentionMask::FULL);
    let (store, params) = build(&cfg, 7);
    let x = random(&mut Rng::new(8), &[4, 3]);
    let out = encode_tensor(&x, &cfg, &params, &store).unwrap();
    let mut expected = x.matmul(store.get(params.input)).unwrap();
    let b = store.get(params.input_bias).data().to_vec();
    for r in 0..4 {
        for (v, bb) in expected.row_mut(r).iter_mut().zip(&b) {
            *v += bb;
        }
    }
    assert_eq!(out, expected);
}

#[test]
fn layer_and_stack_gradients_match_finite_differences() {
    for (layers, mask) in [(1, AttentionMask::new(2, 1)), (2, AttentionMask::new(1, 0)), (2, AttentionMask::FULL)] {
        let cfg = small_config(layers, mask);
        let (store, params) = build(&cfg, 10 + layers as u64);
        let x = random(&mut Rng::new(12), &[5, 3]);
        let objective = |g: &mut Graph, bound: &Bound| {
            let xv = g.constant(x.clone());
            let out = encode(g, xv, &cfg, &params, bound, None)?;
            // Weighted sum so the closing layer norm does not zero the gradient.
            let w = g.constant(random(&mut Rng::new(13), &[5, 8]));
            let m = g.mul(out, w)?;
            g.sum(m)
        };
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &store, true);
        let root = objective(&mut g, &bound).unwrap();
        let grads = g.backward(root).unwrap();
        let analytic: Vec<Tensor> = store
            .ids()
            .map(|id| {
                grads
                    .get(bound.var(id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect();
        let mut values = store.tensors().to_vec();
        let numeric = numeric_gradients(&mut values, DEFAULT_STEP, |ps| {
            let mut g = Graph::new();
            let bound = Bound::owned(&mut g, ps.to_vec(), false);
            let root = objective(&mut g, &bound)?;
            g.value(root).item()
        })
        .unwrap();
        let report = compare(&analytic, &numeric);
        assert!(report.passes(1e-4), "layers={layers}: {report:?}");
    }
}

#[test]
fn right_zero_mask_is_causal() {
    let cfg = small_config(2, AttentionMask::new(3, 0));
    let (store, params) = build(&cfg, 20);
    let mut rng = Rng::new(21);
    for _ in 0..20 {
        let x = random(&mut rng, &[9, 3]);
        let base = encode_tensor(&x, &cfg, &params, &store).unwrap();
        let t = rng.range_inclusive(0, 7);
        let mut y = x.clone();
        for r in t + 1..9 {
            for v in y.row_mut(r) {
                *v += rng.normal();
            }
        }
        let other = encode_tensor(&y, &cfg, &params, &store).unwrap();
        for r in 0..=t {
            assert_eq!(base.row(r), other.row(r));
        }
    }
}

fn sensitive(cfg: &EncoderConfig, store: &ParamStore, params: &EncoderParams, x: &Tensor, out_pos: usize, in_pos: usize) -> bool {
    let base = encode_tensor(x, cfg, params, store).unwrap();
    let mut y = x.clone();
    for v in y.row_mut(in_pos) {
        *v += 1.0;
    }
    let other = encode_tensor(&y, cfg, params, store).unwrap();
    base.row(out_pos) != other.row(out_pos)
}

#[test]
fn three_layers_left2_right1_output7_waits_for_input10() {
    let cfg = small_config(3, AttentionMask::new(2, 1));
    let (store, params) = build(&cfg, 30);
    let x = random(&mut Rng::new(31), &[14, 3]);
    // 1-based positions 7, 10, 11 are 0-based 6, 9, 10.
    assert!(sensitive(&cfg, &store, &params, &x, 6, 9));
    assert!(!sensitive(&cfg, &store, &params, &x, 6, 10));
    // Left side reaches 7 - 3·2 = 1.
    assert!(sensitive(&cfg, &store, &params, &x, 6, 0));
    let cfg4 = small_config(3, AttentionMask::new(1, 1));
    let (store4, params4) = build(&cfg4, 32);
    assert!(!sensitive(&cfg4, &store4, &params4, &x, 6, 2));
    assert!(sensitive(&cfg4, &store4, &params4, &x, 6, 3));
}

#[test]
fn outputs_invariant_outside_receptive_field() {
    let mut rng = Rng::new(40);
    for trial in 0..30 {
        let (left, right, layers) = (rng.range_inclusive(0, 3), rng.range_inclusive(0, 2), rng.range_inclusive(1, 3));
        let cfg = small_config(layers, AttentionMask::new(left, right));
        let (store, params) = build(&cfg, 100 + trial);
        let n = 16;
        let x = random(&mut rng, &[n, 3]);
        let p = rng.range_inclusive(0, n - 1);
        let lo = p.saturating_sub(layers * left);
        let hi = p + layers * right;
        let q = rng.range_inclusive(0, n - 1);
        if q < lo || q > hi {
            assert!(!sensitive(&cfg, &store, &params, &x, p, q), "trial {trial}");
        }
    }
}

#[test]
fn windowed_encoding_is_translation_invariant() {
    let cfg = small_config(2, AttentionMask::new(2, 1));
    let (store, params) = build(&cfg, 50);
    let mut rng = Rng::new(51);
    let a = random(&mut rng, &[10, 3]);
    let base = encode_tensor(&a, &cfg, &params, &store).unwrap();
    for shift in [1, 4, 9] {
        let prefix = random(&mut rng, &[shift, 3]);
        let rows: Vec<Vec<f64>> = (0..shift)
            .map(|r| prefix.row(r).to_vec())
            .chain((0..10).map(|r| a.row(r).to_vec()))
            .collect();
        let b = Tensor::from_rows(&rows).unwrap();
        let shifted = encode_tensor(&b, &cfg, &params, &store).unwrap();
        // Positions whose receptive field lies inside `a` in both sequences.
        for p in 4..10 {
            assert_eq!(base.row(p), shifted.row(p + shift), "shift {shift} pos {p}");
        }
    }
}

#[test]
fn large_configuration_is_representable() {
    let cfg = EncoderConfig::large(18, AttentionMask::new(10, 2));
    cfg.validate("audio").unwrap();
    assert_eq!(cfg.input_dim, 512);
    assert_eq!((cfg.ff_dim1, cfg.ff_dim2), (2048, 1024));
    assert_eq!((cfg.num_heads, cfg.head_dim, cfg.dropout_ratio), (8, 64, 0.1));
    let mut bad = small_config(1, AttentionMask::FULL);
    bad.ff_dim2 = 9;
    assert!(bad.validate("audio").unwrap_err().to_string().contains("audio.ff_dim2"));
    bad.ff_dim2 = 8;
    bad.dropout_ratio = 1.0;
    assert!(bad.validate("audio").is_err());
    assert_eq!(small_config(1, AttentionMask { left: Context::Limited(3), right: Context::Unlimited }).relative_offset_limit(), 32);
    assert_eq!(small_config(1, AttentionMask::new(3, 2)).relative_offset_limit(), 5);
}
