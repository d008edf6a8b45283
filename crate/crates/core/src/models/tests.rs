use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::hpo::SearchSpace;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn batch(rows: usize, schema: &InputSchema, seed: u64) -> Features {
    let mut r = rng(seed);
    let n_cat = schema.n_cat();
    Features {
        rows,
        n_num: schema.n_num,
        n_cat,
        numeric: (0..rows * schema.n_num).map(|_| r.gen_range(-2.0..2.0)).collect(),
        categorical: (0..rows * n_cat)
            .map(|i| r.gen_range(0..=schema.cat_cardinalities[i % n_cat]))
            .collect(),
    }
}

fn resnext(n_layers: usize, d: usize, factor: f64, c: usize) -> ResNeXtConfig {
    ResNeXtConfig {
        n_layers,
        layer_size: d,
        learning_rate: 1e-3,
        weight_decay: 1e-5,
        residual_dropout: 0.0,
        hidden_dropout: 0.0,
        d_embedding: 16,
        d_hidden_factor: factor,
        cardinality: c,
    }
}

fn resnet_of(c: &ResNeXtConfig) -> ResNetConfig {
    ResNetConfig {
        n_layers: c.n_layers,
        layer_size: c.layer_size,
        learning_rate: c.learning_rate,
        weight_decay: c.weight_decay,
        residual_dropout: c.residual_dropout,
        hidden_dropout: c.hidden_dropout,
        d_embedding: c.d_embedding,
        d_hidden_factor: c.d_hidden_factor,
    }
}

fn ft(d_token: usize, n_layers: usize) -> FtConfig {
    FtConfig {
        n_layers,
        d_token,
        residual_dropout: 0.0,
        attn_dropout: 0.0,
        ffn_dropout: 0.0,
        d_ffn_factor: 4.0 / 3.0,
        learning_rate: 1e-4,
        weight_decay: 1e-5,
    }
}

fn schema() -> InputSchema {
    InputSchema {
        n_num: 3,
        cat_cardinalities: vec![4, 2],
    }
}

fn shape_of(m: &ModelInstance, name: &str) -> Vec<usize> {
    m.params.get(m.params.id(name).unwrap()).value.shape().to_vec()
}

fn weight_sum(m: &ModelInstance, prefix: &str) -> usize {
    m.params
        .iter()
        .filter(|p| p.name.starts_with(prefix) && p.name.ends_with(".weight") && p.role == ParamRole::Weight)
        .map(|p| p.value.len())
        .sum()
}

#[test]
fn concat_width_from_schema() {
    let m = build_resnext(&resnext(1, 64, 2.0, 4), &schema(), 2, &mut rng(0)).unwrap();
    assert_eq!(shape_of(&m, "stem.weight"), vec![35, 64]);
    assert_eq!(shape_of(&m, "embeddings.0"), vec![5, 16]);
}

#[test]
fn path_weights_match_single_path_block() {
    let x = build_resnext(&resnext(1, 64, 2.0, 4), &schema(), 2, &mut rng(0)).unwrap();
    let r = build_resnet(&resnet_of(&resnext(1, 64, 2.0, 4)), &schema(), 2, &mut rng(0)).unwrap();
    assert_eq!(shape_of(&x, "blocks.0.paths.3.linear1.weight"), vec![64, 32]);
    assert_eq!(weight_sum(&x, "blocks.0.paths"), 16384);
    assert_eq!(weight_sum(&r, "blocks.0.paths"), 64 * 128 + 128 * 64);
}

#[test]
fn resnext_single_path_has_resnet_shapes() {
    let c = resnext(3, 48, 1.5, 1);
    let a = build_resnext(&c, &schema(), 3, &mut rng(1)).unwrap();
    let b = build_resnet(&resnet_of(&c), &schema(), 3, &mut rng(1)).unwrap();
    let shapes = |m: &ModelInstance| -> Vec<(String, Vec<usize>)> {
        m.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
    };
    assert_eq!(shapes(&a), shapes(&b));
}

#[test]
fn parameter_parity_when_cardinality_divides_width() {
    for (d, factor, c) in [(64, 2.0, 4), (128, 1.0, 32), (96, 3.0, 8), (512, 4.0, 16)] {
        let cfg = resnext(2, d, factor, c);
        let a = build_resnext(&cfg, &schema(), 2, &mut rng(0)).unwrap();
        let b = build_resnet(&resnet_of(&cfg), &schema(), 2, &mut rng(0)).unwrap();
        let (wa, ta) = a.param_count();
        let (wb, tb) = b.param_count();
        assert_eq!(wa, wb, "d={d} C={c}");
        assert!((ta as f64 - tb as f64).abs() / (tb as f64) < 0.01);
    }
}

#[test]
fn head_and_embedding_counts() {
    let s = InputSchema {
        n_num: 0,
        cat_cardinalities: vec![10],
    };
    let mut cfg = resnext(1, 64, 1.0, 1);
    cfg.d_embedding = 64;
    let m = build_resnext(&cfg, &s, 2, &mut rng(0)).unwrap();
    assert_eq!(shape_of(&m, "head.weight"), vec![64, 2]);
    assert_eq!(shape_of(&m, "head.bias"), vec![1, 2]);
    assert_eq!(shape_of(&m, "embeddings.0"), vec![11, 64]);
    let (w, t) = m.param_count();
    // embedding 704, stem 64·64, path 64·64 + 64·64, head 128
    assert_eq!(w, 704 + 4096 + 8192 + 128);
    // + stem bias, path bias, output bias, two norms, head bias
    assert_eq!(t, w + 64 + 64 + 64 + 4 * 64 + 2);
}

#[test]
fn zero_width_paths_are_clamped() {
    let m = build_resnext(&resnext(1, 4, 1.0, 8), &schema(), 2, &mut rng(0)).unwrap();
    assert_eq!(shape_of(&m, "blocks.0.paths.7.linear1.weight"), vec![4, 1]);
    assert_eq!(m.warnings.len(), 1);
}

#[test]
fn zeroed_blocks_are_identity() {
    let s = schema();
    let x = batch(9, &s, 3);
    for cfg in [resnext(3, 32, 2.0, 4), resnext(2, 24, 1.0, 1)] {
        let mut m = build_resnext(&cfg, &s, 2, &mut rng(2)).unwrap();
        m.zero_block_outputs();
        let got = m.logits(&x).unwrap();

        // head(norm(stem(x))) computed directly
        let Layout::Residual(l) = m.layout.clone() else { unreachable!() };
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, false);
        let input = l.input(&mut tape, &bound, &x).unwrap();
        let h = tape.linear(input, bound[l.stem_w], Some(bound[l.stem_b])).unwrap();
        let mut state = BatchNormState::new(cfg.layer_size);
        let z = tape
            .batch_norm(h, bound[l.final_gamma], bound[l.final_beta], &mut state, Mode::Eval)
            .unwrap();
        let want = tape.linear(z, bound[l.head_w], Some(bound[l.head_b])).unwrap();
        assert_eq!(got.data(), tape.value(want).data());
    }
}

#[test]
fn zeroed_ft_layers_are_identity() {
    let s = schema();
    let x = batch(5, &s, 4);
    let mut deep = build_ft_transformer(&ft(16, 3), &s, 2, &mut rng(9)).unwrap();
    deep.zero_block_outputs();
    let mut tape = Tape::new();
    let Layout::Ft(l) = deep.layout.clone() else { unreachable!() };
    let bound = deep.params.bind(&mut tape, false);
    let (tokens, t) = l.tokens(&mut tape, &bound, &x).unwrap();
    let cls = tape.gather_rows(tokens, &(0..5).map(|i| i * t).collect::<Vec<_>>()).unwrap();
    let c = tape.layer_norm(cls, bound[l.head_norm.0], bound[l.head_norm.1]).unwrap();
    let c = tape.relu(c);
    let want = tape.linear(c, bound[l.head.w], Some(bound[l.head.b])).unwrap();
    assert_eq!(deep.logits(&x).unwrap().data(), tape.value(want).data());
}

#[test]
fn eval_is_deterministic_and_handles_single_rows() {
    let s = schema();
    for cfg in [
        ModelConfig::ResNeXt(resnext(2, 32, 2.0, 4)),
        ModelConfig::FtTransformer(ft(16, 2)),
    ] {
        let mut m = ModelInstance::build(&cfg, &s, 3, &mut rng(5)).unwrap();
        let x = batch(7, &s, 6);
        let a = m.logits(&x).unwrap();
        let b = m.logits(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[7, 3]);
        let one = x.select(&[2]);
        assert_eq!(m.logits(&one).unwrap().shape(), &[1, 3]);
    }
}

#[test]
fn ft_train_without_dropout_matches_eval() {
    let s = schema();
    let mut m = build_ft_transformer(&ft(16, 2), &s, 2, &mut rng(5)).unwrap();
    let x = batch(6, &s, 8);
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, &x, Mode::Train, &mut rng(0)).unwrap();
    assert_eq!(tape.value(out.logits), &m.logits(&x).unwrap());
}

#[test]
fn single_feature_sequence() {
    let s = InputSchema {
        n_num: 1,
        cat_cardinalities: vec![],
    };
    let mut m = build_ft_transformer(&ft(8, 1), &s, 4, &mut rng(0)).unwrap();
    let x = batch(3, &s, 1);
    let Layout::Ft(l) = m.layout.clone() else { unreachable!() };
    let mut tape = Tape::new();
    let bound = m.params.bind(&mut tape, false);
    let (_, t) = l.tokens(&mut tape, &bound, &x).unwrap();
    assert_eq!(t, 2);
    assert_eq!(m.logits(&x).unwrap().shape(), &[3, 4]);
}

#[test]
fn ft_attention_rows_are_normalized() {
    let s = schema();
    let mut m = build_ft_transformer(&ft(16, 1), &s, 2, &mut rng(1)).unwrap();
    let x = batch(4, &s, 2);
    let mut tape = Tape::new();
    m.forward(&mut tape, &x, Mode::Eval, &mut rng(0)).unwrap();
    let t = 1 + s.n_features();
    let mut seen = 0;
    for i in 0..tape.len() {
        if let Some(p) = tape.attention_probs(crate::autodiff::Var::from_index(i)) {
            for row in p.chunks(t) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            seen += 1;
        }
    }
    assert_eq!(seen, 1);
}

#[test]
fn ft_is_equivariant_to_feature_order() {
    let s = InputSchema {
        n_num: 4,
        cat_cardinalities: vec![],
    };
    let mut m = build_ft_transformer(&ft(16, 2), &s, 2, &mut rng(7)).unwrap();
    let x = batch(6, &s, 3);
    let base = m.logits(&x).unwrap();

    let perm = [2, 0, 3, 1];
    let mut xp = x.clone();
    for i in 0..x.rows {
        for (new, &old) in perm.iter().enumerate() {
            xp.numeric[i * 4 + new] = x.numeric[i * 4 + old];
        }
    }
    let mut mp = m.clone();
    for name in ["tokenizer.num_weight", "tokenizer.num_bias"] {
        let id = mp.params.id(name).unwrap();
        let src = m.params.get(id).value.clone();
        let d = src.cols();
        let dst = mp.params.get_mut(id).value.data_mut();
        for (new, &old) in perm.iter().enumerate() {
            dst[new * d..(new + 1) * d].copy_from_slice(src.row(old));
        }
    }
    let permuted = mp.logits(&xp).unwrap();
    for (a, b) in base.data().iter().zip(permuted.data()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn gradients_reach_every_parameter_at_defaults() {
    let s = schema();
    for arch in Architecture::ALL {
        let cfg = ModelConfig::default_for(&SearchSpace::for_architecture(arch)).unwrap();
        let mut m = ModelInstance::build(&cfg, &s, 2, &mut rng(11)).unwrap();
        // every category index appears so each embedding row is used
        let mut x = batch(16, &s, 12);
        for i in 0..x.rows {
            x.categorical[i * 2] = i % 5;
            x.categorical[i * 2 + 1] = i % 3;
        }
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &x, Mode::Train, &mut rng(13)).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        m.params.pull_grads(&tape, &out.bound);
        for p in m.params.iter() {
            assert!(p.grad.iter().any(|g| *g != 0.0), "{arch}: no gradient for {}", p.name);
        }
    }
}

#[test]
fn schema_mismatch_is_a_shape_error() {
    let mut m = build_resnext(&resnext(1, 16, 1.0, 2), &schema(), 2, &mut rng(0)).unwrap();
    let other = InputSchema {
        n_num: 2,
        cat_cardinalities: vec![4, 2],
    };
    assert!(matches!(m.logits(&batch(3, &other, 0)), Err(Error::Shape(_))));
    let mut bad = batch(3, &schema(), 0);
    bad.categorical[0] = 9;
    assert!(matches!(m.logits(&bad), Err(Error::Shape(_))));
}

#[test]
fn invalid_builds() {
    let empty = InputSchema {
        n_num: 0,
        cat_cardinalities: vec![],
    };
    assert!(matches!(
        build_resnet(&resnet_of(&resnext(1, 8, 1.0, 1)), &empty, 2, &mut rng(0)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        build_ft_transformer(&ft(4, 1), &schema(), 2, &mut rng(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn block_states_are_unchanged_by_zeroed_blocks() {
    let s = schema();
    let x = batch(6, &s, 8);
    let models = [
        ModelConfig::ResNeXt(resnext(3, 32, 2.0, 4)),
        ModelConfig::FtTransformer(ft(16, 2)),
    ];
    for cfg in models {
        let mut m = ModelInstance::build(&cfg, &s, 2, &mut rng(3)).unwrap();
        let live = m.block_states(&x).unwrap();
        assert_ne!(live[0], live[1]);
        m.zero_block_outputs();
        let states = m.block_states(&x).unwrap();
        assert_eq!(states.len(), live.len());
        assert!(states.windows(2).all(|w| w[0] == w[1]));
    }
}
