use csattn_core::block::{AttentionBlock, CsAttnBlock, CsAttnConfig, STAGE_SCALES};
use csattn_core::nn::Activation;
use csattn_core::params::{ParamBuilder, ParamStore};
use csattn_core::{Tape, Tensor};
use proptest::prelude::*;

fn config_from_mask(mask: u8, count: usize, channels: usize, heads: usize) -> CsAttnConfig {
    CsAttnConfig {
        channels,
        base_heads: heads,
        use_nonlinear_activation: mask & 1 != 0,
        use_value_nta: mask & 2 != 0,
        use_aggregation: mask & 4 != 0,
        progressive_heads: mask & 8 != 0,
        intra_residual: mask & 16 != 0,
        use_spatial_scaling: mask & 32 != 0,
        attention_count: count,
        ..Default::default()
    }
}

fn run_shape(cfg: &CsAttnConfig, shape: [usize; 4], seed: u64) -> Vec<usize> {
    let mut store = ParamStore::<f64>::new();
    let block = AttentionBlock::new(&mut ParamBuilder::new(&mut store, seed), "b", cfg).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = Tensor::from_fn(shape.to_vec(), |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
    let xv = tape.constant(&x);
    let y = block.forward(&mut tape, &p, xv).unwrap();
    tape.shape(y).to_vec()
}

#[test]
fn every_toggle_combination_preserves_shape() {
    for mask in 0..64u8 {
        for count in 1..=3 {
            for stacked in [false, true] {
                let cfg = CsAttnConfig {
                    baseline_stacked: stacked,
                    ..config_from_mask(mask, count, 8, 2)
                };
                assert_eq!(run_shape(&cfg, [1, 8, 8, 8], mask as u64), vec![1, 8, 8, 8], "{cfg:?}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn random_shapes_preserve_shape(
        mask in 0u8..64,
        count in 1usize..=3,
        heads in 1usize..=2,
        n in 1usize..=2,
        hm in 1usize..=3,
        wm in 1usize..=3,
        act in prop::sample::select(vec![Activation::Gelu, Activation::Relu, Activation::LeakyRelu, Activation::Silu]),
    ) {
        let cfg = CsAttnConfig { activation: act, ..config_from_mask(mask, count, 4 * heads, heads) };
        let shape = [n, 4 * heads, 4 * hm, 4 * wm];
        prop_assert_eq!(run_shape(&cfg, shape, 3), shape.to_vec());
    }
}

/// Parameter count derived by hand from the layer list.
fn analytic_params(cfg: &CsAttnConfig) -> usize {
    let c = cfg.channels;
    let k = cfg.attention_count;
    let b = usize::from(cfg.conv_bias);
    let pw = |cin: usize, cout: usize| cin * cout + b * cout;
    let dw = |ch: usize| 9 * ch + b * ch;
    let mut total = 2 * c + pw(c, (2 + k) * c) + dw((2 + k) * c);
    total += (0..k).map(|s| cfg.heads(s)).sum::<usize>();
    for s in 1..k {
        if cfg.use_value_nta {
            total += pw(c, c);
        }
        let r = if cfg.use_spatial_scaling {
            STAGE_SCALES[s - 1]
        } else {
            1
        };
        total += pw(c, c) + dw(r * r * c) + pw(r * r * c, 2 * c);
    }
    if cfg.use_aggregation {
        total += pw(k * c, c);
    }
    total
}

fn built_params(cfg: &CsAttnConfig) -> usize {
    let mut store = ParamStore::<f32>::new();
    AttentionBlock::new(&mut ParamBuilder::new(&mut store, 0), "b", cfg).unwrap();
    store.numel()
}

#[test]
fn parameter_counts_match_layer_list() {
    for mask in 0..64u8 {
        for count in 1..=3 {
            let cfg = config_from_mask(mask, count, 8, 1);
            assert_eq!(built_params(&cfg), analytic_params(&cfg), "{cfg:?}");
        }
    }
    let no_bias = CsAttnConfig {
        conv_bias: false,
        ..Default::default()
    };
    assert_eq!(built_params(&no_bias), analytic_params(&no_bias));
}

#[test]
fn value_adjust_contributes_square_plus_bias() {
    let full = CsAttnConfig::default();
    let without = CsAttnConfig {
        use_value_nta: false,
        ..full.clone()
    };
    let c = full.channels;
    assert_eq!(built_params(&full) - built_params(&without), 2 * (c * c + c));
}

#[test]
fn single_stage_count_has_no_later_stage_parameters() {
    let c = 16;
    let cfg = CsAttnConfig {
        channels: c,
        attention_count: 1,
        ..Default::default()
    };
    // norm + qkv pointwise/depthwise on 3C + one temperature + aggregate C->C
    let expected = 2 * c + (3 * c * c + 3 * c) + (27 * c + 3 * c) + 1 + (c * c + c);
    assert_eq!(built_params(&cfg), expected);
    let mut store = ParamStore::<f32>::new();
    let block = CsAttnBlock::new(&mut ParamBuilder::new(&mut store, 0), "b", &cfg).unwrap();
    assert!(block.value_adjust.is_empty() && block.scaling.is_empty());
}

#[test]
fn stacked_baseline_delta() {
    let c = 8;
    let full = CsAttnConfig {
        channels: c,
        ..Default::default()
    };
    let stacked = CsAttnConfig {
        baseline_stacked: true,
        ..full.clone()
    };
    let unit = 2 * c + (3 * c * c + 3 * c) + (27 * c + 3 * c) + 1;
    assert_eq!(built_params(&stacked), 3 * unit);
    let nta = 2 * (c * c + c);
    let scaling: usize = [2usize, 4]
        .iter()
        .map(|r| (c * c + c) + (10 * r * r * c) + (r * r * c * 2 * c + 2 * c))
        .sum();
    let aggregation = 3 * c * c + c;
    let full_qkv = 2 * c + 5 * c * c + 5 * c + 50 * c + (1 + 2 + 2);
    assert_eq!(built_params(&full), full_qkv + nta + scaling + aggregation);
    assert_eq!(
        built_params(&full) as i64 - built_params(&stacked) as i64,
        (full_qkv + nta + scaling + aggregation) as i64 - 3 * unit as i64
    );
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = CsAttnConfig {
        channels: 8,
        base_heads: 2,
        ..Default::default()
    };
    let eval = || {
        let mut store = ParamStore::<f32>::new();
        let block = CsAttnBlock::new(&mut ParamBuilder::new(&mut store, 9), "b", &cfg).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&Tensor::from_fn(vec![2, 8, 8, 8], |i| (i as f32 * 0.37).sin()));
        let y = block.forward(&mut tape, &p, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(y).to_vec(), g.get(p.vars()[3]).unwrap().to_vec())
    };
    assert_eq!(eval(), eval());
}
