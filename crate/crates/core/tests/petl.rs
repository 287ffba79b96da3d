mod common;

use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use common::{backbone_oracle, Mat};
use petl_core::encoder::{encode, DualEncoderModel, EncoderConfig, EncoderInput, TokenSequence};
use petl_core::petl::{
    adapter_forward, attach_strategy, count_parameters, mrs_adapter_forward, mrs_params, mrs_tensor_name,
    param_report_for, prompt_prepend, prompt_tensor_name, AdapterParams, MrsAdapterParams, PetlStrategy, PromptDepth,
    PromptPosition, StrategyKind,
};
use petl_core::{Modality, PetlError};

fn toy_cfg() -> EncoderConfig {
    EncoderConfig::toy()
}

fn relu_bottleneck(x: &Mat, down: &Mat, up: &Mat) -> Mat {
    let (n, w) = x.dim();
    let (d, out) = (down.ncols(), up.ncols());
    let mut h = Mat::zeros((n, d));
    for i in 0..n {
        for k in 0..d {
            let s: f64 = (0..w).map(|j| x[[i, j]] * down[[j, k]]).sum();
            h[[i, k]] = s.max(0.0);
        }
    }
    let mut y = Mat::zeros((n, out));
    for i in 0..n {
        for o in 0..out {
            y[[i, o]] = (0..d).map(|k| h[[i, k]] * up[[k, o]]).sum();
        }
    }
    y
}

fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
    Mat::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn all_strategies() -> Vec<PetlStrategy> {
    vec![
        PetlStrategy::zero_shot(),
        PetlStrategy::linear_probe(),
        PetlStrategy::full_finetune(),
        PetlStrategy::adapter_sequential(8),
        PetlStrategy::mrs_adapter(16, 8),
        PetlStrategy::mrs_no_share(16, 8),
        PetlStrategy::prompt(StrategyKind::TextPrompt, 4, PromptDepth::Deep),
        PetlStrategy::prompt(StrategyKind::VisualPrompt, 4, PromptDepth::Shallow),
        PetlStrategy::prompt(StrategyKind::VlPrompt, 3, PromptDepth::Deep),
    ]
}

proptest! {
    #[test]
    fn mrs_counts_follow_closed_form(dv_h in 1usize..13, dt_h in 1usize..9, d_frac in 0.0f64..1.0, r_frac in 0.0f64..1.0) {
        let (dv, dt) = (64 * dv_h, 64 * dt_h);
        let min = dv.min(dt);
        let d = 1 + ((min - 2) as f64 * d_frac) as usize;
        let r = 1 + ((min - 2) as f64 * r_frac) as usize;
        let cfg = EncoderConfig {
            vision_width: dv,
            text_width: dt,
            vision_heads: dv_h,
            text_heads: dt_h,
            ..EncoderConfig::full_scale()
        };
        let (d64, r64, dv64, dt64) = (d as u64, r as u64, dv as u64, dt as u64);
        let shared = param_report_for(&cfg, &PetlStrategy::mrs_adapter(d, r)).unwrap();
        prop_assert_eq!(shared.trainable, d64 * (2 * dv64 + 2 * dt64 - r64));
        let apart = param_report_for(&cfg, &PetlStrategy::mrs_no_share(d, r)).unwrap();
        prop_assert_eq!(apart.trainable, 2 * d64 * (dv64 + dt64));
        prop_assert_eq!(apart.trainable - shared.trainable, d64 * r64);
        let untied = param_report_for(&cfg, &PetlStrategy::mrs_adapter(d, r).with_tie(false)).unwrap();
        prop_assert_eq!(untied.trainable, cfg.layers as u64 * shared.trainable);
        prop_assert_eq!(shared.total, backbone_oracle(&cfg) + shared.trainable);
    }

    #[test]
    fn mrs_forward_matches_explicit_loops(seed in 0u64..1000, rows in 1usize..6, shared in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dv, dt, d, r) = (10, 7, 4, 3);
        let m = MrsAdapterParams {
            w_down_v: random(&mut rng, (dv, d)),
            w_down_t: random(&mut rng, (dt, d)),
            w_up_v: random(&mut rng, (d, if shared { dv - r } else { dv })),
            w_up_t: random(&mut rng, (d, if shared { dt - r } else { dt })),
            w_up_share: shared.then(|| random(&mut rng, (d, r))),
            tie_across_layers: true,
        };
        for (branch, width, down, up) in [
            (Modality::Image, dv, &m.w_down_v, &m.w_up_v),
            (Modality::Text, dt, &m.w_down_t, &m.w_up_t),
        ] {
            let x = random(&mut rng, (rows, width));
            let got = mrs_adapter_forward(&x, &m, branch).unwrap();
            let own = relu_bottleneck(&x, down, up);
            prop_assert_eq!(got.dim(), (rows, width));
            for i in 0..rows {
                for j in 0..width {
                    let want = if j < own.ncols() {
                        own[[i, j]]
                    } else {
                        relu_bottleneck(&x, down, m.w_up_share.as_ref().unwrap())[[i, j - own.ncols()]]
                    };
                    prop_assert!((got[[i, j]] - want).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn shared_columns_are_identical_across_branches_for_equal_bottlenecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (dv, dt, d, r) = (12, 9, 5, 4);
    let mut m = MrsAdapterParams::zeros(dv, dt, d, r).unwrap();
    m.w_down_v = random(&mut rng, (dv, d));
    m.w_down_t = random(&mut rng, (dt, d));
    m.w_up_share = Some(random(&mut rng, (d, r)));
    // Inputs chosen so both branches produce the same bottleneck activation.
    let mut xv = Mat::zeros((1, dv));
    let mut xt = Mat::zeros((1, dt));
    xv[[0, 0]] = 1.0;
    xt[[0, 0]] = 1.0;
    m.w_down_t.row_mut(0).assign(&m.w_down_v.row(0));
    let v = mrs_adapter_forward(&xv, &m, Modality::Image).unwrap();
    let t = mrs_adapter_forward(&xt, &m, Modality::Text).unwrap();
    for k in 0..r {
        assert_eq!(v[[0, dv - r + k]], t[[0, dt - r + k]]);
    }
}

#[test]
fn mrs_forward_rejects_wrong_width() {
    let m = MrsAdapterParams::zeros(10, 7, 4, 3).unwrap();
    assert!(mrs_adapter_forward(&Mat::zeros((2, 7)), &m, Modality::Image).is_err());
    assert!(MrsAdapterParams::zeros(10, 7, 7, 3).is_err());
    assert!(MrsAdapterParams::zeros(10, 7, 4, 0).is_err());
}

#[test]
fn sequential_adapter_is_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, (3, 6));
    let a = AdapterParams {
        w_down: random(&mut rng, (6, 2)),
        w_up: random(&mut rng, (2, 6)),
        scale: 0.5,
    };
    let y = adapter_forward(&x, &a).unwrap();
    let want = relu_bottleneck(&x, &a.w_down, &a.w_up) * 0.5 + &x;
    assert!((&y - &want).iter().all(|v| v.abs() < 1e-12));
    let zero = AdapterParams {
        w_up: Mat::zeros((2, 6)),
        ..a
    };
    assert_eq!(adapter_forward(&x, &zero).unwrap(), x);
}

#[test]
fn attach_sets_trainability_per_strategy() {
    let base = DualEncoderModel::new(toy_cfg(), 0).unwrap();
    let backbone = backbone_oracle(&toy_cfg());
    for strategy in all_strategies() {
        let mut model = base.clone();
        attach_strategy(&mut model, &strategy, 1).unwrap();
        let report = count_parameters(&model);
        let planned = param_report_for(&toy_cfg(), &strategy).unwrap();
        assert_eq!(report, planned, "{}", strategy.label());
        for (name, p) in model.params().iter() {
            let expected = match strategy.kind {
                StrategyKind::FullFinetune => true,
                _ => name.starts_with("petl."),
            };
            assert_eq!(p.trainable, expected, "{}: {name}", strategy.label());
        }
        match strategy.kind {
            StrategyKind::ZeroShot => assert_eq!(report.trainable, 0),
            StrategyKind::FullFinetune => assert_eq!(report.trainable, backbone),
            _ => assert!(report.trainable > 0 && report.trainable < backbone / 10),
        }
    }
}

#[test]
fn attaching_twice_fails() {
    let mut model = DualEncoderModel::new(toy_cfg(), 0).unwrap();
    attach_strategy(&mut model, &PetlStrategy::mrs_adapter(8, 4), 1).unwrap();
    let err = attach_strategy(&mut model, &PetlStrategy::linear_probe(), 1).unwrap_err();
    assert!(matches!(err, PetlError::Config(_)));
}

#[test]
fn invalid_strategies_are_config_errors() {
    let cfg = toy_cfg();
    let bad = [
        PetlStrategy::mrs_adapter(0, 4),
        PetlStrategy::mrs_adapter(24, 4),
        PetlStrategy::mrs_adapter(8, 24),
        PetlStrategy::adapter_sequential(0),
        PetlStrategy::prompt(StrategyKind::TextPrompt, 0, PromptDepth::Deep),
        PetlStrategy::prompt(StrategyKind::TextPrompt, cfg.context_length, PromptDepth::Deep),
        PetlStrategy::new(StrategyKind::MrsAdapter),
    ];
    for s in bad {
        assert!(matches!(s.validate(&cfg), Err(PetlError::Config(_))), "{s:?}");
        let mut model = DualEncoderModel::new(cfg.clone(), 0).unwrap();
        assert!(attach_strategy(&mut model, &s, 0).is_err());
        assert!(model.strategy().is_none());
    }
    let mut extra = PetlStrategy::linear_probe();
    extra.params.d = Some(4);
    assert!(matches!(extra.validate(&cfg), Err(PetlError::Config(_))));
}

#[test]
fn fresh_adapters_and_probe_leave_embeddings_unchanged() {
    let base = DualEncoderModel::new(toy_cfg(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Array3::from_shape_simple_fn((16, 16, 3), || StandardNormal.sample(&mut rng));
    let ids = vec![1, 5, 9, 13, 2];
    for strategy in [
        PetlStrategy::linear_probe(),
        PetlStrategy::adapter_sequential(8),
        PetlStrategy::mrs_adapter(16, 8),
        PetlStrategy::mrs_no_share(16, 8).with_tie(false),
    ] {
        let mut model = base.clone();
        attach_strategy(&mut model, &strategy, 2).unwrap();
        for input in [EncoderInput::Image(&img), EncoderInput::Text(&ids)] {
            let a = encode(&input, &base, None).unwrap();
            let b = encode(&input, &model, None).unwrap();
            let diff = (&a.0 - &b.0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "{}: {diff}", strategy.label());
        }
    }
}

#[test]
fn trained_adapter_changes_both_towers() {
    let mut model = DualEncoderModel::new(toy_cfg(), 5).unwrap();
    let base = model.clone();
    attach_strategy(&mut model, &PetlStrategy::mrs_adapter(16, 8), 2).unwrap();
    let share = mrs_tensor_name("w_up_share", 0, true);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let value = Mat::from_shape_simple_fn((16, 8), || normal.sample(&mut rng));
    model.set_param(&share, value.clone()).unwrap();
    assert_eq!(mrs_params(&model, 1).unwrap().w_up_share.unwrap(), value);
    let img = Array3::from_shape_simple_fn((16, 16, 3), || StandardNormal.sample(&mut rng));
    let ids = vec![1, 5, 9, 2];
    for input in [EncoderInput::Image(&img), EncoderInput::Text(&ids)] {
        let a = encode(&input, &base, None).unwrap();
        let b = encode(&input, &model, None).unwrap();
        assert!((&a.0 - &b.0).iter().any(|v| v.abs() > 1e-6));
    }
    assert!(model.set_param(&share, Mat::zeros((8, 16))).is_err());
}

#[test]
fn prompts_are_inserted_after_the_first_row() {
    let tokens = Mat::from_shape_fn((5, 2), |(i, _)| i as f64);
    let text = TokenSequence {
        tokens,
        modality: Modality::Text,
        eos_index: Some(4),
    };
    let prompts = Mat::from_elem((2, 2), -1.0);
    let end = prompt_prepend(&text, &prompts, PromptPosition::End, Some(7)).unwrap();
    let col: Vec<f64> = end.tokens.column(0).to_vec();
    assert_eq!(col, vec![0.0, -1.0, -1.0, 1.0, 2.0, 3.0, 4.0]);
    assert_eq!(end.eos_index, Some(6));
    assert!(prompt_prepend(&text, &prompts, PromptPosition::End, Some(6)).is_err());
    let mid = prompt_prepend(&text, &prompts, PromptPosition::Mid, None).unwrap();
    assert_eq!(mid.tokens.nrows(), 7);
    assert_eq!(mid.tokens[[mid.eos_index.unwrap(), 0]], 4.0);
    assert_eq!(mid.tokens.column(0).iter().filter(|&&v| v == -1.0).count(), 2);
}

#[test]
fn prompt_tensors_exist_per_depth() {
    let cfg = toy_cfg();
    let mut deep = DualEncoderModel::new(cfg.clone(), 0).unwrap();
    attach_strategy(
        &mut deep,
        &PetlStrategy::prompt(StrategyKind::VlPrompt, 3, PromptDepth::Deep),
        0,
    )
    .unwrap();
    let mut shallow = DualEncoderModel::new(cfg.clone(), 0).unwrap();
    attach_strategy(
        &mut shallow,
        &PetlStrategy::prompt(StrategyKind::VlPrompt, 3, PromptDepth::Shallow),
        0,
    )
    .unwrap();
    for m in [Modality::Image, Modality::Text] {
        for l in 0..cfg.layers {
            assert!(deep.params().contains(&prompt_tensor_name(m, l)));
            assert_eq!(shallow.params().contains(&prompt_tensor_name(m, l)), l == 0);
        }
    }
    assert_eq!(
        count_parameters(&deep).trainable,
        (3 * (cfg.vision_width + cfg.text_width) * cfg.layers) as u64
    );
}

#[test]
fn full_scale_reduction_exceeds_ninety_nine_percent() {
    let report = param_report_for(&EncoderConfig::full_scale(), &PetlStrategy::mrs_adapter(64, 64)).unwrap();
    assert!(report.reduction_pct > 99.8);
    let ff = param_report_for(&EncoderConfig::full_scale(), &PetlStrategy::full_finetune()).unwrap();
    assert_eq!(ff.reduction_pct, 0.0);
    assert_eq!(ff.total, backbone_oracle(&EncoderConfig::full_scale()));
}
