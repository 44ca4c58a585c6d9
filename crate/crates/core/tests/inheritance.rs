mod common;

use common::criteria;
use common::tiny_spec;
use growclip::growth::{inherit_source, pim_init, PimConfig, Source};
use growclip::model::{build_model, init_tensor, param_layout, GrowthFactor};
use growclip::Error;

#[test]
fn identity_inheriting_preserves_outputs() {
    let o = criteria::pim_identity();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn appended_blocks_blend_the_last_block() {
    let o = criteria::pim_blend();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn new_heads_are_fresh_at_standard_scale() {
    let old_spec = tiny_spec(0);
    let target = old_spec.clone().with_factor(GrowthFactor::HeadsImg, 6);
    let cfg = PimConfig { beta: 0.3, gamma: 0.001, rand_seed: 5 };
    let old = build_model::<f64>(&old_spec, 2).unwrap();
    let new = pim_init(&old, &target, &cfg).unwrap();
    let old_width = old_spec.width_img();
    for p in param_layout(&target).into_iter().filter(|p| p.name.ends_with("attn.wq")) {
        let fresh = init_tensor::<f64>(&p, cfg.rand_seed);
        let (o, n) = (old.tensor(&p.name).unwrap(), new.tensor(&p.name).unwrap());
        let cols = p.shape[1];
        for i in 0..p.shape[0] {
            for j in 0..cols {
                let k = i * cols + j;
                let want = if i < old_width && j < old_width {
                    0.3 * o.data()[i * old_width + j] + 0.001 * fresh.data()[k]
                } else {
                    fresh.data()[k]
                };
                assert!((n.data()[k] - want).abs() < 1e-12, "{} [{i},{j}]", p.name);
            }
        }
    }
}

#[test]
fn shared_encoder_appearing_is_fresh() {
    let old = tiny_spec(0);
    assert_eq!(inherit_source("shared.block.0.attn.wq", &old), Source::Fresh);
    assert_eq!(inherit_source("txt.adapter", &old), Source::Fresh);
    assert_eq!(inherit_source("img.block.3.mlp.w1", &old), Source::Old("img.block.1.mlp.w1".into()));
}

#[test]
fn shrinking_is_a_growth_direction_error() {
    let big = build_model::<f32>(&tiny_spec(2), 1).unwrap();
    let err = pim_init(&big, &tiny_spec(0), &PimConfig::default()).unwrap_err();
    assert!(matches!(err, Error::GrowthDirection(_)), "{err}");
}
