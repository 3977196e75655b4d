mod common;

use carsr::{ContextVariant, ModelConfig, UpsampleVariant};
use common::{gradient_check, tiny_model};

fn check(cfg: ModelConfig, lambda: f64) {
    let r = gradient_check(&cfg, lambda, 50, 11);
    assert_eq!(r.checked, 50);
    assert!(r.max_rel < 1e-3, "max relative error {:e} at {}", r.max_rel, r.worst);
}

#[test]
fn base_network() {
    check(tiny_model(), 0.0);
}

#[test]
fn with_lr_reconstruction_head() {
    check(ModelConfig { with_car_head: true, ..tiny_model() }, 16.0);
}

#[test]
fn nonlocal_context() {
    check(ModelConfig { context_variant: ContextVariant::Nonlocal, ..tiny_model() }, 0.0);
}

#[test]
fn sequential_atrous_with_upconvolution() {
    check(
        ModelConfig {
            context_variant: ContextVariant::SequentialAtrous,
            upsample_variant: UpsampleVariant::Upconvolution,
            ..tiny_model()
        },
        0.0,
    );
}
