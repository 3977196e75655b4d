#![allow(dead_code)]

use carsr::degradation::{synthesize_pair, DegradeSpec, PatchPair};
use carsr::fixtures::synthetic_image;
use carsr::model::{self, ModelConfig};
use carsr::training::{loss_and_grads, LossKind};
use carsr::{ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_f: 8,
        num_rrdb: 1,
        growth_channels: 4,
        ..ModelConfig::default()
    }
}

/// `n` training pairs cut from distinct 96x96 synthetic images.
pub fn patch_pairs(n: usize, hr_patch: usize, seed: u64) -> Vec<PatchPair> {
    let spec = DegradeSpec {
        hr_patch,
        ..DegradeSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| synthesize_pair(&synthetic_image(seed * 1000 + i as u64, 96, 96), &spec, &mut rng).unwrap())
        .collect()
}

fn value_at(p: &ParameterStore<f64>, layer: &str, i: usize) -> f64 {
    *p.get(layer).unwrap().values().nth(i).unwrap()
}

fn set_value(p: &mut ParameterStore<f64>, layer: &str, i: usize, v: f64) {
    *p.get_mut(layer).unwrap().values_mut().nth(i).unwrap() = v;
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central differences on `samples` parameters drawn uniformly from the whole
/// network, in f64 with an 8x8 input and MSE loss. The relative error of each
/// entry is `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// The x0.1 shrink of the residual-branch init is undone first: with it, deep
/// trunk gradients sit near 1e-9, where difference quotients are mostly
/// rounding noise.
pub fn gradient_check(cfg: &ModelConfig, lambda: f64, samples: usize, seed: u64) -> GradCheck {
    let mut params: ParameterStore<f64> = model::build_model(cfg, seed).unwrap().cast();
    for (name, layer) in params.iter_mut() {
        if name.starts_with("trunk.") || name == "enhance.conv2" {
            layer.weight = layer.weight.map(|w| w * 10.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let s = cfg.scale;
    let lr = random_tensor([1, 3, 8, 8], &mut rng);
    let hr = random_tensor([1, 3, 8 * s, 8 * s], &mut rng);
    let clean = random_tensor([1, 3, 8, 8], &mut rng);
    let clean = (lambda > 0.0).then_some(&clean);
    let loss = |p: &ParameterStore<f64>| loss_and_grads(p, cfg, &lr, &hr, clean, lambda, LossKind::Mse).unwrap();
    let (_, grads) = loss(&params);

    let layers: Vec<(String, usize)> = params.iter().map(|(n, l)| (n.clone(), l.param_count())).collect();
    let total: usize = layers.iter().map(|(_, c)| c).sum();
    let h = 1e-5;
    let mut out = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut work = params.clone();
    for _ in 0..samples {
        let mut k = rng.gen_range(0..total);
        let (name, idx) = layers
            .iter()
            .find_map(|(n, c)| if k < *c { Some((n.clone(), k)) } else { k -= c; None })
            .unwrap();
        let p0 = value_at(&params, &name, idx);
        set_value(&mut work, &name, idx, p0 + h);
        let up = loss(&work).0.total;
        set_value(&mut work, &name, idx, p0 - h);
        let dn = loss(&work).0.total;
        set_value(&mut work, &name, idx, p0);
        let numeric = (up - dn) / (2.0 * h);
        let analytic = value_at(&grads, &name, idx);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > out.max_rel {
            out.max_rel = rel;
            out.worst = format!("{name}[{idx}]: analytic {analytic:e}, numeric {numeric:e}");
        }
        out.checked += 1;
    }
    out
}
