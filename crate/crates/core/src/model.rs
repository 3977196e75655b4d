//! The joint artifact-reduction / super-resolution network.
//!
//! Layout: 3x3 head conv, context module, a trunk of residual-in-residual
//! dense blocks, a 3x3 trunk conv, the upsampler, and two 3x3 enhancement
//! convs. The network predicts a residual that is added to the bilinearly
//! upsampled input.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Ops};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ConvLayer, ParameterStore};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextVariant {
    /// Parallel dilated 3x3 convs, concatenated and fused by a 1x1 conv.
    Aspp,
    /// Residual non-local attention: `x + trunk(x) * sigmoid(mask(x))`, the
    /// mask branch built around an embedded-Gaussian non-local block.
    Nonlocal,
    /// The same dilated convs applied one after another, then a 1x1 conv.
    SequentialAtrous,
}

impl ContextVariant {
    pub const ALL: [ContextVariant; 3] = [
        ContextVariant::Aspp,
        ContextVariant::Nonlocal,
        ContextVariant::SequentialAtrous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextVariant::Aspp => "aspp",
            ContextVariant::Nonlocal => "nonlocal",
            ContextVariant::SequentialAtrous => "sequential_atrous",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("context_variant", format!("unknown variant `{s}`; valid: aspp, nonlocal, sequential_atrous")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleVariant {
    Pixelshuffle,
    /// Repeated nearest x2 upsampling followed by 3x3 convs.
    Upconvolution,
}

impl UpsampleVariant {
    pub const ALL: [UpsampleVariant; 2] = [UpsampleVariant::Pixelshuffle, UpsampleVariant::Upconvolution];

    pub fn name(self) -> &'static str {
        match self {
            UpsampleVariant::Pixelshuffle => "pixelshuffle",
            UpsampleVariant::Upconvolution => "upconvolution",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("upsample_variant", format!("unknown variant `{s}`; valid: pixelshuffle, upconvolution")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: usize,
    pub in_channels: usize,
    pub n_f: usize,
    pub num_rrdb: usize,
    pub dilations: Vec<i64>,
    pub context_variant: ContextVariant,
    pub upsample_variant: UpsampleVariant,
    pub growth_channels: usize,
    pub residual_scale: f64,
    pub with_car_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 4,
            in_channels: 3,
            n_f: 64,
            num_rrdb: 20,
            dilations: vec![1, 3, 4],
            context_variant: ContextVariant::Aspp,
            upsample_variant: UpsampleVariant::Pixelshuffle,
            growth_channels: 32,
            residual_scale: 0.2,
            with_car_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::config("scale", "must be >= 1"));
        }
        if self.in_channels < 1 {
            return Err(Error::config("in_channels", "must be >= 1"));
        }
        if self.n_f < 1 {
            return Err(Error::config("n_f", "must be >= 1"));
        }
        if self.growth_channels < 1 {
            return Err(Error::config("growth_channels", "must be >= 1"));
        }
        if !self.residual_scale.is_finite() {
            return Err(Error::config("residual_scale", "must be finite"));
        }
        if self.dilations.is_empty() {
            return Err(Error::config("dilations", "at least one dilation rate is required"));
        }
        if let Some(bad) = self.dilations.iter().find(|&&r| r < 1) {
            return Err(Error::config("dilations", format!("rate {bad} is not >= 1")));
        }
        let distinct: BTreeSet<_> = self.dilations.iter().collect();
        if distinct.len() != self.dilations.len() {
            return Err(Error::config("dilations", format!("rates {:?} contain a duplicate", self.dilations)));
        }
        if self.context_variant == ContextVariant::Nonlocal && self.n_f < 2 {
            return Err(Error::config("n_f", "the non-local module needs n_f >= 2"));
        }
        if self.upsample_variant == UpsampleVariant::Upconvolution && !self.scale.is_power_of_two() {
            return Err(Error::config("scale", "upconvolution needs a power-of-two scale"));
        }
        Ok(())
    }

    /// Largest span covered by a single dilated 3x3 conv.
    pub fn field_of_view(&self) -> i64 {
        self.dilations.iter().map(|r| 2 * r + 1).max().unwrap_or(0)
    }

    fn rates(&self) -> impl Iterator<Item = usize> + '_ {
        self.dilations.iter().map(|&r| r as usize)
    }

    /// Desk-scale architecture used for CPU training runs.
    pub fn desk() -> Self {
        ModelConfig {
            n_f: 32,
            num_rrdb: 4,
            ..ModelConfig::default()
        }
    }
}

/// Sampling offsets of a 3x3 kernel at dilation `r`: `{-r, 0, r}^2`.
pub fn dilation_offsets(r: i64) -> Result<BTreeSet<(i64, i64)>> {
    if r < 1 {
        return Err(Error::domain(format!("dilation rate {r} must be >= 1")));
    }
    let taps = [-r, 0, r];
    Ok(taps.iter().flat_map(|&y| taps.iter().map(move |&x| (y, x))).collect())
}

/// Every convolution of the architecture as `(name, out, in, kernel, dilation)`.
pub fn layer_plan(cfg: &ModelConfig) -> Result<Vec<(String, usize, usize, usize, usize)>> {
    cfg.validate()?;
    let (c, nf, gc, s) = (cfg.in_channels, cfg.n_f, cfg.growth_channels, cfg.scale);
    let mut plan = vec![("head".to_string(), nf, c, 3, 1)];
    match cfg.context_variant {
        ContextVariant::Aspp | ContextVariant::SequentialAtrous => {
            for r in cfg.rates() {
                plan.push((format!("context.atrous_r{r}"), nf, nf, 3, r));
            }
            let fuse_in = if cfg.context_variant == ContextVariant::Aspp {
                nf * cfg.dilations.len()
            } else {
                nf
            };
            plan.push(("context.fuse".into(), nf, fuse_in, 1, 1));
        }
        ContextVariant::Nonlocal => {
            let inner = nf / 2;
            for rb in ["context.trunk.rb1", "context.trunk.rb2", "context.mask.rb"] {
                plan.push((format!("{rb}.conv1"), nf, nf, 3, 1));
                plan.push((format!("{rb}.conv2"), nf, nf, 3, 1));
            }
            for emb in ["theta", "phi", "g"] {
                plan.push((format!("context.mask.nl.{emb}"), inner, nf, 1, 1));
            }
            plan.push(("context.mask.nl.out".into(), nf, inner, 1, 1));
            plan.push(("context.mask.gate".into(), nf, nf, 1, 1));
        }
    }
    for b in 0..cfg.num_rrdb {
        for d in 1..=3 {
            for k in 1..=5 {
                let out = if k == 5 { nf } else { gc };
                plan.push((format!("trunk.rrdb{b:02}.rdb{d}.conv{k}"), out, nf + (k - 1) * gc, 3, 1));
            }
        }
    }
    plan.push(("trunk_conv".into(), nf, nf, 3, 1));
    match cfg.upsample_variant {
        UpsampleVariant::Pixelshuffle => plan.push(("upsample.conv".into(), c * s * s, nf, 3, 1)),
        UpsampleVariant::Upconvolution => {
            for i in 1..=s.trailing_zeros() {
                plan.push((format!("upsample.stage{i}"), nf, nf, 3, 1));
            }
            plan.push(("upsample.to_image".into(), c, nf, 3, 1));
        }
    }
    plan.push(("enhance.conv1".into(), c, c, 3, 1));
    plan.push(("enhance.conv2".into(), c, c, 3, 1));
    if cfg.with_car_head {
        plan.push(("car_head".into(), c, nf, 3, 1));
    }
    Ok(plan)
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the layer name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Layers whose output feeds a leaky ReLU.
fn feeds_activation(name: &str) -> bool {
    name == "head"
        || name.starts_with("upsample.stage")
        || (name.starts_with("trunk.") && !name.ends_with("conv5"))
        || (name.starts_with("context.") && name.ends_with("conv1"))
}

/// Fan-in Kaiming-normal initialisation with zero biases. Layers followed by
/// a leaky ReLU use its gain, linear layers use unit gain. Trunk convs and the
/// last enhancement conv are scaled by 0.1 so the residual branch starts small.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    let leaky_gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let mut store = ParameterStore::new();
    for (name, out, inp, k, dil) in layer_plan(cfg)? {
        let mut layer = ConvLayer::<f32>::zeros(out, inp, k, dil);
        let gain = if feeds_activation(&name) { leaky_gain } else { 1.0 };
        let mut std = gain / ((inp * k * k) as f64).sqrt();
        if name.starts_with("trunk.") || name == "enhance.conv2" {
            std *= 0.1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
        for w in layer.weight.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = (z * std) as f32;
        }
        store.insert(name, layer)?;
    }
    Ok(store)
}

pub fn count_params<T: Real>(params: &ParameterStore<T>) -> usize {
    params.count_params()
}

/// Closed-form parameter count of a configuration.
pub fn planned_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(layer_plan(cfg)?
        .iter()
        .map(|(_, o, i, k, _)| o * i * k * k + o)
        .sum())
}

pub(crate) fn context<T: Real, O: Ops<T>>(ops: &mut O, cfg: &ModelConfig, f: &O::V) -> Result<O::V> {
    match cfg.context_variant {
        ContextVariant::Aspp => {
            let branches = cfg
                .rates()
                .map(|r| ops.conv(f, &format!("context.atrous_r{r}")))
                .collect::<Result<Vec<_>>>()?;
            let cat = ops.concat(&branches)?;
            ops.conv(&cat, "context.fuse")
        }
        ContextVariant::SequentialAtrous => {
            let mut cur = f.clone();
            for r in cfg.rates() {
                cur = ops.conv(&cur, &format!("context.atrous_r{r}"))?;
            }
            ops.conv(&cur, "context.fuse")
        }
        ContextVariant::Nonlocal => {
            let t = residual_block(ops, f, "context.trunk.rb1")?;
            let t = residual_block(ops, &t, "context.trunk.rb2")?;
            let theta = ops.conv(f, "context.mask.nl.theta")?;
            let phi = ops.conv(f, "context.mask.nl.phi")?;
            let g = ops.conv(f, "context.mask.nl.g")?;
            let y = ops.attention(&theta, &phi, &g)?;
            let y = ops.conv(&y, "context.mask.nl.out")?;
            let nl = ops.add(f, &y)?;
            let m = residual_block(ops, &nl, "context.mask.rb")?;
            let m = ops.conv(&m, "context.mask.gate")?;
            let m = ops.sigmoid(&m);
            let gated = ops.mul(&t, &m)?;
            ops.add(f, &gated)
        }
    }
}

fn residual_block<T: Real, O: Ops<T>>(ops: &mut O, x: &O::V, prefix: &str) -> Result<O::V> {
    let h = ops.conv(x, &format!("{prefix}.conv1"))?;
    let h = ops.leaky_relu(&h, LEAKY_SLOPE);
    let h = ops.conv(&h, &format!("{prefix}.conv2"))?;
    ops.add(x, &h)
}

fn dense_block<T: Real, O: Ops<T>>(ops: &mut O, x: &O::V, beta: f64, prefix: &str) -> Result<O::V> {
    let mut feats = vec![x.clone()];
    for k in 1..=4 {
        let input = if feats.len() == 1 { x.clone() } else { ops.concat(&feats)? };
        let h = ops.conv(&input, &format!("{prefix}.conv{k}"))?;
        feats.push(ops.leaky_relu(&h, LEAKY_SLOPE));
    }
    let cat = ops.concat(&feats)?;
    let h = ops.conv(&cat, &format!("{prefix}.conv5"))?;
    let h = ops.scale(&h, beta);
    ops.add(x, &h)
}

pub(crate) fn trunk_blocks<T: Real, O: Ops<T>>(ops: &mut O, cfg: &ModelConfig, f: &O::V) -> Result<O::V> {
    let beta = cfg.residual_scale;
    let mut cur = f.clone();
    for b in 0..cfg.num_rrdb {
        let mut h = cur.clone();
        for d in 1..=3 {
            h = dense_block(ops, &h, beta, &format!("trunk.rrdb{b:02}.rdb{d}"))?;
        }
        let h = ops.scale(&h, beta);
        cur = ops.add(&cur, &h)?;
    }
    Ok(cur)
}

pub(crate) fn upsample<T: Real, O: Ops<T>>(ops: &mut O, cfg: &ModelConfig, f: &O::V) -> Result<O::V> {
    let img = match cfg.upsample_variant {
        UpsampleVariant::Pixelshuffle => {
            let t = ops.conv(f, "upsample.conv")?;
            ops.pixel_shuffle(&t, cfg.scale)?
        }
        UpsampleVariant::Upconvolution => {
            let mut cur = f.clone();
            for i in 1..=cfg.scale.trailing_zeros() {
                let up = ops.upsample_nearest(&cur, 2);
                let h = ops.conv(&up, &format!("upsample.stage{i}"))?;
                cur = ops.leaky_relu(&h, LEAKY_SLOPE);
            }
            ops.conv(&cur, "upsample.to_image")?
        }
    };
    let e = ops.conv(&img, "enhance.conv1")?;
    ops.conv(&e, "enhance.conv2")
}

pub(crate) fn car_head<T: Real, O: Ops<T>>(ops: &mut O, f_ctx: &O::V, lr: &O::V) -> Result<O::V> {
    let h = ops.conv(f_ctx, "car_head")?;
    ops.add(lr, &h)
}

/// Values produced by one pass of the network.
pub struct Outputs<V> {
    /// Final HR estimate: bilinear upsample of the input plus the residual.
    pub hr: V,
    /// The learned HR residual alone.
    pub residual: V,
    /// LR-domain artifact-reduced estimate from the auxiliary head.
    pub lr_estimate: Option<V>,
}

pub(crate) fn network<T: Real, O: Ops<T>>(
    ops: &mut O,
    cfg: &ModelConfig,
    lr: &O::V,
    with_head: bool,
) -> Result<Outputs<O::V>> {
    let input = ops.value(lr);
    if input.channels() != cfg.in_channels {
        return Err(Error::shape(format!(
            "model expects {} input channels, got {}",
            cfg.in_channels,
            input.channels()
        )));
    }
    let base = kernels::bilinear_upsample(input, cfg.scale)?;
    let h = ops.conv(lr, "head")?;
    let h = ops.leaky_relu(&h, LEAKY_SLOPE);
    let ctx = context(ops, cfg, &h)?;
    let lr_estimate = if with_head {
        if !cfg.with_car_head {
            return Err(Error::config("with_car_head", "the LR reconstruction head is disabled"));
        }
        Some(car_head(ops, &ctx, lr)?)
    } else {
        None
    };
    let t = trunk_blocks(ops, cfg, &ctx)?;
    let t = ops.conv(&t, "trunk_conv")?;
    let residual = upsample(ops, cfg, &t)?;
    let base = ops.constant(base);
    let hr = ops.add(&base, &residual)?;
    Ok(Outputs {
        hr,
        residual,
        lr_estimate,
    })
}

fn expect_channels<T: Real>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if t.channels() != c {
        return Err(Error::shape(format!("{what} expects {c} channels, got {}", t.channels())));
    }
    Ok(())
}

/// `lr` is `N x c x h x w`; the result is `N x c x sh x sw`. No clamping.
pub fn forward<T: Real>(params: &ParameterStore<T>, cfg: &ModelConfig, lr: &Tensor<T>) -> Result<Tensor<T>> {
    let mut ops = Eager::new(params);
    Ok(network(&mut ops, cfg, lr, false)?.hr)
}

/// The learned residual added on top of the bilinear upsample.
pub fn sr_residual<T: Real>(params: &ParameterStore<T>, cfg: &ModelConfig, lr: &Tensor<T>) -> Result<Tensor<T>> {
    let mut ops = Eager::new(params);
    Ok(network(&mut ops, cfg, lr, false)?.residual)
}

pub fn context_extract<T: Real>(params: &ParameterStore<T>, cfg: &ModelConfig, f: &Tensor<T>) -> Result<Tensor<T>> {
    expect_channels(f, cfg.n_f, "context module")?;
    context(&mut Eager::new(params), cfg, f)
}

pub fn trunk<T: Real>(params: &ParameterStore<T>, cfg: &ModelConfig, f: &Tensor<T>) -> Result<Tensor<T>> {
    expect_channels(f, cfg.n_f, "trunk")?;
    trunk_blocks(&mut Eager::new(params), cfg, f)
}

pub fn upsample_enhance<T: Real>(params: &ParameterStore<T>, cfg: &ModelConfig, f: &Tensor<T>) -> Result<Tensor<T>> {
    expect_channels(f, cfg.n_f, "upsampler")?;
    upsample(&mut Eager::new(params), cfg, f)
}

/// LR-domain estimate from the context features plus a skip of the input image.
pub fn intermediate_car_head<T: Real>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    f_ctx: &Tensor<T>,
    lr: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !cfg.with_car_head {
        return Err(Error::config("with_car_head", "the LR reconstruction head is disabled"));
    }
    expect_channels(f_ctx, cfg.n_f, "car head")?;
    let mut ops = Eager::new(params);
    car_head(&mut ops, f_ctx, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(context: ContextVariant, up: UpsampleVariant) -> ModelConfig {
        ModelConfig {
            n_f: 8,
            num_rrdb: 1,
            growth_channels: 4,
            context_variant: context,
            upsample_variant: up,
            ..ModelConfig::default()
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    // Independent hand count of the documented layer inventory.
    fn hand_count(nf: usize, c: usize, s: usize, rrdb: usize, gc: usize) -> usize {
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let mut total = conv(nf, c, 3);
        total += 3 * conv(nf, nf, 3) + conv(nf, 3 * nf, 1);
        let rdb: usize = (1..=4).map(|k| conv(gc, nf + (k - 1) * gc, 3)).sum::<usize>() + conv(nf, nf + 4 * gc, 3);
        total += rrdb * 3 * rdb;
        total += conv(nf, nf, 3);
        total += conv(c * s * s, nf, 3);
        total += 2 * conv(c, c, 3);
        total
    }

    #[test]
    fn default_model_is_near_fifteen_million_parameters() {
        let n = planned_params(&ModelConfig::default()).unwrap();
        assert_eq!(n, hand_count(64, 3, 4, 20, 32));
        assert_eq!(n, 14_578_200);
        assert!((n as f64 - 14.8e6).abs() <= 0.1 * 14.8e6);
    }

    #[test]
    fn minimal_config_matches_hand_count() {
        let cfg = ModelConfig {
            num_rrdb: 0,
            n_f: 4,
            scale: 1,
            ..ModelConfig::default()
        };
        let store = build_model(&cfg, 0).unwrap();
        // head 3->4 (112), three atrous 4->4 (3*148), fuse 12->4 (52), trunk conv (148),
        // upsample 4->3 (111), two enhancement convs (2*84).
        assert_eq!(store.count_params(), 112 + 444 + 52 + 148 + 111 + 168);
        assert_eq!(store.count_params(), hand_count(4, 3, 1, 0, 32));
    }

    #[test]
    fn rejects_bad_dilations() {
        let dup = ModelConfig {
            dilations: vec![1, 1, 4],
            ..ModelConfig::default()
        };
        match build_model(&dup, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dilations"),
            other => panic!("expected config error, got {other:?}"),
        }
        let neg = ModelConfig {
            dilations: vec![1, -3, 4],
            ..ModelConfig::default()
        };
        assert!(matches!(build_model(&neg, 0), Err(Error::Config { field, .. }) if field == "dilations"));
    }

    #[test]
    fn default_dilations_cover_a_jpeg_block() {
        assert!(ModelConfig::default().field_of_view() >= 8);
        assert_eq!(dilation_offsets(4).unwrap().iter().map(|o| o.0).max(), Some(4));
        assert!(dilation_offsets(0).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny(ContextVariant::Aspp, UpsampleVariant::Pixelshuffle);
        assert_eq!(build_model(&cfg, 7).unwrap(), build_model(&cfg, 7).unwrap());
        assert_ne!(build_model(&cfg, 7).unwrap(), build_model(&cfg, 8).unwrap());
    }

    #[test]
    fn forward_shapes_for_every_variant() {
        let lr = random_image(6, 5, 1);
        for context in ContextVariant::ALL {
            for up in UpsampleVariant::ALL {
                let cfg = tiny(context, up);
                let p = build_model(&cfg, 1).unwrap();
                let out = forward(&p, &cfg, &lr).unwrap();
                assert_eq!(out.shape(), [1, 3, 24, 20]);
                assert!(out.all_finite());
            }
        }
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let cfg = tiny(ContextVariant::Aspp, UpsampleVariant::Pixelshuffle);
        let p = build_model(&cfg, 1).unwrap();
        let bad = Tensor::<f32>::zeros([1, 1, 4, 4]);
        assert!(matches!(forward(&p, &cfg, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_is_recovered_exactly() {
        let cfg = tiny(ContextVariant::Aspp, UpsampleVariant::Pixelshuffle);
        let p = build_model(&cfg, 3).unwrap();
        let lr = random_image(5, 7, 2);
        let out = forward(&p, &cfg, &lr).unwrap();
        let base = kernels::bilinear_upsample(&lr, 4).unwrap();
        let res = sr_residual(&p, &cfg, &lr).unwrap();
        let recombined = base.zip_map(&res, |a, b| a + b).unwrap();
        assert_eq!(out, recombined);
    }

    #[test]
    fn zero_enhancement_gives_bilinear() {
        let cfg = tiny(ContextVariant::Nonlocal, UpsampleVariant::Upconvolution);
        let mut p = build_model(&cfg, 3).unwrap();
        p.get_mut("enhance.conv2").unwrap().set_zero();
        let lr = random_image(4, 4, 9);
        let out = forward(&p, &cfg, &lr).unwrap();
        assert_eq!(out, kernels::bilinear_upsample(&lr, 4).unwrap());
    }

    #[test]
    fn context_identity_from_constructed_weights() {
        let cfg = ModelConfig {
            n_f: 4,
            num_rrdb: 0,
            ..ModelConfig::default()
        };
        let mut p = build_model(&cfg, 0).unwrap().cast::<f64>();
        for r in [1, 3, 4] {
            let l = p.get_mut(&format!("context.atrous_r{r}")).unwrap();
            l.set_zero();
            for c in 0..4 {
                let i = l.weight.offset(c, c, 1, 1);
                l.weight.data_mut()[i] = 1.0 / 3.0;
            }
        }
        let fuse = p.get_mut("context.fuse").unwrap();
        fuse.set_zero();
        for c in 0..4 {
            for b in 0..3 {
                let i = fuse.weight.offset(c, b * 4 + c, 0, 0);
                fuse.weight.data_mut()[i] = 1.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::<f64>::from_fn([1, 4, 9, 9], |_| rng.gen_range(-2.0..2.0));
        let out = context_extract(&p, &cfg, &f).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn trunk_identity_cases() {
        let cfg = ModelConfig {
            n_f: 8,
            num_rrdb: 0,
            ..ModelConfig::default()
        };
        let p = build_model(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::<f32>::from_fn([1, 8, 5, 5], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(trunk(&p, &cfg, &f).unwrap(), f);

        // All-zero convs make every dense block an identity, so one RRDB maps
        // x to x + residual_scale * x.
        let cfg1 = ModelConfig { num_rrdb: 1, ..cfg };
        let mut p1 = build_model(&cfg1, 0).unwrap().cast::<f64>();
        for (name, l) in p1.iter_mut() {
            if name.starts_with("trunk.") {
                l.set_zero();
            }
        }
        let f64in = f.cast::<f64>();
        let out = trunk(&p1, &cfg1, &f64in).unwrap();
        let expected = f64in.map(|v| v + 0.2 * v);
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn upsample_zero_enhancement_is_zero() {
        let cfg = tiny(ContextVariant::Aspp, UpsampleVariant::Pixelshuffle);
        let mut p = build_model(&cfg, 0).unwrap();
        p.get_mut("enhance.conv1").unwrap().set_zero();
        p.get_mut("enhance.conv2").unwrap().set_zero();
        let f = Tensor::<f32>::full([1, 8, 3, 3], 0.7);
        let out = upsample_enhance(&p, &cfg, &f).unwrap();
        assert_eq!(out.shape(), [1, 3, 12, 12]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixelshuffle_output_stage_is_smaller_than_upconvolution() {
        let stage = |up| {
            let cfg = ModelConfig {
                upsample_variant: up,
                ..ModelConfig::default()
            };
            let p = build_model(&cfg, 0).unwrap();
            p.count_params_with_prefix("upsample.")
        };
        assert_eq!(stage(UpsampleVariant::Pixelshuffle), 27_696);
        assert_eq!(stage(UpsampleVariant::Upconvolution), 2 * 36_928 + 1_731);
    }

    #[test]
    fn aspp_context_is_smaller_than_nonlocal() {
        let ctx = |v| {
            let cfg = ModelConfig {
                context_variant: v,
                ..ModelConfig::default()
            };
            build_model(&cfg, 0).unwrap().count_params_with_prefix("context.")
        };
        assert_eq!(ctx(ContextVariant::Aspp), 123_136);
        assert!(ctx(ContextVariant::Aspp) < ctx(ContextVariant::Nonlocal));
    }

    #[test]
    fn car_head_requires_flag_and_skips_input() {
        let cfg = ModelConfig {
            with_car_head: true,
            ..tiny(ContextVariant::Aspp, UpsampleVariant::Pixelshuffle)
        };
        let mut p = build_model(&cfg, 0).unwrap();
        p.get_mut("car_head").unwrap().set_zero();
        let lr = random_image(4, 4, 5);
        let f = Tensor::<f32>::full([1, 8, 4, 4], 0.3);
        assert_eq!(intermediate_car_head(&p, &cfg, &f, &lr).unwrap(), lr);
        let off = ModelConfig {
            with_car_head: false,
            ..cfg.clone()
        };
        assert!(matches!(intermediate_car_head(&p, &off, &f, &lr), Err(Error::Config { .. })));
    }
}
