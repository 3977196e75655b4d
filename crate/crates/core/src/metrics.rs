//! Y-channel PSNR / SSIM, dihedral self-ensembling, and dataset evaluation.

use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::degradation::TestPair;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels;
use crate::model::{self, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// Infinite PSNR values are replaced by this when averaging.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// A single-channel plane on the 0-255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn shaved(&self, shave: usize) -> Result<Plane> {
        if 2 * shave >= self.height || 2 * shave >= self.width {
            return Err(Error::domain(format!(
                "shave {shave} leaves nothing of a {}x{} image",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height - 2 * shave, self.width - 2 * shave);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let row = (y + shave) * self.width + shave;
            data.extend_from_slice(&self.data[row..row + w]);
        }
        Ok(Plane { height: h, width: w, data })
    }
}

/// BT.601 luma, `16 + 65.481 R + 128.553 G + 24.966 B`, computed from the float image.
pub fn rgb_to_y(img: &Image) -> Result<Plane> {
    if img.channels() != 3 {
        return Err(Error::shape(format!("luma needs 3 channels, got {}", img.channels())));
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..r.len())
        .map(|i| 16.0 + 65.481 * r[i] as f64 + 128.553 * g[i] as f64 + 24.966 * b[i] as f64)
        .collect();
    Ok(Plane {
        height: img.height(),
        width: img.width(),
        data,
    })
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return Err(Error::shape(format!(
            "metric inputs differ: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// PSNR on 0-255 planes; `+inf` for identical inputs.
pub fn psnr(a: &Plane, b: &Plane) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!(
            "planes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

pub fn psnr_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    same_dims(a, b)?;
    psnr(&rgb_to_y(a)?.shaved(shave)?, &rgb_to_y(b)?.shaved(shave)?)
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11x11 Gaussian windows fully inside the planes.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!(
            "planes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    if a.data == b.data {
        return Ok(1.0);
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (h, w) = (a.height, a.width);
    let f = |p: &[f64]| filter_valid(p, h, w, &taps);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, mu_b) = (f(&a.data), f(&b.data));
    let (aa, bb, ab) = (f(&prod(&a.data, &a.data)), f(&prod(&b.data, &b.data)), f(&prod(&a.data, &b.data)));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    same_dims(a, b)?;
    ssim(&rgb_to_y(a)?.shaved(shave)?, &rgb_to_y(b)?.shaved(shave)?)
}

/// Average of `T^-1(forward(T(lr)))` over the eight dihedral transforms.
pub fn self_ensemble<T: Real>(params: &ParameterStore<T>, cfg: &ModelConfig, lr: &Tensor<T>) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for id in 0..8 {
        let y = model::forward(params, cfg, &kernels::dihedral(lr, id)?)?;
        let back = kernels::dihedral(&y, kernels::dihedral_inverse(id))?;
        match acc.as_mut() {
            None => acc = Some(back),
            Some(a) => a.add_assign(&back),
        }
    }
    let eighth = T::lit(0.125);
    Ok(acc.expect("eight transforms").map(|v| v * eighth))
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("bad dB value {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    /// `"inf"` in JSON for identical images.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub runtime: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_image: Vec<ImageScore>,
    /// Mean with infinite entries capped at [`PSNR_CAP`]; `"inf"` if every entry was infinite.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mean_psnr_y: f64,
    pub mean_ssim_y: f64,
    pub runtime_total: f64,
    pub params: usize,
    pub shave: usize,
    /// Images that failed, with the reason; excluded from the means.
    pub failures: Vec<(String, String)>,
}

impl EvalResult {
    fn from_scores(per_image: Vec<ImageScore>, failures: Vec<(String, String)>, runtime_total: f64, params: usize, shave: usize) -> Self {
        let n = per_image.len().max(1) as f64;
        let all_inf = !per_image.is_empty() && per_image.iter().all(|s| s.psnr_y.is_infinite());
        let mean_psnr_y = if all_inf {
            f64::INFINITY
        } else {
            per_image.iter().map(|s| s.psnr_y.min(PSNR_CAP)).sum::<f64>() / n
        };
        let mean_ssim_y = per_image.iter().map(|s| s.ssim_y).sum::<f64>() / n;
        EvalResult {
            per_image,
            mean_psnr_y,
            mean_ssim_y,
            runtime_total,
            params,
            shave,
            failures,
        }
    }
}

/// Scores `predict(lr)` against each HR image. Only the predictor is timed.
/// Outputs are clamped to `[0, 1]` before scoring.
pub fn evaluate_with(
    pairs: &[TestPair],
    shave: usize,
    params: usize,
    mut predict: impl FnMut(&TestPair) -> Result<Image>,
) -> Result<EvalResult> {
    if pairs.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    let mut runtime_total = 0.0;
    for p in pairs {
        let t0 = Instant::now();
        let pred = predict(p);
        let dt = t0.elapsed().as_secs_f64();
        runtime_total += dt;
        let scored = pred.and_then(|img| {
            let img = img.clamped();
            Ok((psnr_y(&img, &p.hr, shave)?, ssim_y(&img, &p.hr, shave)?))
        });
        match scored {
            Ok((psnr_y, ssim_y)) => scores.push(ImageScore {
                name: p.name.clone(),
                psnr_y,
                ssim_y,
                runtime: dt,
            }),
            Err(e) => failures.push((p.name.clone(), e.to_string())),
        }
    }
    Ok(EvalResult::from_scores(scores, failures, runtime_total, params, shave))
}

/// Runs the network (optionally self-ensembled) on every pair's compressed LR image.
pub fn evaluate_dataset(
    params: &ParameterStore<f32>,
    cfg: &ModelConfig,
    pairs: &[TestPair],
    ensembled: bool,
    shave: usize,
) -> Result<EvalResult> {
    evaluate_with(pairs, shave, model::count_params(params), |p| {
        let lr = p.lr.to_tensor::<f32>();
        let out = if ensembled {
            self_ensemble(params, cfg, &lr)?
        } else {
            model::forward(params, cfg, &lr)?
        };
        Image::from_tensor(&out, 0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_coefficients() {
        let y = |r, g, b| rgb_to_y(&Image::from_fn(3, 1, 1, |c, _, _| [r, g, b][c])).unwrap().data[0];
        assert!((y(1.0, 1.0, 1.0) - 235.0).abs() < 1e-9);
        assert_eq!(y(0.0, 0.0, 0.0), 16.0);
        assert!((y(0.0, 1.0, 0.0) - 144.553).abs() < 1e-9);
        assert!(rgb_to_y(&Image::filled(1, 2, 2, 0.0)).is_err());
    }

    #[test]
    fn psnr_known_values() {
        let a = Plane { height: 4, width: 4, data: vec![100.0; 16] };
        let b = Plane { height: 4, width: 4, data: vec![125.5; 16] };
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let img = Image::filled(3, 8, 8, 0.3);
        assert!(matches!(psnr_y(&img, &img, 4), Err(Error::Domain(_))));
        assert!(matches!(psnr_y(&img, &Image::filled(3, 8, 9, 0.3), 0), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_small_input_rejected_and_inverse_negative() {
        let a = Image::filled(3, 12, 12, 0.5);
        assert!(matches!(ssim_y(&a, &a, 1), Err(Error::Domain(_))));
        let tex = Image::from_fn(3, 32, 32, |_, y, x| if (y / 2 + x / 3) % 2 == 0 { 0.1 } else { 0.9 });
        let pa = rgb_to_y(&tex).unwrap();
        let pb = Plane { data: pa.data.iter().map(|v| 255.0 - v).collect(), ..pa.clone() };
        assert!(ssim(&pa, &pb).unwrap() < 0.0);
    }

    #[test]
    fn infinite_psnr_serializes_as_inf() {
        let r = EvalResult::from_scores(
            vec![ImageScore { name: "a".into(), psnr_y: f64::INFINITY, ssim_y: 1.0, runtime: 0.0 }],
            vec![],
            0.0,
            0,
            4,
        );
        let js = serde_json::to_string(&r).unwrap();
        assert!(js.contains("\"psnr_y\":\"inf\""));
        let back: EvalResult = serde_json::from_str(&js).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn capped_mean() {
        let s = |p| ImageScore { name: String::new(), psnr_y: p, ssim_y: 0.5, runtime: 0.0 };
        let r = EvalResult::from_scores(vec![s(f64::INFINITY), s(30.0)], vec![], 0.0, 0, 4);
        assert_eq!(r.mean_psnr_y, 65.0);
    }
}
