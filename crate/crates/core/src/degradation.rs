//! Paired training data: HR crops, their clean bicubic LR counterparts, and
//! JPEG-compressed LR inputs.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ::image::ImageFormat;
use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{list_images, Image};
use crate::kernels;

/// Identity of the JPEG codec pair used for every degradation.
pub const CODEC_ID: &str = "jpeg-encoder-0.6.1 baseline 4:2:0 / zune-jpeg (image-0.25)";

/// Bicubic coefficient (`a = -0.5`, as in MATLAB `imresize`).
const CUBIC_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeKernel {
    BicubicAntialiased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeSpec {
    pub scale: usize,
    pub kernel: DegradeKernel,
    pub qf_min: u8,
    pub qf_max: u8,
    pub fixed_qf: Option<u8>,
    /// Side of the square HR crop.
    pub hr_patch: usize,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec {
            scale: 4,
            kernel: DegradeKernel::BicubicAntialiased,
            qf_min: 10,
            qf_max: 100,
            fixed_qf: None,
            hr_patch: 128,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::config("scale", "must be >= 1"));
        }
        if !(1 <= self.qf_min && self.qf_min <= self.qf_max && self.qf_max <= 100) {
            return Err(Error::config(
                "qf_min",
                format!("need 1 <= qf_min <= qf_max <= 100, got {}..{}", self.qf_min, self.qf_max),
            ));
        }
        if let Some(q) = self.fixed_qf {
            if !(1..=100).contains(&q) {
                return Err(Error::config("fixed_qf", format!("{q} not in 1..=100")));
            }
        }
        if self.hr_patch == 0 || self.hr_patch % self.scale != 0 {
            return Err(Error::config(
                "hr_patch",
                format!("{} must be a positive multiple of scale {}", self.hr_patch, self.scale),
            ));
        }
        Ok(())
    }

    pub fn lr_patch(&self) -> usize {
        self.hr_patch / self.scale
    }
}

/// One training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    /// Compressed LR input.
    pub lr: Image,
    /// Bicubic LR before compression; supervises the LR reconstruction head.
    pub lr_clean: Image,
    pub hr: Image,
    pub qf: u8,
    pub transform_id: u8,
}

fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let a = CUBIC_A;
    if ax <= 1.0 {
        (a + 2.0) * ax.powi(3) - (a + 3.0) * ax * ax + 1.0
    } else if ax < 2.0 {
        a * ax.powi(3) - 5.0 * a * ax * ax + 8.0 * a * ax - 4.0 * a
    } else {
        0.0
    }
}

fn mirror(j: i64, n: usize) -> usize {
    let n = n as i64;
    let mut j = j;
    loop {
        if j < 0 {
            j = -j - 1;
        } else if j >= n {
            j = 2 * n - 1 - j;
        } else {
            return j as usize;
        }
    }
}

/// Per-output-sample taps of a MATLAB-style bicubic resize along one axis.
/// Shrinking widens the kernel by the inverse scale (antialiasing).
fn resize_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let (stretch, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - width / 2.0).floor() as i64;
            let hi = (center + width / 2.0).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let w = stretch * cubic(stretch * (center - j as f64));
                if w == 0.0 {
                    continue;
                }
                total += w;
                let src = mirror(j, in_len);
                match taps.iter_mut().find(|(s, _)| *s == src) {
                    Some(t) => t.1 += w,
                    None => taps.push((src, w)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize (horizontal pass, then vertical), no clamping.
pub fn resize_bicubic(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bicubic resize to an empty image"));
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let xt = resize_taps(w, out_w);
    let yt = resize_taps(h, out_h);
    let mut mid = vec![0.0f64; c * h * out_w];
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..h {
            for (ox, taps) in xt.iter().enumerate() {
                mid[(ch * h + y) * out_w + ox] =
                    taps.iter().map(|&(s, wt)| wt * plane[y * w + s] as f64).sum();
            }
        }
    }
    Ok(Image::from_fn(c, out_h, out_w, |ch, oy, ox| {
        yt[oy]
            .iter()
            .map(|&(s, wt)| wt * mid[(ch * h + s) * out_w + ox])
            .sum::<f64>() as f32
    }))
}

/// Antialiased bicubic downscale by an integer factor, clamped to `[0, 1]`.
pub fn bicubic_downscale(img: &Image, s: usize) -> Result<Image> {
    if s == 0 {
        return Err(Error::domain("downscale factor must be >= 1"));
    }
    if img.height() % s != 0 || img.width() % s != 0 {
        return Err(Error::shape(format!(
            "{}x{} is not divisible by scale {s}; crop first",
            img.height(),
            img.width()
        )));
    }
    Ok(resize_bicubic(img, img.height() / s, img.width() / s)?.clamped())
}

/// Bicubic upscale by an integer factor (the classical baseline), clamped.
pub fn bicubic_upscale(img: &Image, s: usize) -> Result<Image> {
    if s == 0 {
        return Err(Error::domain("upscale factor must be >= 1"));
    }
    Ok(resize_bicubic(img, img.height() * s, img.width() * s)?.clamped())
}

/// Baseline JPEG encode at quality `qf` with 4:2:0 chroma, then decode.
/// The image is rounded to 8-bit sRGB before encoding.
pub fn jpeg_roundtrip(img: &Image, qf: u8) -> Result<Image> {
    if !(1..=100).contains(&qf) {
        return Err(Error::domain(format!("JPEG quality {qf} not in 1..=100")));
    }
    let bytes = jpeg_encode(img, qf)?;
    let decoded = ::image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(format!("JPEG decode: {e}")))?;
    Ok(Image::from_rgb8(&decoded.to_rgb8()))
}

pub fn jpeg_encode(img: &Image, qf: u8) -> Result<Vec<u8>> {
    let rgb = img.to_rgb8()?;
    let (w, h) = (img.width(), img.height());
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::shape(format!("{w}x{h} exceeds JPEG dimensions")));
    }
    let mut bytes = Vec::new();
    let mut enc = Encoder::new(&mut bytes, qf);
    enc.set_sampling_factor(SamplingFactor::R_4_2_0);
    enc.encode(rgb.as_raw(), w as u16, h as u16, ColorType::Rgb)
        .map_err(|e| Error::Codec(format!("JPEG encode: {e}")))?;
    Ok(bytes)
}

/// Composition `a ∘ b` (apply `b` first) in the transform-id numbering of
/// [`kernels::dihedral`].
pub fn dihedral_compose(a: u8, b: u8) -> u8 {
    let (ra, fa) = ((a % 4) as i32, a >= 4);
    let (rb, fb) = ((b % 4) as i32, b >= 4);
    // rot^ra flip^fa rot^rb flip^fb = rot^(ra ± rb) flip^(fa xor fb)
    let r = if fa { ra - rb } else { ra + rb }.rem_euclid(4) as u8;
    r + if fa != fb { 4 } else { 0 }
}

pub fn dihedral_image(img: &Image, id: u8) -> Result<Image> {
    let t = kernels::dihedral(&img.to_tensor::<f32>(), id as usize)?;
    Image::from_tensor(&t, 0)
}

/// Applies the same symmetry to every image of the pair.
pub fn augment_dihedral(pair: &PatchPair, transform_id: u8) -> Result<PatchPair> {
    if transform_id >= 8 {
        return Err(Error::domain(format!("transform id {transform_id} not in 0..8")));
    }
    Ok(PatchPair {
        lr: dihedral_image(&pair.lr, transform_id)?,
        lr_clean: dihedral_image(&pair.lr_clean, transform_id)?,
        hr: dihedral_image(&pair.hr, transform_id)?,
        qf: pair.qf,
        transform_id: dihedral_compose(transform_id, pair.transform_id),
    })
}

/// Where and how one training pair is cut from its source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub y: usize,
    pub x: usize,
    pub qf: u8,
    pub transform_id: u8,
}

pub fn draw_crop(height: usize, width: usize, spec: &DegradeSpec, rng: &mut impl Rng) -> Result<CropSpec> {
    let p = spec.hr_patch;
    if height < p || width < p {
        return Err(Error::domain(format!("{height}x{width} source is smaller than the {p}x{p} patch")));
    }
    let y = rng.gen_range(0..=height - p);
    let x = rng.gen_range(0..=width - p);
    let qf = match spec.fixed_qf {
        Some(q) => q,
        None => rng.gen_range(spec.qf_min..=spec.qf_max),
    };
    let transform_id = rng.gen_range(0..8u8);
    Ok(CropSpec { y, x, qf, transform_id })
}

/// Crop, transform, downscale, compress.
pub fn materialize(hr_img: &Image, spec: &DegradeSpec, crop: &CropSpec) -> Result<PatchPair> {
    let p = spec.hr_patch;
    let hr = dihedral_image(&hr_img.crop(crop.y, crop.x, p, p)?, crop.transform_id)?;
    let lr_clean = bicubic_downscale(&hr, spec.scale)?;
    let lr = jpeg_roundtrip(&lr_clean, crop.qf)?;
    Ok(PatchPair {
        lr,
        lr_clean,
        hr,
        qf: crop.qf,
        transform_id: crop.transform_id,
    })
}

pub fn synthesize_pair(hr_img: &Image, spec: &DegradeSpec, rng: &mut impl Rng) -> Result<PatchPair> {
    spec.validate()?;
    let crop = draw_crop(hr_img.height(), hr_img.width(), spec, rng)?;
    materialize(hr_img, spec, &crop)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    pub x: usize,
    pub y: usize,
    pub qf: u8,
    pub transform_id: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    seed: u64,
    spec: DegradeSpec,
    codec_id: String,
    count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec: DegradeSpec,
    pub codec_id: String,
    pub entries: Vec<ManifestEntry>,
}

/// Seed of the per-entry generator; entries are independent of each other.
pub fn entry_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub fn build_manifest(source_dir: &Path, spec: &DegradeSpec, seed: u64, count: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    let files = list_images(source_dir)?;
    if files.is_empty() {
        return Err(Error::Input(format!("no images in {}", source_dir.display())));
    }
    let mut sources = Vec::new();
    for f in files {
        let (w, h) = ::image::image_dimensions(&f)
            .map_err(|e| Error::Codec(format!("{}: {e}", f.display())))?;
        if h as usize >= spec.hr_patch && w as usize >= spec.hr_patch {
            sources.push((f, h as usize, w as usize));
        }
    }
    if sources.is_empty() {
        return Err(Error::domain(format!(
            "no image in {} is at least {}x{}",
            source_dir.display(),
            spec.hr_patch,
            spec.hr_patch
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(entry_seed(seed, i as u64));
        let (path, h, w) = &sources[rng.gen_range(0..sources.len())];
        let crop = draw_crop(*h, *w, spec, &mut rng)?;
        entries.push(ManifestEntry {
            source: path.to_string_lossy().into_owned(),
            x: crop.x,
            y: crop.y,
            qf: crop.qf,
            transform_id: crop.transform_id,
        });
    }
    Ok(DatasetManifest {
        seed,
        spec: spec.clone(),
        codec_id: CODEC_ID.to_string(),
        entries,
    })
}

impl DatasetManifest {
    /// Header line followed by one JSON record per entry.
    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            seed: self.seed,
            spec: self.spec.clone(),
            codec_id: self.codec_id.clone(),
            count: self.entries.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(f).lines();
        let bad = |reason: String| Error::Format { what: "manifest", reason };
        let header_line = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
        let mut entries = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| bad(format!("record {i}: {e}")))?);
        }
        if entries.len() != header.count {
            return Err(bad(format!("header promises {} records, found {}", header.count, entries.len())));
        }
        Ok(DatasetManifest {
            seed: header.seed,
            spec: header.spec,
            codec_id: header.codec_id,
            entries,
        })
    }

    /// Materializes every entry in order. Sources are decoded once each.
    pub fn materialize(&self) -> Result<Vec<PatchPair>> {
        let mut cache: Vec<(String, Image)> = Vec::new();
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let img = match cache.iter().position(|(s, _)| *s == e.source) {
                Some(i) => &cache[i].1,
                None => {
                    cache.push((e.source.clone(), Image::load(Path::new(&e.source))?));
                    &cache.last().expect("just pushed").1
                }
            };
            let crop = CropSpec {
                y: e.y,
                x: e.x,
                qf: e.qf,
                transform_id: e.transform_id,
            };
            out.push(materialize(img, &self.spec, &crop)?);
        }
        Ok(out)
    }

    /// Count of entries per quality factor (index = qf).
    pub fn qf_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; 101];
        for e in &self.entries {
            hist[e.qf as usize] += 1;
        }
        hist
    }
}

/// A full-image evaluation pair.
#[derive(Clone, Debug)]
pub struct TestPair {
    pub name: String,
    pub lr: Image,
    pub lr_clean: Image,
    pub hr: Image,
}

#[derive(Clone, Debug, Default)]
pub struct TestSet {
    pub pairs: Vec<TestPair>,
    /// Files that could not be used, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

/// Centre-crops each image to a multiple of `s`, downscales, and compresses at `qf`.
pub fn degrade_testset(dir: &Path, qf: u8, s: usize) -> Result<TestSet> {
    if !(1..=100).contains(&qf) {
        return Err(Error::domain(format!("JPEG quality {qf} not in 1..=100")));
    }
    let mut set = TestSet::default();
    for path in list_images(dir)? {
        let one = || -> Result<TestPair> {
            let hr = Image::load(&path)?.center_crop_multiple(s)?;
            let lr_clean = bicubic_downscale(&hr, s)?;
            let lr = jpeg_roundtrip(&lr_clean, qf)?;
            Ok(TestPair {
                name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                lr,
                lr_clean,
                hr,
            })
        };
        match one() {
            Ok(p) => set.pairs.push(p),
            Err(e) => set.failures.push((path.clone(), e.to_string())),
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn psnr(a: &Image, b: &Image) -> f64 {
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.data().len() as f64;
        10.0 * (1.0 / mse).log10()
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for k in 0..10 {
            let t = k as f64 / 10.0;
            let s: f64 = (-3..=3).map(|j| cubic(t - j as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn downscale_constant_and_shape() {
        let img = Image::filled(3, 128, 128, 0.4);
        let lr = bicubic_downscale(&img, 4).unwrap();
        assert_eq!((lr.height(), lr.width()), (32, 32));
        assert!(lr.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert!(matches!(bicubic_downscale(&Image::filled(3, 10, 12, 0.0), 4), Err(Error::Shape(_))));
    }

    #[test]
    fn downscale_by_one_is_identity() {
        let img = fixtures::synthetic_image(3, 20, 24);
        let same = bicubic_downscale(&img, 1).unwrap();
        assert!(same.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn jpeg_rejects_bad_quality() {
        let img = Image::filled(3, 8, 8, 0.5);
        assert!(matches!(jpeg_roundtrip(&img, 0), Err(Error::Domain(_))));
        assert!(jpeg_roundtrip(&img, 101).is_err());
    }

    #[test]
    fn jpeg_uniform_gray_is_nearly_exact() {
        let img = Image::filled(3, 32, 32, 128.0 / 255.0);
        let out = jpeg_roundtrip(&img, 90).unwrap();
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1.0 / 255.0));
    }

    #[test]
    fn jpeg_quality_orders_fidelity() {
        let img = fixtures::synthetic_image(11, 64, 64);
        let hi = jpeg_roundtrip(&img, 90).unwrap();
        let lo = jpeg_roundtrip(&img, 10).unwrap();
        assert!(psnr(&img, &hi) > psnr(&img, &lo));
    }

    #[test]
    fn synthesize_contract_and_determinism() {
        let src = fixtures::synthetic_image(5, 150, 170);
        let spec = DegradeSpec {
            fixed_qf: Some(40),
            ..DegradeSpec::default()
        };
        let a = synthesize_pair(&src, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synthesize_pair(&src, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.lr.height(), a.lr.width(), a.hr.height()), (32, 32, 128));
        assert_eq!(a.qf, 40);
        assert_eq!(bicubic_downscale(&a.hr, 4).unwrap(), a.lr_clean);
        let small = Image::filled(3, 100, 200, 0.0);
        assert!(matches!(synthesize_pair(&small, &spec, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Domain(_))));
    }

    #[test]
    fn qf_draws_are_uniform_on_average() {
        let spec = DegradeSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| draw_crop(128, 128, &spec, &mut rng).unwrap().qf as f64)
            .sum::<f64>()
            / n as f64;
        // discrete uniform on 10..=100: variance ((91^2) - 1) / 12
        let sigma = (((91.0f64 * 91.0 - 1.0) / 12.0) / n as f64).sqrt();
        assert!((mean - 55.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn dihedral_composition_matches_action() {
        let img = Image::from_fn(1, 2, 3, |_, y, x| (y * 3 + x) as f32);
        for a in 0..8u8 {
            for b in 0..8u8 {
                let seq = dihedral_image(&dihedral_image(&img, b).unwrap(), a).unwrap();
                let direct = dihedral_image(&img, dihedral_compose(a, b)).unwrap();
                assert_eq!(seq, direct, "{a} after {b}");
            }
        }
    }

    #[test]
    fn augment_identity_involution_and_distinctness() {
        let src = fixtures::synthetic_image(2, 64, 64);
        let spec = DegradeSpec {
            hr_patch: 32,
            fixed_qf: Some(50),
            ..DegradeSpec::default()
        };
        let pair = materialize(&src, &spec, &CropSpec { y: 3, x: 5, qf: 50, transform_id: 0 }).unwrap();
        assert_eq!(augment_dihedral(&pair, 0).unwrap(), pair);
        let flipped = augment_dihedral(&pair, 4).unwrap();
        assert_eq!(augment_dihedral(&flipped, 4).unwrap(), pair);
        let outs: Vec<_> = (0..8).map(|t| augment_dihedral(&pair, t).unwrap().hr).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(outs[i], outs[j]);
            }
        }
        assert!(augment_dihedral(&pair, 8).is_err());
    }
}
