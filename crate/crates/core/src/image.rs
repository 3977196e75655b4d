//! Planar float RGB images in `[0, 1]` and their 8-bit file representations.

use std::path::Path;

use ::image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Channels x height x width, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!("image must be non-empty, got {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image::from_fn(channels, height, width, |_, _, _| value)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Image> {
        if y + height > self.height || x + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({y}, {x}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, height, width, |c, yy, xx| self.at(c, y + yy, x + xx)))
    }

    /// Largest centred crop whose sides are multiples of `s`.
    pub fn center_crop_multiple(&self, s: usize) -> Result<Image> {
        let h = self.height - self.height % s;
        let w = self.width - self.width % s;
        if h == 0 || w == 0 {
            return Err(Error::shape(format!("{}x{} image smaller than scale {s}", self.height, self.width)));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Rounds to the nearest 8-bit level, as when written to a lossless file.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::<f32>::from_vec([1, self.channels, self.height, self.width], self.data.clone())
            .expect("image dims consistent")
            .cast()
    }

    /// Takes batch item `n` of a tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Image> {
        let [_, c, h, w] = t.shape();
        Image::new(c, h, w, t.item(n).iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
    }

    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::shape(format!("8-bit RGB export needs 3 channels, got {}", self.channels)));
        }
        let (w, h) = (self.width as u32, self.height as u32);
        Ok(RgbImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            ::image::Rgb([to_u8(self.at(0, y, x)), to_u8(self.at(1, y, x)), to_u8(self.at(2, y, x))])
        }))
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Image::from_fn(3, h, w, |c, y, x| img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0)
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let dynamic = ::image::load_from_memory(&bytes)
            .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
        Ok(Image::from_rgb8(&dynamic.to_rgb8()))
    }

    /// Clamps to `[0, 1]`, quantizes to 8 bits, and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// True for file extensions the loaders understand.
pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Sorted list of image files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image_path(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 5, 7, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn center_crop_to_multiple() {
        let img = Image::filled(3, 10, 13, 0.5);
        let c = img.center_crop_multiple(4).unwrap();
        assert_eq!((c.height(), c.width()), (8, 12));
        assert!(Image::filled(3, 3, 3, 0.0).center_crop_multiple(4).is_err());
    }
}
