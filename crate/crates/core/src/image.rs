//! RGB pixel grids with values in `[0, 1]`, plus PNG conversion.

use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};

/// Planar RGB image, channel-major (`3 × height × width`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for a {width}x{height} RGB image, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Builds an image from a per-pixel function returning RGB.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut data = vec![0.0; 3 * width * height];
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                for c in 0..3 {
                    data[c * width * height + y * width + x] = px[c];
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn mean_abs_diff(&self, other: &RgbImage) -> Result<f64> {
        self.check_same_size(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// `‖self − reference‖₂ / ‖reference‖₂`.
    pub fn relative_l2(&self, reference: &RgbImage) -> Result<f64> {
        self.check_same_size(reference)?;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (a, b) in self.data.iter().zip(&reference.data) {
            let (a, b) = (*a as f64, *b as f64);
            num += (a - b) * (a - b);
            den += b * b;
        }
        Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
    }

    fn check_same_size(&self, other: &RgbImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.pixel(x as usize, y as usize);
            image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(w, h, |x, y| {
            let p = img.get_pixel(x as u32, y as u32).0;
            p.map(|v| v as f32 / 255.0)
        })
    }

    /// Interleaved RGBA bytes, as consumed by a browser `ImageData`.
    pub fn to_rgba8_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.pixel(x, y);
                out.extend(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
                out.push(255);
            }
        }
        out
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Bilinear resize to `size × size`; a no-op when already that size.
    pub fn resized_square(&self, size: usize) -> Self {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let resized = image::imageops::resize(
            &self.to_rgb8(),
            size as u32,
            size as u32,
            FilterType::Triangle,
        );
        Self::from_rgb8(&resized)
    }
}

/// A synthetic scene: dark sky over grass with a solid object in `object`
/// (normalised `x0, y0, x1, y1`). Colours are exact 8-bit values.
pub fn sample_scene(size: usize, object: [f64; 4]) -> RgbImage {
    let q = |v: u8| v as f32 / 255.0;
    RgbImage::from_fn(size, size, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
        if u >= object[0] && u <= object[2] && v >= object[1] && v <= object[3] {
            [q(220), q(30), q(30)]
        } else if v < 0.5 {
            [q(40), q(40), q(40)]
        } else {
            [q(40), q(200), q(40)]
        }
    })
}

/// Writes a single-channel grid in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(Error::from)
}
