//! RGB images in `[0, 1]`, file I/O (PNG, JPEG, PNM) and bilinear resampling.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Affine, Point};

/// Three-channel image stored row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// Black image.
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Image { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image", format!("{}x{}x3 needs {} values, got {}", width, height, width * height * 3, data.len())));
        }
        Ok(Image { width, height, data })
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Bilinear sample at a real-valued position; zero outside the image.
    pub fn sample(&self, x: f64, y: f64, out: &mut [f32; 3]) {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        *out = [0.0; 3];
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let yy = y0 + dy;
            if wy == 0.0 || yy < 0 || yy >= self.height as i64 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let xx = x0 + dx;
                if wx == 0.0 || xx < 0 || xx >= self.width as i64 {
                    continue;
                }
                let base = (yy as usize * self.width + xx as usize) * 3;
                let w = wx * wy;
                for (o, &v) in out.iter_mut().zip(&self.data[base..base + 3]) {
                    *o += w * v;
                }
            }
        }
    }

    /// Resamples into a `width x height` image; `inv` maps output pixel
    /// coordinates back to this image.
    pub fn warp(&self, width: usize, height: usize, inv: &Affine) -> Image {
        let mut out = Image::new(width, height);
        let mut px = [0.0f32; 3];
        for y in 0..height {
            for x in 0..width {
                let p = inv.apply(Point::new(x as f64, y as f64));
                self.sample(p.x, p.y, &mut px);
                let base = (y * width + x) * 3;
                out.data[base..base + 3].copy_from_slice(&px);
            }
        }
        out
    }

    /// Planar copy `[3, H, W]`.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    /// Decodes PNG, JPEG or PNM bytes; grayscale is replicated to RGB.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
        let rgb = image::load_from_memory(bytes).map_err(|e| e.to_string())?.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(Image { width: w, height: h, data })
    }

    /// Loads a PNG, JPEG or PNM file, format chosen by content.
    pub fn load(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode(&bytes).map_err(|detail| Error::Image { path: path.to_path_buf(), detail })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let img = Image::from_fn(5, 3, |x, y, c| ((x + 2 * y + 7 * c) % 6) as f32 / 5.0);
        let back = Image::decode(&img.to_ppm()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn ascii_ppm_with_comment() {
        let img = Image::decode(b"P3\n# c\n2 1\n255\n255 0 0  0 0 255\n").unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn png_grayscale_decode() {
        let gray = image::GrayImage::from_raw(2, 2, vec![0, 255, 51, 102]).unwrap();
        let mut bytes = Vec::new();
        gray.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
        let img = Image::decode(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.get(1, 0, 2), 1.0);
        assert!((img.get(0, 1, 0) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn jpeg_decode() {
        let rgb = image::RgbImage::from_pixel(8, 8, image::Rgb([200, 40, 90]));
        let mut bytes = Vec::new();
        rgb.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Jpeg).unwrap();
        let img = Image::decode(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (8, 8));
        assert!((img.get(3, 3, 0) - 200.0 / 255.0).abs() < 0.03);
    }

    #[test]
    fn bilinear_midpoint_and_border() {
        let img = Image::from_fn(2, 1, |x, _, _| x as f32);
        let mut px = [0.0; 3];
        img.sample(0.5, 0.0, &mut px);
        assert_eq!(px, [0.5; 3]);
        img.sample(1.5, 0.0, &mut px);
        assert_eq!(px, [0.5; 3]);
        img.sample(-3.0, 0.0, &mut px);
        assert_eq!(px, [0.0; 3]);
    }

    #[test]
    fn planar_layout() {
        let img = Image::from_fn(2, 1, |x, _, c| (10 * c + x) as f32);
        assert_eq!(img.to_planar(), vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
    }
}
