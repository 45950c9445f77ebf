//! Square RGB images: PNG/JPEG decoding, bilinear resizing and the two
//! training augmentations (random crop, horizontal flip).

use image::{ImageBuffer, ImageEncoder, Rgb};
use rand::Rng;
use std::io::Cursor;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("image is {got}x{got}, expected {expected}x{expected}")]
    SizeMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Square RGB image, row-major, channels last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Self { size, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.size + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite_unit(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(size: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), size * size * 3, "byte buffer size");
        Self {
            size,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(
                &self.to_bytes(),
                self.size as u32,
                self.size as u32,
                image::ExtendedColorType::Rgb8,
            )
            .expect("in-memory png encoding");
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png())?;
        Ok(())
    }

    /// Decodes PNG or JPEG bytes and resizes to `size` (bilinear) if needed.
    pub fn decode(bytes: &[u8], size: usize) -> Result<Self, ImageError> {
        let dynamic = image::ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| ImageError::Decode(e.to_string()))?
            .decode()
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        let rgb = dynamic.to_rgb8();
        let (w, h) = rgb.dimensions();
        let src = RectImage {
            width: w as usize,
            height: h as usize,
            data: rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        };
        Ok(if w as usize == size && h as usize == size {
            Image {
                size,
                data: src.data,
            }
        } else {
            src.resize(size)
        })
    }

    pub fn load(path: &Path, size: usize) -> Result<Self, ImageError> {
        Self::decode(&std::fs::read(path)?, size)
    }

    pub fn to_rgb_buffer(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        ImageBuffer::from_raw(self.size as u32, self.size as u32, self.to_bytes())
            .expect("buffer size")
    }

    /// Bilinear sample at continuous pixel-centre coordinates, clamped.
    pub fn sample(&self, y: f64, x: f64) -> [f32; 3] {
        bilinear(&self.data, self.size, self.size, y, x)
    }

    /// Crops the square `[y0, y0+side) x [x0, x0+side)` and resizes to `out`.
    pub fn crop_resize(&self, y0: f64, x0: f64, side: f64, out: usize) -> Image {
        let mut img = Image::filled(out, [0.0; 3]);
        let step = side / out as f64;
        for y in 0..out {
            for x in 0..out {
                let sy = y0 + (y as f64 + 0.5) * step - 0.5;
                let sx = x0 + (x as f64 + 0.5) * step - 0.5;
                img.set(y, x, self.sample(sy, sx));
            }
        }
        img
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut img = self.clone();
        for y in 0..self.size {
            for x in 0..self.size {
                img.set(y, x, self.get(y, self.size - 1 - x));
            }
        }
        img
    }
}

struct RectImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RectImage {
    fn resize(&self, size: usize) -> Image {
        let mut img = Image::filled(size, [0.0; 3]);
        let sy = self.height as f64 / size as f64;
        let sx = self.width as f64 / size as f64;
        for y in 0..size {
            for x in 0..size {
                let py = (y as f64 + 0.5) * sy - 0.5;
                let px = (x as f64 + 0.5) * sx - 0.5;
                img.set(y, x, bilinear(&self.data, self.width, self.height, py, px));
            }
        }
        img
    }
}

fn bilinear(data: &[f32], width: usize, height: usize, y: f64, x: f64) -> [f32; 3] {
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let px = |yy: usize, xx: usize, c: usize| data[(yy * width + xx) * 3 + c];
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
        let bot = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Random-crop and horizontal-flip parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub crop_min_scale: f64,
    pub flip_probability: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            crop_min_scale: 0.8,
            flip_probability: 0.5,
        }
    }
}

impl Augment {
    pub fn apply<R: Rng>(&self, img: &Image, rng: &mut R) -> Image {
        let scale = if self.crop_min_scale < 1.0 {
            rng.random_range(self.crop_min_scale..=1.0)
        } else {
            1.0
        };
        let side = scale * img.size as f64;
        let slack = img.size as f64 - side;
        let y0 = rng.random::<f64>() * slack;
        let x0 = rng.random::<f64>() * slack;
        let flip = rng.random::<f64>() < self.flip_probability;
        let out = if scale < 1.0 {
            img.crop_resize(y0, x0, side, img.size)
        } else {
            img.clone()
        };
        if flip {
            out.flip_horizontal()
        } else {
            out
        }
    }
}
