//! Float RGB rasters and 8-bit PNG IO.

use std::path::Path;

use image::{ImageBuffer, Rgb, Rgba};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `H×W×3` image with values nominally in `[0, 1]`, stored as three planes.
///
/// Intermediate images (noisy inputs, network outputs) may leave the unit
/// range; clipping happens on save and before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    /// Planar data: channel-major, then rows.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    img.set(c, y, x, f(c, y, x));
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn row(&self, c: usize, y: usize) -> &[f32] {
        let start = (c * self.height + y) * self.width;
        &self.data[start..start + self.width]
    }

    pub fn row_mut(&mut self, c: usize, y: usize) -> &mut [f32] {
        let start = (c * self.height + y) * self.width;
        &mut self.data[start..start + self.width]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Self::new(height, width);
        for c in 0..3 {
            for y in 0..height {
                out.row_mut(c, y)
                    .copy_from_slice(&self.row(c, top + y)[left..left + width]);
            }
        }
        Ok(out)
    }

    pub fn clipped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 8-bit quantization as written to PNG: `round(clip(x, 0, 1) · 255)`.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    /// Reflect-pads (mirror without edge repeat) on the bottom and right.
    pub fn reflect_pad(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::Shape("padding target smaller than image".into()));
        }
        let reflect = |i: usize, n: usize| -> usize {
            // period 2(n-1): 0 1 .. n-1 n-2 .. 1 0 1 ..
            if n == 1 {
                return 0;
            }
            let p = 2 * (n - 1);
            let m = i % p;
            if m < n {
                m
            } else {
                p - m
            }
        };
        Ok(Self::from_fn(height, width, |c, y, x| {
            self.get(c, reflect(y, self.height), reflect(x, self.width))
        }))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Self::new(h, w);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb([0, 1, 2].map(|c| quantize(self.get(c, y as usize, x as usize))))
        });
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Horizontal strip of equally sized images, for visual comparisons.
    pub fn hstack(images: &[&Image]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Shape("empty stack".into()))?;
        let h = first.height;
        if images.iter().any(|i| i.height != h) {
            return Err(Error::Shape("hstack needs equal heights".into()));
        }
        let total: usize = images.iter().map(|i| i.width).sum();
        let mut out = Self::new(h, total);
        let mut left = 0;
        for img in images {
            for c in 0..3 {
                for y in 0..h {
                    out.row_mut(c, y)[left..left + img.width].copy_from_slice(img.row(c, y));
                }
            }
            left += img.width;
        }
        Ok(out)
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn save_rgba(path: &Path, rgb: &Image, alpha: &[f32]) -> Result<()> {
    let w = rgb.width();
    let buf = ImageBuffer::from_fn(w as u32, rgb.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgba([
            quantize(rgb.get(0, y, x)),
            quantize(rgb.get(1, y, x)),
            quantize(rgb.get(2, y, x)),
            quantize(alpha[y * w + x]),
        ])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn load_rgba(path: &Path) -> Result<(Image, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut rgb = Image::new(h, w);
    let mut alpha = vec![0.0; h * w];
    for (x, y, px) in rgba.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            rgb.set(c, y, x, px[c] as f32 / 255.0);
        }
        alpha[y * w + x] = px[3] as f32 / 255.0;
    }
    Ok((rgb, alpha))
}

/// Stacks same-sized images into a `[3, N, H, W]` tensor.
pub fn batch_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = first.dims();
    if images.iter().any(|i| i.dims() != (h, w)) {
        return Err(Error::Shape("batch images differ in size".into()));
    }
    let n = images.len();
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * n * plane];
    for c in 0..3 {
        for (b, img) in images.iter().enumerate() {
            let dst = &mut data[(c * n + b) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(img.plane(c)) {
                *d = T::lit(s as f64);
            }
        }
    }
    Tensor::from_vec(&[3, n, h, w], data)
}

/// Sample `b` of a `[3, N, H, W]` tensor.
pub fn tensor_to_image<T: Real>(t: &Tensor<T>, b: usize) -> Image {
    let (c, n, h, w) = t.dims4();
    assert_eq!(c, 3, "image tensors have three channels");
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        data.extend(t.data()[(c * n + b) * plane..][..plane].iter().map(|v| v.f64() as f32));
    }
    Image::from_planar(h, w, data).expect("tensor plane size")
}
