//! Grayscale raster used by the matchers.
//!
//! Pixel `(x, y)` sits at continuous coordinate `(x, y)`; bilinear sampling
//! outside the frame returns zero.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{Area, ImageDims};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: ::image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: ::image::ImageError,
    },
    #[error("buffer of {len} values does not match {width}x{height}")]
    BadBuffer { len: usize, width: usize, height: usize },
    #[error("image has zero size")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty);
        }
        if data.len() != width * height {
            return Err(ImageError::BadBuffer {
                len: data.len(),
                width,
                height,
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Load any raster the `image` crate understands and convert to luma.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = ::image::open(path).map_err(|source| ImageError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        let data = luma.into_raw().into_iter().map(f32::from).collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Save as 8-bit PNG, rounding and clamping to `[0, 255]`.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        let buf = ::image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or(ImageError::Empty)?;
        buf.save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|source| ImageError::Write {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims {
            width: self.width as u32,
            height: self.height as u32,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample; zero outside the frame.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let px = |xx: i64, yy: i64| -> f32 {
            if xx < 0 || yy < 0 || xx >= self.width as i64 || yy >= self.height as i64 {
                0.0
            } else {
                self.data[yy as usize * self.width + xx as usize]
            }
        };
        let top = px(xi, yi) * (1.0 - fx) + px(xi + 1, yi) * fx;
        let bottom = px(xi, yi + 1) * (1.0 - fx) + px(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Integer crop; `area` must lie inside the image.
    pub fn crop(&self, area: &Area) -> GrayImage {
        let (x0, y0) = (area.x_min() as usize, area.y_min() as usize);
        let (w, h) = (area.width() as usize, area.height() as usize);
        GrayImage::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    /// Resample the continuous window `[x0, x0 + w) x [y0, y0 + h)` onto an
    /// `out_w x out_h` grid with pixel-center alignment. When shrinking, the
    /// source is box-averaged over the footprint of each output pixel.
    pub fn resample_window(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> GrayImage {
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        let taps_x = sx.ceil().max(1.0) as usize;
        let taps_y = sy.ceil().max(1.0) as usize;
        GrayImage::from_fn(out_w, out_h, |u, v| {
            let cx = x0 + (u as f64 + 0.5) * sx - 0.5;
            let cy = y0 + (v as f64 + 0.5) * sy - 0.5;
            if taps_x == 1 && taps_y == 1 {
                return self.sample(cx, cy);
            }
            let mut acc = 0.0f32;
            for ty in 0..taps_y {
                let oy = ((ty as f64 + 0.5) / taps_y as f64 - 0.5) * sy;
                for tx in 0..taps_x {
                    let ox = ((tx as f64 + 0.5) / taps_x as f64 - 0.5) * sx;
                    acc += self.sample(cx + ox, cy + oy);
                }
            }
            acc / (taps_x * taps_y) as f32
        })
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> GrayImage {
        self.resample_window(0.0, 0.0, self.width as f64, self.height as f64, out_w, out_h)
    }
}
