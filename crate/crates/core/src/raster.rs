//! In-memory rasters shared by every stage of the pipeline.
//!
//! Intensities are stored as `f32` in `[0, 1]` regardless of the on-disk bit
//! depth, row-major, channel-interleaved. Binary masks are a separate type.

use std::path::Path;

use image::{imageops::FilterType, DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// JSRT raw frames: 2048x2048, 12-bit values stored big-endian in 16-bit words.
const JSRT_SIDE: usize = 2048;
const JSRT_MAX: f32 = 4095.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::validation(format!(
                "rasters have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::validation(format!(
                "raster buffer of {} values does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Luminance at a pixel; RGB is averaged.
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        let base = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            self.data[base]
        } else {
            (self.data[base] + self.data[base + 1] + self.data[base + 2]) / 3.0
        }
    }

    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        Raster::from_fn(self.width, self.height, |x, y| self.luma(x, y))
    }

    /// Sets every channel of the square `[x0, x0+side) x [y0, y0+side)` to `value`,
    /// clipped to the raster.
    pub fn fill_square(&mut self, x0: usize, y0: usize, side: usize, value: f32) {
        let x1 = (x0 + side).min(self.width);
        let y1 = (y0 + side).min(self.height);
        for y in y0..y1 {
            let row = y * self.width * self.channels;
            self.data[row + x0 * self.channels..row + x1 * self.channels].fill(value);
        }
    }

    /// Bilinear (triangle filter) resize of every channel.
    pub fn resized(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let data = if self.channels == 1 {
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w, h, self.data.clone()).expect("buffer sized by construction");
            image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
        } else {
            let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w, h, self.data.clone()).expect("buffer sized by construction");
            image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
        };
        Raster {
            width,
            height,
            channels: self.channels,
            data,
        }
    }

    /// Loads a grayscale or RGB image file. Files with a `.img` extension are
    /// read as raw JSRT frames.
    pub fn load(path: &Path) -> Result<Raster> {
        let is_raw = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("img"));
        if is_raw {
            return load_jsrt_raw(path);
        }
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let raster = from_dynamic(img);
        if raster.is_empty() {
            return Err(Error::validation(format!(
                "zero-sized image {}",
                path.display()
            )));
        }
        Ok(raster)
    }

    /// Writes an 8-bit PNG (or whatever format the extension selects).
    pub fn save(&self, path: &Path) -> Result<()> {
        let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 1 {
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer sized by construction")
                .save(path)
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer sized by construction")
                .save(path)
        };
        res.map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }
}

fn from_dynamic(img: DynamicImage) -> Raster {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let is_gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    if is_gray {
        let buf = img.into_luma16();
        let data = buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
        Raster {
            width: w,
            height: h,
            channels: 1,
            data,
        }
    } else {
        let buf = img.into_rgb32f();
        Raster {
            width: w,
            height: h,
            channels: 3,
            data: buf.into_raw(),
        }
    }
}

fn load_jsrt_raw(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != JSRT_SIDE * JSRT_SIDE * 2 {
        return Err(Error::validation(format!(
            "{} is {} bytes; a raw JSRT frame is {}",
            path.display(),
            bytes.len(),
            JSRT_SIDE * JSRT_SIDE * 2
        )));
    }
    // JSRT stores attenuation: high values are dark. Invert so bone is bright.
    let data = bytes
        .chunks_exact(2)
        .map(|b| 1.0 - (u16::from_be_bytes([b[0], b[1]]) as f32).min(JSRT_MAX) / JSRT_MAX)
        .collect();
    Ok(Raster {
        width: JSRT_SIDE,
        height: JSRT_SIDE,
        channels: 1,
        data,
    })
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
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

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds reads are `false`.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            false
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, width: usize, height: usize) -> Mask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        Mask::from_fn(width, height, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }

    /// Any nonzero luminance counts as foreground.
    pub fn load(path: &Path) -> Result<Mask> {
        let raster = Raster::load(path)?;
        let gray = raster.to_gray();
        Ok(Mask {
            width: gray.width,
            height: gray.height,
            data: gray.data.iter().map(|&v| v > 0.0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raster = Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        };
        raster.save(path)
    }
}
