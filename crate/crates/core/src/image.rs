//! Images, masks, and their PNG encodings.
//!
//! Images are stored channel-first (`3 x H x W`) with values in `[0, 1]`.
//! Masks are `H x W` over `{0, 1}` with `1` marking an unknown (hole) pixel.

use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};

use crate::error::{contract, io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(contract(format!("image must have 3 channels, got {}", data.shape()[0])));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(contract("image contains non-finite values"));
        }
        Ok(Image { data })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Image { data: Array3::from_elem((3, h, w), value) }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        Image { data: Array3::from_shape_fn((3, h, w), |(c, i, j)| f(c, i, j)) }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn clipped(&self) -> Image {
        Image { data: self.data.mapv(|v| v.clamp(0.0, 1.0)) }
    }

    pub fn flipped_horizontal(&self) -> Image {
        Image { data: self.data.slice(s![.., .., ..;-1]).to_owned() }
    }

    /// Bilinear resize (half-pixel centers) to `h x w`; aspect ratio is not preserved.
    pub fn resized(&self, h: usize, w: usize) -> Image {
        if (self.height(), self.width()) == (h, w) {
            return self.clone();
        }
        let ah = canvasinfill_tensor::bilinear_matrix(self.height(), h);
        let aw = canvasinfill_tensor::bilinear_matrix(self.width(), w);
        let mut out = Array3::zeros((3, h, w));
        for c in 0..3 {
            let plane = ah.dot(&self.data.index_axis(Axis(0), c)).dot(&aw.t());
            out.index_axis_mut(Axis(0), c).assign(&plane);
        }
        Image { data: out }
    }

    /// Rec. 601 luma.
    pub fn grayscale(&self) -> Array2<f64> {
        let d = &self.data;
        &d.index_axis(Axis(0), 0) * 0.299 + &d.index_axis(Axis(0), 1) * 0.587 + &d.index_axis(Axis(0), 2) * 0.114
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = ::image::open(path)
            .map_err(|e| Error::Ingestion { path: path.to_path_buf(), message: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
            img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
        });
        Ok(Image { data })
    }

    /// Writes an 8-bit RGB PNG; values are clipped to `[0, 1]` then rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut buf = ::image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px[c] = to_u8(self.data[[c, y as usize, x as usize]]);
            }
        }
        buf.save(path).map_err(|e| match e {
            ::image::ImageError::IoError(io) => io_err(path)(io),
            other => Error::Io { path: path.to_path_buf(), source: std::io::Error::other(other.to_string()) },
        })
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    data: Array2<u8>,
}

impl Mask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(contract("mask values must be 0 or 1"));
        }
        Ok(Mask { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { data: Array2::zeros((h, w)) }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Mask { data: Array2::ones((h, w)) }
    }

    pub(crate) fn from_raw(data: Array2<u8>) -> Self {
        debug_assert!(data.iter().all(|&v| v <= 1));
        Mask { data }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn is_hole(&self, i: usize, j: usize) -> bool {
        self.data[[i, j]] == 1
    }

    pub fn holes(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn hole_ratio(&self) -> f64 {
        self.holes() as f64 / self.data.len() as f64
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn flipped_horizontal(&self) -> Mask {
        Mask { data: self.data.slice(s![.., ..;-1]).to_owned() }
    }

    /// Reads a single-channel 8-bit mask; values above 127 are holes.
    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = ::image::open(path)
            .map_err(|e| Error::Ingestion { path: path.to_path_buf(), message: e.to_string() })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
            u8::from(img.get_pixel(j as u32, i as u32)[0] > 127)
        });
        Ok(Mask { data })
    }

    /// Writes an 8-bit single-channel PNG with 255 for holes and 0 elsewhere.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let buf = ::image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            ::image::Luma([self.data[[y as usize, x as usize]] * 255])
        });
        buf.save(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
    }
}

/// Stacks images into an `[N, 3, H, W]` batch.
pub fn stack_images(images: &[Image]) -> Result<Array4<f64>> {
    let views: Vec<ArrayView3<f64>> = images.iter().map(|i| i.data.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|_| contract("images in a batch must share a size"))
}

/// Stacks masks into an `[N, 1, H, W]` batch of `0.0/1.0`.
pub fn stack_masks(masks: &[Mask]) -> Result<Array4<f64>> {
    let planes: Vec<Array2<f64>> = masks.iter().map(Mask::to_f64).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let s = ndarray::stack(Axis(0), &views).map_err(|_| contract("masks in a batch must share a size"))?;
    Ok(s.insert_axis(Axis(1)))
}

/// Splits an `[N, 3, H, W]` batch back into images.
pub fn unstack_images(batch: &Array4<f64>) -> Vec<Image> {
    batch.outer_iter().map(|d| Image { data: d.to_owned() }).collect()
}
