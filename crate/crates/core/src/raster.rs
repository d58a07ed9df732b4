//! Plain 8-bit rasters: class-id masks and RGB images.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Sentinel for cells no frame observed.
pub const UNOBSERVED: u8 = 255;

/// Row-major grid of class ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ClassMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err("ClassMask::new", format!("{} ids for {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self { width, height, data: vec![class; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// Pixel count per class id below `num_classes`.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; num_classes];
        for &c in &self.data {
            if let Some(slot) = h.get_mut(c as usize) {
                *slot += 1;
            }
        }
        h
    }

    /// Nearest-neighbour reduction by an integer `factor`; coarse cell
    /// `(x, y)` copies fine cell `(x·f + f/2, y·f + f/2)`.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(shape_err("ClassMask::downsample", format!("{}x{} by {factor}", self.width, self.height)));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let off = factor / 2;
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| self.get(x * factor + off, y * factor + off))
            .collect();
        Ok(Self { width: w, height: h, data })
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| c as usize >= num_classes) {
            Some(&c) => Err(Error::InvalidClass { class: c as usize, num_classes }),
            None => Ok(()),
        }
    }
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(shape_err("RgbImage::new", format!("{} bytes for {width}x{height} RGB", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self { width, height, data: rgb.repeat(width * height) }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, h, w]` tensor scaled to `[-1, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let n = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / n, i % n);
            T::from_f64(self.data[3 * p + c] as f64 / 127.5 - 1.0)
        })
    }

    /// Map every class id through `palette`; ids outside it become black.
    pub fn colorize(mask: &ClassMask, palette: &[[u8; 3]]) -> Self {
        let data = mask.data().iter().flat_map(|&c| palette.get(c as usize).copied().unwrap_or([0, 0, 0])).collect();
        Self { width: mask.width(), height: mask.height(), data }
    }
}
