//! 8-bit grayscale PNG I/O, binary masks and the value maps between disk and memory.
//!
//! On disk intensities live in [0, 255]; in memory images are single-channel
//! tensors in [-1, 1] via `v_mem = 2 * v_disk / 255 - 1`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    pub fn from_u8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        Self::from_bits(height, width, data.iter().map(|&v| v >= 128).collect())
    }
}

pub fn unit_to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// [-1, 1] in-memory value to an 8-bit pixel, clamping out-of-range values.
pub fn signed_to_u8(v: f64) -> u8 {
    unit_to_u8((v + 1.0) / 2.0)
}

pub fn u8_to_signed(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

pub fn write_gray_png(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let img = ::image::GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::shape(format!("{} bytes for {height}x{width}", data.len())))?;
    img.save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads any PNG and converts it to 8-bit luma. Returns (height, width, pixels).
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let img = ::image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok((h as usize, w as usize, gray.into_raw()))
}

/// Loads a PNG as a 1×H×W tensor in [-1, 1].
pub fn load_image<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let (h, w, px) = read_gray_png(path)?;
    Tensor::from_vec(
        &[1, h, w],
        px.iter().map(|&v| T::from_f64(u8_to_signed(v))).collect(),
    )
}

/// Saves a C×H×W (C = 1) tensor in [-1, 1] as PNG, clamping.
pub fn save_image<T: Element>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (h, w) = image_hw(img)?;
    let px: Vec<u8> = img.data().iter().map(|v| signed_to_u8(v.as_f64())).collect();
    write_gray_png(path, h, w, &px)
}

/// Saves a signed map with the affine display transform (v + 1) / 2.
pub fn save_signed_map<T: Element>(path: &Path, map: &Tensor<T>) -> Result<()> {
    save_image(path, map)
}

/// Raw little-endian f32 dump: u32 height, u32 width, then H*W values.
pub fn save_raw_f32<T: Element>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let (h, w) = image_hw(map)?;
    let mut bytes = Vec::with_capacity(8 + 4 * h * w);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.data() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_raw_f32(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "raw map shorter than its header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * h * w {
        return Err(Error::format(path, "raw map size does not match header"));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}

fn image_hw<T: Element>(img: &Tensor<T>) -> Result<(usize, usize)> {
    match *img.shape() {
        [1, h, w] => Ok((h, w)),
        [h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!(
            "expected a single-channel image, got {:?}",
            img.shape()
        ))),
    }
}
