//! Grayscale images, binary masks and binary portable-graymap (P5) files.

use std::fs;
use std::path::Path;

use crate::error::{DmmError, Result};

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Row-major binary mask; every value is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(DmmError::dim(
                "image",
                format!("{height}x{width} image with {} values", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
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

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Elementwise `value >= threshold`.
    pub fn binarize(&self, threshold: f32) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v >= threshold) as u8).collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        parse_pgm(bytes)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| DmmError::io(path, e))
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DmmError::io(path, e))?;
        parse_pgm(&bytes)
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(DmmError::dim(
                "mask",
                format!("{height}x{width} mask with {} values", data.len()),
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(DmmError::Contract("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut inside: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(inside(r, c) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & b)
    }

    pub fn difference(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & !b & 1)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Mask {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "mask shapes differ"
        );
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(DmmError::Format {
                offset: start as u64,
                detail: "truncated PGM header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err(DmmError::Format {
            offset: 0,
            detail: "not a binary PGM (missing P5 magic)".into(),
        });
    }
    let number = |pos: &mut usize| -> Result<usize> {
        let at = *pos as u64;
        token(pos)?.parse().map_err(|_| DmmError::Format {
            offset: at,
            detail: "invalid PGM header number".into(),
        })
    };
    let width = number(&mut pos)?;
    let height = number(&mut pos)?;
    let maxval = number(&mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(DmmError::Format {
            offset: pos as u64,
            detail: format!("unsupported PGM maxval {maxval}"),
        });
    }
    // A single whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(DmmError::Format {
            offset: bytes.len() as u64,
            detail: format!("PGM raster truncated: need {need} bytes"),
        });
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Image::new(height, width, data)
}
