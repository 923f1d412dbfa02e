use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic tag carried by UV-space maps and rendered images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Albedo,
    Position,
    Normal,
    Displacement,
    Mask,
    Shaded,
    #[default]
    Color,
}

/// Dense row-major float image, `data[(y * width + x) * channels + c]`.
///
/// Used both for UV-space maps (square, `d x d`) and for rendered images.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub kind: MapKind,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, kind: MapKind) -> Self {
        Self {
            width,
            height,
            channels,
            kind,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, kind: MapKind, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            kind,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        kind: MapKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension {
                what: "image data",
                expected: width * height * channels,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            kind,
            data,
        })
    }

    pub fn square(size: usize, channels: usize, kind: MapKind) -> Self {
        Self::new(size, size, channels, kind)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.index(x, y) + c;
        self.data[i] = value;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y);
        &mut self.data[i..i + self.channels]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image, what: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Validation(format!(
                "{what}: image shapes differ ({}x{}x{} vs {}x{}x{})",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.width, self.height, self.channels, self.kind);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.index(self.width - 1 - x, y);
                let dst = out.index(x, y);
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }
}
