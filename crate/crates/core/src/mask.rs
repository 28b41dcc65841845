//! Per-pixel class-index masks.

use std::fmt;

/// Class-index label map of size `height x width`.
///
/// Stored as indices rather than one-hot; one-vs-rest views are computed on
/// demand with [`Mask::binary`].
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("foreground", &self.count_foreground())
            .finish()
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Option<Self> {
        (height * width == data.len() && height > 0 && width > 0).then_some(Self {
            height,
            width,
            data,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// Number of non-background pixels.
    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn count_class(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// One-vs-rest view: `true` where the pixel has class `class`.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}
