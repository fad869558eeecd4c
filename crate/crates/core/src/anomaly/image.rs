use super::AnomalyError;
use crate::seed::Fnv64;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ObsImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, AnomalyError> {
        if width == 0 || height == 0 {
            return Err(AnomalyError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(AnomalyError::InvalidImage(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AnomalyError::InvalidImage(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(ObsImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && (0.0..=1.0).contains(&value));
        ObsImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Sets a pixel, clamping the value into `[0, 1]`.
    pub fn set(&mut self, col: usize, row: usize, value: f64) {
        self.pixels[row * self.width + col] = value.clamp(0.0, 1.0);
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    /// FNV-1a over the shape and the little-endian bit patterns of the pixels.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv64::default();
        h.write(&(self.width as u64).to_le_bytes());
        h.write(&(self.height as u64).to_le_bytes());
        for p in &self.pixels {
            h.write(&p.to_bits().to_le_bytes());
        }
        h.finish()
    }
}
