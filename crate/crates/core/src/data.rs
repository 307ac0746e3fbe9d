//! Labeled image datasets with pixels already scaled to `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// A set of single-channel images stored contiguously, one `rows * cols`
/// block per image, with one label byte per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        let pixels = rows * cols;
        if pixels == 0 || images.len() != labels.len() * pixels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels x {pixels} pixels", labels.len()),
                got: format!("{} pixel values", images.len()),
            });
        }
        Ok(Self {
            images,
            labels,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// Assembles the images at `indices` into a flat `(B, rows*cols, 1, 1)`
    /// feature map (MLP layout).
    pub fn batch_flat(&self, indices: &[usize]) -> Result<FeatureMap> {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| v as f64));
        }
        FeatureMap::new([indices.len(), p, 1, 1], data)
    }

    /// Assembles the images at `indices` into a `(B, 1, rows, cols)`
    /// feature map (CNN layout).
    pub fn batch_spatial(&self, indices: &[usize]) -> Result<FeatureMap> {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| v as f64));
        }
        FeatureMap::new([indices.len(), 1, self.rows, self.cols], data)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }
}
