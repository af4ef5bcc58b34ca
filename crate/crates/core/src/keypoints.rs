use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of feature-map resolutions sampled per keypoint (1, 1/2, 1/4, 1/8).
pub const SCALE_COUNT: usize = 4;

/// Image extent in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    /// `0 ≤ u < width` and `0 ≤ v < height`.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[0] < self.width && p[1] >= 0.0 && p[1] < self.height
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        [[0.0, 0.0], [self.width, 0.0], [self.width, self.height], [0.0, self.height]]
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.width.hypot(self.height)
    }
}

/// One image's keypoints: `(u, v, confidence)` rows plus raw features at each scale.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    /// `n × 3`: pixel `u`, pixel `v`, detector confidence.
    pub positions: Tensor,
    /// One `n × C_s` matrix per scale.
    pub raw_features: Vec<Tensor>,
    pub image_size: ImageSize,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        [self.positions.get(k, 0), self.positions.get(k, 1)]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }

    pub fn scale_dims(&self) -> Vec<usize> {
        self.raw_features.iter().map(Tensor::cols).collect()
    }

    /// Positions mapped to `[-1, 1]` around the image centre by the half
    /// diagonal; confidence passes through unchanged.
    pub fn normalized_positions(&self) -> Tensor {
        let (cx, cy) = (0.5 * self.image_size.width, 0.5 * self.image_size.height);
        let s = self.image_size.half_diagonal();
        let mut out = self.positions.clone();
        for k in 0..self.len() {
            out.set(k, 0, (self.positions.get(k, 0) - cx) / s);
            out.set(k, 1, (self.positions.get(k, 1) - cy) / s);
        }
        out
    }

    /// Checks the in-bounds, confidence-range and per-scale row-count invariants.
    pub fn validate(&self) -> Result<()> {
        if self.positions.cols() != 3 {
            return Err(Error::Config(format!("positions must be n x 3, got {:?}", self.positions.shape())));
        }
        if self.raw_features.len() != SCALE_COUNT {
            return Err(Error::Config(format!(
                "expected {SCALE_COUNT} feature scales, got {}",
                self.raw_features.len()
            )));
        }
        for k in 0..self.len() {
            if !self.image_size.contains(self.point(k)) {
                return Err(Error::Config(format!("keypoint {k} lies outside the image")));
            }
            let c = self.positions.get(k, 2);
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("keypoint {k} confidence {c} outside [0, 1]")));
            }
        }
        if let Some(bad) = self.raw_features.iter().position(|f| f.rows() != self.len()) {
            return Err(Error::Config(format!("scale {bad} has the wrong number of rows")));
        }
        Ok(())
    }

    /// Reorders keypoints: new row `k` is old row `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> KeypointSet {
        KeypointSet {
            positions: self.positions.select_rows(order),
            raw_features: self.raw_features.iter().map(|f| f.select_rows(order)).collect(),
            image_size: self.image_size,
        }
    }
}
