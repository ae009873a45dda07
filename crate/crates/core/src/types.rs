//! Core tensor type for feature data flowing through the network.

use ndarray::Array3;

use crate::error::{Error, Result};

/// A real-valued feature map laid out channels × height × width.
///
/// Every element is finite; all three dimensions are at least 1. The
/// constructor enforces both, so downstream kernels can assume them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 {
            return Err(Error::Dimension("channels must be >= 1".into()));
        }
        if h == 0 {
            return Err(Error::Dimension("height must be >= 1".into()));
        }
        if w == 0 {
            return Err(Error::Dimension("width must be >= 1".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap { data })
    }

    /// Builds without the finiteness scan. For internal use on values that
    /// are already known finite (e.g. outputs of checked kernels).
    pub(crate) fn from_array_unchecked(data: Array3<f64>) -> Self {
        FeatureMap { data }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            data: Array3::zeros((c, h, w)),
        }
    }

    pub fn from_shape_fn(
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((c, h, w), |(ci, hi, wi)| f(ci, hi, wi)))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }
}
