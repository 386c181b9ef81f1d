//! Spatial edit masks and their flattened / outer-product forms.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// A binary spatial mask. Entries are exactly `0.0` or `1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    values: Array2<f64>,
    allow_empty: bool,
}

impl BinaryMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        Self::build(values, false)
    }

    /// Like [`BinaryMask::new`] but accepts a mask with no set cells.
    pub fn new_allow_empty(values: Array2<f64>) -> Result<Self> {
        Self::build(values, true)
    }

    fn build(values: Array2<f64>, allow_empty: bool) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("mask has no cells".into()));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("mask entries must be exactly 0 or 1".into()));
        }
        if !allow_empty && values.iter().all(|&v| v == 0.0) {
            return Err(Error::Validation(
                "mask has no set cells (use an explicitly empty mask)".into(),
            ));
        }
        Ok(Self {
            values,
            allow_empty,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            values: Array2::ones((height, width)),
            allow_empty: false,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
            allow_empty: true,
        }
    }

    /// Thresholds an intensity grid: cells `>= threshold` become 1.
    pub fn from_threshold(values: &Array2<f64>, threshold: f64, allow_empty: bool) -> Result<Self> {
        Self::build(values.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }), allow_empty)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_all_ones(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// Resamples to `height x width` by area averaging, then thresholds at 0.5.
    ///
    /// Each source cell is assigned to the target cell containing its centre.
    /// Target cells that receive no source cell (upsampling) take the value of
    /// the nearest source cell.
    pub fn resample(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("cannot resample mask to an empty grid".into()));
        }
        if (height, width) == (self.height(), self.width()) {
            return Ok(self.clone());
        }
        let (sh, sw) = (self.height(), self.width());
        let mut sum = Array2::<f64>::zeros((height, width));
        let mut count = Array2::<f64>::zeros((height, width));
        for y in 0..sh {
            let ty = ((y as f64 + 0.5) * height as f64 / sh as f64) as usize;
            for x in 0..sw {
                let tx = ((x as f64 + 0.5) * width as f64 / sw as f64) as usize;
                sum[[ty, tx]] += self.values[[y, x]];
                count[[ty, tx]] += 1.0;
            }
        }
        let mut avg = Array2::<f64>::zeros((height, width));
        for ty in 0..height {
            for tx in 0..width {
                avg[[ty, tx]] = if count[[ty, tx]] > 0.0 {
                    sum[[ty, tx]] / count[[ty, tx]]
                } else {
                    let sy = ((ty as f64 + 0.5) * sh as f64 / height as f64) as usize;
                    let sx = ((tx as f64 + 0.5) * sw as f64 / width as f64) as usize;
                    self.values[[sy.min(sh - 1), sx.min(sw - 1)]]
                };
            }
        }
        Self::from_threshold(&avg, 0.5, true).map(|mut m| {
            m.allow_empty = self.allow_empty || m.is_empty();
            m
        })
    }

    /// Row-major flattening at the mask's own resolution (must be square).
    pub fn flatten(&self) -> Result<FlattenedMask> {
        if self.height() != self.width() {
            return Err(Error::Shape(format!(
                "flattened masks must be square, got {}x{}",
                self.height(),
                self.width()
            )));
        }
        FlattenedMask::new(self.values.iter().copied().collect(), self.height())
    }
}

/// A square mask flattened row-major into a length `resolution²` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedMask {
    pub(crate) vector: Array1<f64>,
    pub(crate) resolution: usize,
}

impl FlattenedMask {
    pub fn new(vector: Array1<f64>, resolution: usize) -> Result<Self> {
        if vector.len() != resolution * resolution {
            return Err(Error::Shape(format!(
                "flattened mask of length {} does not match resolution {resolution}",
                vector.len()
            )));
        }
        if vector.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("mask entries must be exactly 0 or 1".into()));
        }
        Ok(Self { vector, resolution })
    }

    pub fn ones(resolution: usize) -> Self {
        Self {
            vector: Array1::ones(resolution * resolution),
            resolution,
        }
    }

    pub fn vector(&self) -> &Array1<f64> {
        &self.vector
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

/// Outer product `m mᵀ` of a flattened mask, used to restrict SA maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SaMaskOuter {
    pub(crate) matrix: Array2<f64>,
    pub(crate) resolution: usize,
}

impl SaMaskOuter {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

pub fn mask_outer(m: &FlattenedMask) -> SaMaskOuter {
    let v = m.vector();
    let n = v.len();
    let mut matrix = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        if v[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            matrix[[i, j]] = v[i] * v[j];
        }
    }
    SaMaskOuter {
        matrix,
        resolution: m.resolution(),
    }
}
