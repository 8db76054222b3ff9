use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// `I × L` nonnegative sPA design matrix plus per-pixel depths (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBatch {
    pixels: Array2<f64>,
    depths: Array1<f64>,
}

impl PixelBatch {
    pub fn new(pixels: Array2<f64>, depths: Array1<f64>) -> Result<Self> {
        if pixels.nrows() != depths.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} pixel rows but {} depths",
                pixels.nrows(),
                depths.len()
            )));
        }
        if pixels.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeValue("pixels"));
        }
        if depths.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeValue("depths"));
        }
        Ok(Self { pixels, depths })
    }

    /// Depth-free batch (every ρ = 0).
    pub fn at_surface(pixels: Array2<f64>) -> Result<Self> {
        let n = pixels.nrows();
        Self::new(pixels, Array1::zeros(n))
    }

    pub fn pixels(&self) -> ArrayView2<'_, f64> {
        self.pixels.view()
    }

    pub fn depths(&self) -> ArrayView1<'_, f64> {
        self.depths.view()
    }

    pub fn len(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.nrows() == 0
    }

    pub fn wavelength_count(&self) -> usize {
        self.pixels.ncols()
    }

    /// Divides every pixel by the global maximum; returns that maximum.
    pub fn normalize_global(&mut self) -> Result<f64> {
        let max = self.pixels.fold(0.0f64, |a, &b| a.max(b));
        if max <= 0.0 {
            return Err(Error::ZeroDataMatrix);
        }
        self.pixels /= max;
        Ok(max)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            pixels: self.pixels.select(Axis(0), indices),
            depths: self.depths.select(Axis(0), indices),
        }
    }

    pub fn into_parts(self) -> (Array2<f64>, Array1<f64>) {
        (self.pixels, self.depths)
    }
}
