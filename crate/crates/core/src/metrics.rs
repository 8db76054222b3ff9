//! Evaluation quantities: reconstruction error, spectral angle, per-wavelength
//! R², average spectra and oxygen saturation.

use std::io::Write;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::{ConcentrationMatrix, WavelengthGrid};

/// Guard added to the norm product in the spectral angle. Small enough that
/// `SAD(p, p)` stays below 1e-4 for rows with `‖p‖ ≳ 0.01` and that rescaling
/// `p̂` moves the angle by far less than 1e-10.
pub const SAD_EPSILON: f64 = 1e-12;

fn same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Mean over pixels of the squared L2 row error.
pub fn mse(p: ArrayView2<'_, f64>, p_hat: ArrayView2<'_, f64>) -> Result<f64> {
    same_shape(p, p_hat)?;
    let total: f64 = p.iter().zip(p_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / p.nrows() as f64)
}

/// Cosine argument of the spectral angle, clamped to [-1, 1].
pub(crate) fn sad_cosine(dot: f64, norm_p: f64, norm_q: f64) -> f64 {
    (dot / (norm_p * norm_q + SAD_EPSILON)).clamp(-1.0, 1.0)
}

/// Spectral angular distance `(2/π) · acos(⟨p, q⟩ / (‖p‖‖q‖ + ε))`, in [0, 1]
/// for nonnegative spectra.
pub fn sad(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    let dot = p.dot(&q);
    let np = p.dot(&p).sqrt();
    let nq = q.dot(&q).sqrt();
    sad_cosine(dot, np, nq).acos() / std::f64::consts::FRAC_PI_2
}

pub fn msad(p: ArrayView2<'_, f64>, p_hat: ArrayView2<'_, f64>) -> Result<f64> {
    same_shape(p, p_hat)?;
    let total: f64 = p.rows().into_iter().zip(p_hat.rows()).map(|(a, b)| sad(a, b)).sum();
    Ok(total / p.nrows() as f64)
}

/// `R²(λ) = 1 − Σ(p − p̂)² / Σ(p − p̄)²` per wavelength; `None` where the
/// input has zero variance.
pub fn r2_per_wavelength(input: ArrayView2<'_, f64>, recon: ArrayView2<'_, f64>) -> Result<Vec<Option<f64>>> {
    same_shape(input, recon)?;
    Ok(input
        .axis_iter(Axis(1))
        .zip(recon.axis_iter(Axis(1)))
        .map(|(p, q)| {
            let mean = p.mean().unwrap();
            let ss_tot: f64 = p.iter().map(|v| (v - mean) * (v - mean)).sum();
            if ss_tot <= 0.0 {
                return None;
            }
            let ss_res: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            Some(1.0 - ss_res / ss_tot)
        })
        .collect())
}

/// Column-wise mean over pixels.
pub fn average_spectrum(pixels: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    pixels.mean_axis(Axis(0)).ok_or(Error::EmptyBatch)
}

/// Per-pixel SO2 in percent; `None` marks pixels with zero total hemoglobin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct So2Map {
    pub values: Vec<Option<f64>>,
}

impl So2Map {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean over defined pixels, `None` if there are none.
    pub fn mean(&self) -> Option<f64> {
        let (s, n) = self
            .values
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    }
}

/// `100 · c_HbO2 / (c_HbO2 + c_HHb)`; column 0 must be HbO2, column 1 HHb.
pub fn so2(conc: &ConcentrationMatrix) -> Result<So2Map> {
    let c = conc.values();
    if c.ncols() != 2 {
        return Err(Error::WrongChromophoreCount(c.ncols()));
    }
    Ok(So2Map {
        values: c
            .rows()
            .into_iter()
            .map(|r| {
                let total = r[0] + r[1];
                (total > 0.0).then(|| 100.0 * r[0] / total)
            })
            .collect(),
    })
}

/// Mean absolute SO2 difference (percentage points) over masked pixels where
/// both maps are defined.
pub fn so2_mae(estimate: &So2Map, truth: &So2Map, mask: &[bool]) -> Result<f64> {
    if estimate.len() != truth.len() || mask.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "estimate {}, truth {}, mask {}",
            estimate.len(),
            truth.len(),
            mask.len()
        )));
    }
    let (sum, n) = estimate
        .values
        .iter()
        .zip(&truth.values)
        .zip(mask)
        .filter_map(|((e, t), m)| match (m, e, t) {
            (true, Some(e), Some(t)) => Some((e - t).abs()),
            _ => None,
        })
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Reconstruction report over one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub msad: f64,
    pub r2_per_wavelength: Vec<Option<f64>>,
    pub r2_mean: Option<f64>,
    pub r2_std: Option<f64>,
    pub avg_spectrum_input: Vec<f64>,
    pub avg_spectrum_recon: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub so2_mae: Option<f64>,
}

/// Mean and population standard deviation over the defined entries.
pub fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return (None, None);
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

impl EvalReport {
    pub fn compute(input: ArrayView2<'_, f64>, recon: ArrayView2<'_, f64>) -> Result<Self> {
        let r2 = r2_per_wavelength(input, recon)?;
        let (r2_mean, r2_std) = mean_std(&r2);
        Ok(Self {
            mse: mse(input, recon)?,
            msad: msad(input, recon)?,
            r2_per_wavelength: r2,
            r2_mean,
            r2_std,
            avg_spectrum_input: average_spectrum(input)?.to_vec(),
            avg_spectrum_recon: average_spectrum(recon)?.to_vec(),
            so2_mae: None,
        })
    }

    /// `wavelength_nm,r2,avg_input,avg_recon`; undefined R² is left empty.
    pub fn write_series_csv<W: Write>(&self, grid: &WavelengthGrid, out: W) -> Result<()> {
        if grid.len() != self.r2_per_wavelength.len() {
            return Err(Error::DimensionMismatch("grid vs report length".into()));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["wavelength_nm", "r2", "avg_input", "avg_recon"])?;
        for (i, wl) in grid.as_slice().iter().enumerate() {
            w.write_record([
                wl.to_string(),
                self.r2_per_wavelength[i].map(|v| v.to_string()).unwrap_or_default(),
                self.avg_spectrum_input[i].to_string(),
                self.avg_spectrum_recon[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
