//! Labeled synthetic datasets: blood inclusions at known oxygenation embedded
//! at depth, forward-modeled pixel by pixel with the diffusion model.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::PixelBatch;
use crate::error::{Error, Result};
use crate::forward::{forward_pressure, FluenceParams, OpticalFields};
use crate::io::{Dataset, TensorFile, TensorRecord};
use crate::metrics::So2Map;
use crate::model::{read_text_record, text_record};
use crate::spectra::{ConcentrationMatrix, SpectraMatrix, WavelengthGrid};

/// A disk of blood, in mm from the top-left pixel: `center_mm = [row, col]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub center_mm: [f64; 2],
    pub radius_mm: f64,
    pub so2_percent: f64,
    /// Relative total hemoglobin (scales both columns of `c`).
    pub total_hemoglobin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    pub total_hemoglobin: f64,
    pub so2_percent: f64,
}

/// `μs′(λ) = value · (λ / reference)^(−power)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatteringProfile {
    pub value_at_reference_mm: f64,
    pub reference_wavelength_nm: f64,
    pub scattering_power: f64,
}

impl ScatteringProfile {
    pub fn at(&self, wavelength_nm: f64) -> f64 {
        self.value_at_reference_mm * (wavelength_nm / self.reference_wavelength_nm).powf(-self.scattering_power)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// `[rows, cols]`.
    pub grid_shape: [usize; 2],
    pub pixel_pitch_mm: f64,
    pub inclusions: Vec<Inclusion>,
    pub background: Background,
    pub mus_prime_profile: ScatteringProfile,
    pub depth_offset_mm: f64,
    /// Standard deviation of additive Gaussian noise on normalized pressure.
    pub noise_std: f64,
    pub seed: u64,
    /// Force every depth to 0 (no fluence coloring); for linear-regime checks.
    #[serde(default)]
    pub surface_only: bool,
}

fn check_so2(v: f64) -> bool {
    (0.0..=100.0).contains(&v)
}

impl PhantomSpec {
    pub fn pixel_count(&self) -> usize {
        self.grid_shape[0] * self.grid_shape[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let [rows, cols] = self.grid_shape;
        if rows == 0 || cols == 0 {
            return bad("grid_shape must be positive".into());
        }
        if !(self.pixel_pitch_mm > 0.0 && self.pixel_pitch_mm.is_finite()) {
            return bad("pixel_pitch_mm must be > 0".into());
        }
        if !(self.depth_offset_mm >= 0.0 && self.depth_offset_mm.is_finite()) {
            return bad("depth_offset_mm must be >= 0".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be >= 0".into());
        }
        let s = &self.mus_prime_profile;
        if !(s.value_at_reference_mm > 0.0 && s.value_at_reference_mm.is_finite()) {
            return bad("mus_prime_profile.value_at_reference_mm must be > 0".into());
        }
        if !(s.reference_wavelength_nm > 0.0 && s.scattering_power.is_finite()) {
            return bad("mus_prime_profile needs a positive reference wavelength and finite power".into());
        }
        if !check_so2(self.background.so2_percent) {
            return bad("background.so2_percent must lie in [0, 100]".into());
        }
        if !(self.background.total_hemoglobin >= 0.0 && self.background.total_hemoglobin.is_finite()) {
            return bad("background.total_hemoglobin must be >= 0".into());
        }
        let extent = [
            (rows - 1) as f64 * self.pixel_pitch_mm,
            (cols - 1) as f64 * self.pixel_pitch_mm,
        ];
        for (index, inc) in self.inclusions.iter().enumerate() {
            let fail = |reason: String| Err(Error::InclusionOutOfBounds { index, reason });
            if !(inc.radius_mm > 0.0 && inc.radius_mm.is_finite()) {
                return fail(format!("radius_mm {} must be > 0", inc.radius_mm));
            }
            if !check_so2(inc.so2_percent) {
                return fail(format!("so2_percent {} outside [0, 100]", inc.so2_percent));
            }
            if !(inc.total_hemoglobin >= 0.0 && inc.total_hemoglobin.is_finite()) {
                return fail(format!("total_hemoglobin {} must be >= 0", inc.total_hemoglobin));
            }
            for (axis, (&c, &e)) in ["row", "col"].iter().zip(inc.center_mm.iter().zip(&extent)) {
                if !(c - inc.radius_mm >= 0.0 && c + inc.radius_mm <= e) {
                    return fail(format!(
                        "disk spans {axis} {:.3}..{:.3} mm, grid covers 0..{e:.3} mm",
                        c - inc.radius_mm,
                        c + inc.radius_mm
                    ));
                }
            }
        }
        Ok(())
    }

    /// Depth of a pixel row (mm).
    pub fn depth_of_row(&self, row: usize) -> f64 {
        if self.surface_only {
            0.0
        } else {
            self.depth_offset_mm + row as f64 * self.pixel_pitch_mm
        }
    }

    /// Index of the last inclusion covering `(row, col)`, if any.
    pub fn inclusion_at(&self, row: usize, col: usize) -> Option<usize> {
        let (y, x) = (row as f64 * self.pixel_pitch_mm, col as f64 * self.pixel_pitch_mm);
        self.inclusions.iter().rposition(|inc| {
            let (dy, dx) = (y - inc.center_mm[0], x - inc.center_mm[1]);
            dy * dy + dx * dx <= inc.radius_mm * inc.radius_mm
        })
    }
}

/// Three disks 10 mm deep at SO2 90/70/50 % in a low-hemoglobin background.
pub fn default_paper_phantom() -> PhantomSpec {
    let inclusion = |col_mm: f64, so2: f64| Inclusion {
        center_mm: [1.75, col_mm],
        radius_mm: 1.5,
        so2_percent: so2,
        total_hemoglobin: 0.0025,
    };
    PhantomSpec {
        grid_shape: [120, 170],
        pixel_pitch_mm: 0.05,
        inclusions: vec![inclusion(1.75, 90.0), inclusion(4.25, 70.0), inclusion(6.75, 50.0)],
        background: Background {
            total_hemoglobin: 0.001,
            so2_percent: 75.0,
        },
        mus_prime_profile: ScatteringProfile {
            value_at_reference_mm: 1.0,
            reference_wavelength_nm: 800.0,
            scattering_power: 1.2,
        },
        depth_offset_mm: 10.0,
        noise_std: 0.01,
        seed: 0,
        surface_only: false,
    }
}

/// Ground truth accompanying a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub conc: ConcentrationMatrix,
    pub fields: OpticalFields<f64>,
    pub so2: So2Map,
    pub vessel_mask: Vec<bool>,
    pub grid_shape: [usize; 2],
    /// Factor mapping stored pixels back to raw pressure (`raw ≈ pixel · normalization`).
    pub normalization: f64,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub dataset: Dataset,
    pub truth: Truth,
}

/// Synthesizes a labeled dataset from `spec`.
pub fn generate(spec: &PhantomSpec, grid: &WavelengthGrid, spectra: &SpectraMatrix) -> Result<LabeledDataset> {
    spec.validate()?;
    if spectra.wavelength_count() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "spectra have {} rows, grid has {} wavelengths",
            spectra.wavelength_count(),
            grid.len()
        )));
    }
    if spectra.chromophore_count() != 2 {
        return Err(Error::WrongChromophoreCount(spectra.chromophore_count()));
    }
    let [rows, cols] = spec.grid_shape;
    let n = rows * cols;
    let l = grid.len();
    let mut conc = Array2::zeros((n, 2));
    let mut mask = vec![false; n];
    let mut so2 = Vec::with_capacity(n);
    let mut depths = Array1::zeros(n);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let (thb, s) = match spec.inclusion_at(r, c) {
                Some(k) => {
                    mask[i] = true;
                    let inc = &spec.inclusions[k];
                    (inc.total_hemoglobin, inc.so2_percent)
                }
                None => (spec.background.total_hemoglobin, spec.background.so2_percent),
            };
            conc[[i, 0]] = thb * s / 100.0;
            conc[[i, 1]] = thb * (1.0 - s / 100.0);
            so2.push((thb > 0.0).then_some(s));
            depths[i] = spec.depth_of_row(r);
        }
    }
    let mu_a = conc.dot(&spectra.values().t());
    let mus_row = Array1::from_iter(grid.as_slice().iter().map(|&w| spec.mus_prime_profile.at(w)));
    let mu_s = Array2::from_shape_fn((n, l), |(_, j)| mus_row[j]);
    let fields = OpticalFields::new(mu_a, mu_s)?;
    let raw = forward_pressure(&fields, &FluenceParams::unit(l, depths.clone())?)?;
    let scale = raw.fold(0.0f64, |a, &b| a.max(b));
    if !(scale > 0.0) {
        return Err(Error::ZeroDataMatrix);
    }
    let mut pixels = raw / scale;
    let mut normalization = scale;
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pixels
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut row)| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(i as u64);
                row.mapv_inplace(|v| (v + normal.sample(&mut rng)).max(0.0));
            });
        let max = pixels.fold(0.0f64, |a, &b| a.max(b));
        if !(max > 0.0) {
            return Err(Error::ZeroDataMatrix);
        }
        pixels /= max;
        normalization *= max;
    }
    Ok(LabeledDataset {
        dataset: Dataset::new(grid.clone(), PixelBatch::new(pixels, depths)?)?,
        truth: Truth {
            conc: ConcentrationMatrix::new(conc)?,
            fields,
            so2: So2Map { values: so2 },
            vessel_mask: mask,
            grid_shape: spec.grid_shape,
            normalization,
            spec: spec.clone(),
        },
    })
}

/// `<dataset path>.truth`.
pub fn truth_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".truth");
    PathBuf::from(s)
}

impl Truth {
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        f.push_array2("truth_conc", self.conc.values())?;
        f.push_array2("truth_mu_a", self.fields.mu_a())?;
        f.push_array2("truth_mu_s_prime", self.fields.mu_s_prime())?;
        let so2: Vec<f64> = self.so2.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        f.push_vec("truth_so2", &so2)?;
        let mask: Vec<f64> = self.vessel_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        f.push_vec("vessel_mask", &mask)?;
        f.push_vec("meta/grid_shape", &[self.grid_shape[0] as f64, self.grid_shape[1] as f64])?;
        f.push(TensorRecord::new(
            "meta/normalization",
            vec![1],
            vec![self.normalization as f32],
        )?)?;
        f.push(text_record("meta/spec_json", &serde_json::to_string(&self.spec)?))?;
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let conc = ConcentrationMatrix::new(f.require("truth_conc")?.to_array2()?)?;
        let fields = OpticalFields::new(
            f.require("truth_mu_a")?.to_array2()?,
            f.require("truth_mu_s_prime")?.to_array2()?,
        )?;
        let so2 = So2Map {
            values: f
                .require("truth_so2")?
                .to_vec_f64()
                .into_iter()
                .map(|v| (!v.is_nan()).then_some(v))
                .collect(),
        };
        let vessel_mask: Vec<bool> = f.require("vessel_mask")?.data.iter().map(|&v| v != 0.0).collect();
        let shape = f.require("meta/grid_shape")?.to_vec_f64();
        if shape.len() != 2 {
            return Err(Error::Format("meta/grid_shape must hold [rows, cols]".into()));
        }
        let grid_shape = [shape[0] as usize, shape[1] as usize];
        let normalization = f
            .require("meta/normalization")?
            .to_vec_f64()
            .first()
            .copied()
            .ok_or_else(|| Error::Format("empty meta/normalization".into()))?;
        let spec: PhantomSpec = serde_json::from_str(&read_text_record(f, "meta/spec_json")?)?;
        let n = conc.pixel_count();
        if so2.len() != n || vessel_mask.len() != n || fields.dim().0 != n || grid_shape[0] * grid_shape[1] != n {
            return Err(Error::Format("truth tensors disagree on the pixel count".into()));
        }
        Ok(Self {
            conc,
            fields,
            so2,
            vessel_mask,
            grid_shape,
            normalization,
            spec,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

impl LabeledDataset {
    /// Writes the dataset to `path` and the truth to `path.truth`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.dataset.save(path)?;
        self.truth.to_tensor_file()?.save(&truth_path(path))
    }
}
