//! Spectral axis, chromophore absorption spectra and the rectified
//! pseudoinverse unmixing kernel shared by the model and the baselines.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value cutoff below which the spectra are rank deficient.
pub const PINV_CUTOFF: f64 = 1e-12;

pub const HBO2: &str = "HbO2";
pub const HHB: &str = "HHb";

/// HbO2/HHb molar extinction (cm⁻¹/M) tabulated every 10 nm from 650 to 1000 nm.
const HEMOGLOBIN_TABLE: &str = include_str!("../data/hemoglobin.csv");

/// Ordered imaging wavelengths in nanometres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WavelengthGrid {
    wavelengths_nm: Vec<f64>,
}

impl WavelengthGrid {
    pub fn new(wavelengths_nm: Vec<f64>) -> Result<Self> {
        if wavelengths_nm.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 wavelengths, got {}",
                wavelengths_nm.len()
            )));
        }
        if wavelengths_nm.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::InvalidGrid("wavelengths must be finite and positive".into()));
        }
        if let Some(i) = wavelengths_nm.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(Self { wavelengths_nm })
    }

    /// Inclusive range `start..=stop` with the given step.
    pub fn from_range(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::InvalidGrid("step must be positive".into()));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        Self::new((0..n).map(|i| start + step * i as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.wavelengths_nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths_nm.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.wavelengths_nm
    }
}

/// 680–970 nm at 2 nm spacing (146 wavelengths).
impl Default for WavelengthGrid {
    fn default() -> Self {
        Self::from_range(680.0, 970.0, 2.0).expect("static grid")
    }
}

impl TryFrom<Vec<f64>> for WavelengthGrid {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WavelengthGrid> for Vec<f64> {
    fn from(g: WavelengthGrid) -> Self {
        g.wavelengths_nm
    }
}

/// `L × N` nonnegative absorption spectra with a cached pseudoinverse.
#[derive(Clone, Debug)]
pub struct SpectraMatrix {
    values: Array2<f64>,
    names: Vec<String>,
    pinv: Array2<f64>,
    pinv_stale: bool,
}

impl SpectraMatrix {
    /// Validates `values` and computes the pseudoinverse.
    pub fn new(values: Array2<f64>, names: Vec<String>) -> Result<Self> {
        Self::with_stale_pinv(values, names)?.compute_pinv()
    }

    /// Validates `values` but leaves the pseudoinverse uncomputed.
    pub fn with_stale_pinv(values: Array2<f64>, names: Vec<String>) -> Result<Self> {
        let (l, n) = values.dim();
        if n == 0 || l == 0 {
            return Err(Error::InvalidSpectra("empty spectra matrix".into()));
        }
        if names.len() != n {
            return Err(Error::InvalidSpectra(format!(
                "{} names for {} columns",
                names.len(),
                n
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeValue("spectra"));
        }
        Ok(Self {
            pinv: Array2::zeros((n, l)),
            values,
            names,
            pinv_stale: true,
        })
    }

    /// Recomputes the Moore-Penrose pseudoinverse via SVD.
    pub fn compute_pinv(mut self) -> Result<Self> {
        self.pinv = pseudoinverse(self.values.view())?;
        self.pinv_stale = false;
        Ok(self)
    }

    /// Replaces the spectra values, marking the pseudoinverse stale.
    pub fn set_values(&mut self, values: Array2<f64>) -> Result<()> {
        if values.dim() != self.values.dim() {
            return Err(Error::DimensionMismatch(format!(
                "spectra {:?} vs {:?}",
                values.dim(),
                self.values.dim()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeValue("spectra"));
        }
        self.values = values;
        self.pinv_stale = true;
        Ok(())
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn wavelength_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn chromophore_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_pinv_stale(&self) -> bool {
        self.pinv_stale
    }

    pub fn pinv(&self) -> Result<ArrayView2<'_, f64>> {
        if self.pinv_stale {
            return Err(Error::StalePseudoinverse);
        }
        Ok(self.pinv.view())
    }

    /// `ReLU(μa · E⁺ᵀ)`: rectified least-squares concentrations per pixel.
    pub fn unmix(&self, mu_a: ArrayView2<'_, f64>) -> Result<ConcentrationMatrix> {
        let pinv = self.pinv()?;
        if mu_a.ncols() != self.wavelength_count() {
            return Err(Error::DimensionMismatch(format!(
                "mu_a has {} columns, spectra have {} wavelengths",
                mu_a.ncols(),
                self.wavelength_count()
            )));
        }
        let mut c = mu_a.dot(&pinv.t());
        c.mapv_inplace(|v| v.max(0.0));
        Ok(ConcentrationMatrix(c))
    }

    /// `ReLU(C · Eᵀ)`: rank-N reconstruction of the absorption coefficient.
    pub fn reconstruct_mu_a(&self, conc: &ConcentrationMatrix) -> Result<Array2<f64>> {
        if conc.0.ncols() != self.chromophore_count() {
            return Err(Error::DimensionMismatch(format!(
                "concentrations have {} columns, spectra have {} chromophores",
                conc.0.ncols(),
                self.chromophore_count()
            )));
        }
        let mut m = conc.0.dot(&self.values.t());
        m.mapv_inplace(|v| v.max(0.0));
        Ok(m)
    }

    /// Writes `wavelength_nm,<name>,...` CSV rows.
    pub fn write_csv<W: Write>(&self, grid: &WavelengthGrid, out: W) -> Result<()> {
        if grid.len() != self.wavelength_count() {
            return Err(Error::DimensionMismatch("grid vs spectra length".into()));
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["wavelength_nm".to_string()];
        header.extend(self.names.iter().map(|n| n.to_lowercase()));
        w.write_record(&header)?;
        for (wl, row) in grid.as_slice().iter().zip(self.values.rows()) {
            let mut rec = vec![wl.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, grid: &WavelengthGrid, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |f| self.write_csv(grid, f))
    }
}

/// `I × N` nonnegative relative concentrations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationMatrix(Array2<f64>);

impl ConcentrationMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::NegativeValue("concentrations"));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_nonnegative(values: Array2<f64>) -> Self {
        debug_assert!(values.iter().all(|v| *v >= 0.0));
        Self(values)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn pixel_count(&self) -> usize {
        self.0.nrows()
    }
}

/// Moore-Penrose pseudoinverse with a full-column-rank check.
pub fn pseudoinverse(values: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (l, n) = values.dim();
    if n > l {
        return Err(Error::RankDeficientSpectra { ratio: 0.0 });
    }
    let m = DMatrix::from_fn(l, n, |i, j| values[[i, j]]);
    let svd = m.svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= PINV_CUTOFF * max {
        return Err(Error::RankDeficientSpectra {
            ratio: if max > 0.0 { min / max } else { 0.0 },
        });
    }
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    // E⁺ = V Σ⁻¹ Uᵀ
    Ok(Array2::from_shape_fn((n, l), |(r, c)| {
        (0..n).map(|k| v_t[(k, r)] * u[(c, k)] / sv[k]).sum()
    }))
}

struct Table {
    wavelengths: Vec<f64>,
    hbo2: Vec<f64>,
    hhb: Vec<f64>,
}

fn parse_table<R: Read>(rdr: R) -> Result<Table> {
    let mut r = csv::Reader::from_reader(rdr);
    let headers = r.headers()?.clone();
    let expected = ["wavelength_nm", "hbo2", "hhb"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(Error::Format(format!(
            "spectra table header must be `wavelength_nm,hbo2,hhb`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut t = Table {
        wavelengths: vec![],
        hbo2: vec![],
        hhb: vec![],
    };
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("spectra table: {e}")))
        };
        t.wavelengths.push(parse(0)?);
        t.hbo2.push(parse(1)?);
        t.hhb.push(parse(2)?);
    }
    Ok(t)
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let hi = xs.partition_point(|v| *v < x).clamp(1, xs.len() - 1);
    let (x0, x1) = (xs[hi - 1], xs[hi]);
    let t = (x - x0) / (x1 - x0);
    ys[hi - 1] + t * (ys[hi] - ys[hi - 1])
}

/// Tabulated literature spectra resampled onto `grid` by linear
/// interpolation, rescaled so that the largest entry equals 1.
pub fn literature_spectra(grid: &WavelengthGrid, chromophores: &[&str]) -> Result<SpectraMatrix> {
    let table = parse_table(HEMOGLOBIN_TABLE.as_bytes())?;
    let columns = chromophores
        .iter()
        .map(|c| match c.to_ascii_lowercase().as_str() {
            "hbo2" => Ok((HBO2, &table.hbo2)),
            "hhb" => Ok((HHB, &table.hhb)),
            _ => Err(Error::UnknownChromophore(c.to_string())),
        })
        .collect::<Result<Vec<_>>>()?;
    let (min, max) = (table.wavelengths[0], *table.wavelengths.last().unwrap());
    let (lo, hi) = (grid.as_slice()[0], *grid.as_slice().last().unwrap());
    if lo < min || hi > max {
        return Err(Error::GridOutOfTabulatedRange { lo, hi, min, max });
    }
    let mut values = Array2::zeros((grid.len(), columns.len()));
    for (j, (_, ys)) in columns.iter().enumerate() {
        for (i, &wl) in grid.as_slice().iter().enumerate() {
            values[[i, j]] = interpolate(&table.wavelengths, ys, wl);
        }
    }
    let peak = values.fold(0.0f64, |a, &b| a.max(b));
    values /= peak;
    SpectraMatrix::new(
        values,
        columns.iter().map(|(n, _)| n.to_string()).collect(),
    )
}

/// `[HbO2, HHb]` literature spectra on `grid`.
pub fn hemoglobin_spectra(grid: &WavelengthGrid) -> Result<SpectraMatrix> {
    literature_spectra(grid, &[HBO2, HHB])
}

/// Reads a `wavelength_nm,<name>,...` spectra CSV (the export format).
pub fn read_spectra_csv<R: Read>(rdr: R) -> Result<(WavelengthGrid, SpectraMatrix)> {
    let mut r = csv::Reader::from_reader(rdr);
    let headers = r.headers()?.clone();
    if headers.len() < 2 || headers[0].trim() != "wavelength_nm" {
        return Err(Error::Format("spectra CSV must start with `wavelength_nm`".into()));
    }
    let names: Vec<String> = headers
        .iter()
        .skip(1)
        .map(|h| match h.trim().to_ascii_lowercase().as_str() {
            "hbo2" => HBO2.to_string(),
            "hhb" => HHB.to_string(),
            other => other.to_string(),
        })
        .collect();
    let mut wl = vec![];
    let mut rows = vec![];
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("spectra CSV: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != names.len() + 1 {
            return Err(Error::Format("ragged spectra CSV row".into()));
        }
        wl.push(vals[0]);
        rows.extend_from_slice(&vals[1..]);
    }
    let grid = WavelengthGrid::new(wl)?;
    let values = Array2::from_shape_vec((grid.len(), names.len()), rows)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((grid, SpectraMatrix::new(values, names)?))
}

/// `‖E E⁺ E − E‖_F / ‖E‖_F`.
pub fn pinv_residual(spectra: &SpectraMatrix) -> Result<f64> {
    let e = spectra.values();
    let r = e.dot(&spectra.pinv()?).dot(&e) - e;
    let norm = |a: ArrayView2<'_, f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(norm(r.view()) / norm(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn default_grid_has_146_points() {
        let g = WavelengthGrid::default();
        assert_eq!(g.len(), 146);
        assert_eq!(g.as_slice()[0], 680.0);
        assert_eq!(*g.as_slice().last().unwrap(), 970.0);
    }

    #[test]
    fn grid_rejects_non_increasing() {
        assert!(WavelengthGrid::new(vec![700.0, 700.0]).is_err());
        assert!(WavelengthGrid::new(vec![700.0]).is_err());
    }

    #[test]
    fn hhb_dominates_at_760() {
        let g = WavelengthGrid::default();
        let e = hemoglobin_spectra(&g).unwrap();
        let i = g.as_slice().iter().position(|w| *w == 760.0).unwrap();
        assert_eq!(e.values().dim(), (146, 2));
        // table rows at 760 nm: HbO2 586, HHb 1548.52
        assert!(e.values()[[i, 1]] > e.values()[[i, 0]]);
        let peak = e.values().fold(0.0f64, |a, &b| a.max(b));
        assert_abs_diff_eq!(peak, 1.0, epsilon = 1e-15);
        assert!(e.values().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn single_chromophore_subset() {
        let e = literature_spectra(&WavelengthGrid::default(), &["HbO2"]).unwrap();
        assert_eq!(e.values().dim(), (146, 1));
        assert!(e.values().iter().all(|v| *v > 0.0));
        assert_eq!(e.names(), &["HbO2".to_string()]);
    }

    #[test]
    fn interpolation_hits_table_nodes_and_midpoints() {
        let g = WavelengthGrid::new(vec![760.0, 765.0]).unwrap();
        let e = literature_spectra(&g, &["HbO2", "HHb"]).unwrap();
        // rescaled by the max entry, which is HHb at 760
        let scale = 1548.52;
        assert_abs_diff_eq!(e.values()[[0, 0]], 586.0 / scale, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values()[[1, 0]], 618.0 / scale, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values()[[1, 1]], (1548.52 + 1311.88) / 2.0 / scale, epsilon = 1e-12);
    }

    #[test]
    fn unknown_and_out_of_range() {
        let g = WavelengthGrid::default();
        assert!(matches!(
            literature_spectra(&g, &["melanin"]),
            Err(Error::UnknownChromophore(_))
        ));
        let blue = WavelengthGrid::from_range(400.0, 500.0, 10.0).unwrap();
        assert!(matches!(
            literature_spectra(&blue, &["HbO2"]),
            Err(Error::GridOutOfTabulatedRange { .. })
        ));
    }

    #[test]
    fn pinv_of_orthonormal_columns_is_transpose() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let e = array![[s, 0.0], [s, 0.0], [0.0, 1.0]];
        let m = SpectraMatrix::new(e.clone(), names(2)).unwrap();
        for (a, b) in m.pinv().unwrap().iter().zip(e.t().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn pinv_of_single_column() {
        let m = SpectraMatrix::new(array![[1.0], [1.0]], names(1)).unwrap();
        let p = m.pinv().unwrap();
        assert_abs_diff_eq!(p[[0, 0]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[[0, 1]], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn identical_columns_are_rank_deficient() {
        let r = SpectraMatrix::new(array![[1.0, 1.0], [2.0, 2.0]], names(2));
        assert!(matches!(r, Err(Error::RankDeficientSpectra { .. })));
    }

    #[test]
    fn stale_pinv_is_rejected() {
        let mut m = SpectraMatrix::new(Array2::eye(2), names(2)).unwrap();
        m.set_values(array![[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(m.is_pinv_stale());
        assert!(matches!(m.unmix(array![[1.0, 1.0]].view()), Err(Error::StalePseudoinverse)));
        let m = m.compute_pinv().unwrap();
        assert!(m.unmix(array![[1.0, 1.0]].view()).is_ok());
    }

    #[test]
    fn identity_unmixing_and_rectification() {
        let m = SpectraMatrix::new(Array2::eye(2), names(2)).unwrap();
        let c = m.unmix(array![[0.3, 0.7], [-0.3, 0.7]].view()).unwrap();
        assert_eq!(c.values(), array![[0.3, 0.7], [0.0, 0.7]]);
        assert!(matches!(
            m.unmix(array![[0.3, 0.7, 0.1]].view()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn reconstruct_unit_and_zero() {
        let e = hemoglobin_spectra(&WavelengthGrid::default()).unwrap();
        let c = ConcentrationMatrix::new(array![[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let m = e.reconstruct_mu_a(&c).unwrap();
        assert!(m.row(0).iter().all(|v| *v == 0.0));
        assert_eq!(m.row(1), e.values().column(0));
    }

    #[test]
    fn round_trip_in_cone() {
        let e = hemoglobin_spectra(&WavelengthGrid::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Array2::from_shape_fn((50, 2), |_| rng.random::<f64>());
        let mu_a = c.dot(&e.values().t());
        let got = e.unmix(mu_a.view()).unwrap();
        for (a, b) in got.values().iter().zip(c.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let back = e.reconstruct_mu_a(&got).unwrap();
        for (a, b) in back.iter().zip(mu_a.iter()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn pinv_residual_small_for_literature() {
        let e = hemoglobin_spectra(&WavelengthGrid::default()).unwrap();
        assert!(pinv_residual(&e).unwrap() < 1e-10);
    }

    #[test]
    fn csv_export_round_trip() {
        let g = WavelengthGrid::default();
        let e = hemoglobin_spectra(&g).unwrap();
        let mut buf = vec![];
        e.write_csv(&g, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("wavelength_nm,hbo2,hhb\n"));
        let (g2, e2) = read_spectra_csv(buf.as_slice()).unwrap();
        assert_eq!(g, g2);
        assert_eq!(e.values(), e2.values());
        assert_eq!(e.names(), e2.names());
    }
}
