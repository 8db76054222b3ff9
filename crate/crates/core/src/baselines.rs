//! Linear spectral-unmixing controls: nonnegative least squares against fixed
//! spectra, and nonnegative matrix factorization seeded with those spectra.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectra::{ConcentrationMatrix, SpectraMatrix};

/// Default number of HALS sweeps.
pub const DEFAULT_SWEEPS: usize = 500;
/// Sweeps stop early once the relative objective decrease falls below this.
pub const RELATIVE_TOLERANCE: f64 = 1e-8;

/// Lawson–Hanson active-set NNLS for `min ‖E c − p‖², c ≥ 0`, working on the
/// normal equations so the per-pixel cost is independent of `L`.
#[derive(Clone, Debug)]
pub struct Nnls {
    gram: Array2<f64>,
    tol: f64,
}

impl Nnls {
    pub fn new(spectra: ArrayView2<'_, f64>) -> Result<Self> {
        let n = spectra.ncols();
        crate::spectra::pseudoinverse(spectra)?;
        let gram = spectra.t().dot(&spectra);
        let scale = gram.diag().iter().fold(0.0f64, |a, &b| a.max(b));
        Ok(Self {
            gram,
            tol: 1e-13 * scale.max(f64::MIN_POSITIVE) * n as f64,
        })
    }

    /// Solves one pixel given `Eᵀp`.
    pub fn solve(&self, etp: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.gram.nrows();
        let mut x = Array1::<f64>::zeros(n);
        let mut passive = vec![false; n];
        let gradient = |x: &Array1<f64>| &etp - &self.gram.dot(x);
        let mut w = gradient(&x);
        let tol = self.tol.max(1e-15 * etp.iter().fold(0.0f64, |a, b| a.max(b.abs())));

        for _outer in 0..3 * n + 10 {
            let candidate = (0..n)
                .filter(|&j| !passive[j] && w[j] > tol)
                .max_by(|&a, &b| w[a].total_cmp(&w[b]));
            let Some(j) = candidate else { break };
            passive[j] = true;

            for _inner in 0..3 * n + 10 {
                let z = self.solve_passive(&passive, etp);
                let infeasible: Vec<usize> = (0..n).filter(|&i| passive[i] && z[i] <= 0.0).collect();
                if infeasible.is_empty() {
                    x = z;
                    break;
                }
                let alpha = infeasible
                    .iter()
                    .map(|&i| x[i] / (x[i] - z[i]))
                    .fold(f64::INFINITY, f64::min);
                for i in 0..n {
                    x[i] += alpha * (z[i] - x[i]);
                    if passive[i] && x[i] <= tol.max(f64::EPSILON * x[i].abs()) {
                        x[i] = 0.0;
                        passive[i] = false;
                    }
                }
                if !passive.iter().any(|p| *p) {
                    break;
                }
            }
            w = gradient(&x);
        }
        x.mapv_inplace(|v| v.max(0.0));
        x
    }

    /// Unconstrained least squares restricted to the passive set.
    fn solve_passive(&self, passive: &[bool], etp: ArrayView1<'_, f64>) -> Array1<f64> {
        let idx: Vec<usize> = (0..passive.len()).filter(|&i| passive[i]).collect();
        let k = idx.len();
        let mut a = Array2::<f64>::zeros((k, k));
        let mut b = Array1::<f64>::zeros(k);
        for (r, &i) in idx.iter().enumerate() {
            b[r] = etp[i];
            for (c, &j) in idx.iter().enumerate() {
                a[[r, c]] = self.gram[[i, j]];
            }
        }
        let sol = cholesky_solve(a, b);
        let mut z = Array1::zeros(passive.len());
        for (r, &i) in idx.iter().enumerate() {
            z[i] = sol[r];
        }
        z
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (small).
fn cholesky_solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
    let n = b.len();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        let d = d.max(f64::MIN_POSITIVE).sqrt();
        a[[j, j]] = d;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[[i, k]] * b[k];
        }
        b[i] = s / a[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[[k, i]] * b[k];
        }
        b[i] = s / a[[i, i]];
    }
    b
}

/// Per-pixel exact NNLS against `spectra`, parallel over pixels.
pub fn nls_unmix(spectra: &SpectraMatrix, pixels: ArrayView2<'_, f64>) -> Result<ConcentrationMatrix> {
    nls_with(spectra.values(), pixels)
}

fn nls_with(spectra: ArrayView2<'_, f64>, pixels: ArrayView2<'_, f64>) -> Result<ConcentrationMatrix> {
    if pixels.ncols() != spectra.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "pixels have {} wavelengths, spectra {}",
            pixels.ncols(),
            spectra.nrows()
        )));
    }
    let solver = Nnls::new(spectra)?;
    let etp = pixels.dot(&spectra);
    let mut conc = Array2::zeros(etp.dim());
    conc.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(etp.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut out, rhs)| out.assign(&solver.solve(rhs)));
    Ok(ConcentrationMatrix::from_nonnegative(conc))
}

/// `C · Eᵀ`.
pub fn linear_reconstruction(spectra: ArrayView2<'_, f64>, conc: &ConcentrationMatrix) -> Array2<f64> {
    conc.values().dot(&spectra.t())
}

/// Factors found by [`nmf_unmix`].
#[derive(Clone, Debug)]
pub struct NmfResult {
    pub conc: ConcentrationMatrix,
    /// `L × N` spectra; each column keeps the peak value of its initial column.
    pub spectra: Array2<f64>,
    /// `‖C Eᵀ − P‖_F` at initialization and after every sweep.
    pub objective_trace: Vec<f64>,
}

fn frobenius_residual(c: &Array2<f64>, e: &Array2<f64>, p: ArrayView2<'_, f64>) -> f64 {
    let recon = c.dot(&e.t());
    recon
        .iter()
        .zip(p.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn column_peaks(e: &Array2<f64>) -> Vec<f64> {
    e.axis_iter(Axis(1))
        .map(|c| c.fold(0.0f64, |a, &b| a.max(b)))
        .collect()
}

/// HALS nonnegative matrix factorization `P ≈ C Eᵀ`.
///
/// `C` starts at the NNLS solution under `init_spectra`. After every sweep
/// each spectrum is rescaled back to the peak value of its initial column and
/// the compensating factor is folded into `C`, so the relative scale between
/// chromophores (and therefore SO2) stays anchored to the initial spectra.
pub fn nmf_unmix(
    init_spectra: &SpectraMatrix,
    pixels: ArrayView2<'_, f64>,
    sweeps: usize,
) -> Result<NmfResult> {
    if pixels.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::NegativeValue("pixels"));
    }
    if pixels.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroDataMatrix);
    }
    let mut c = nls_unmix(init_spectra, pixels)?.into_inner();
    let mut e = init_spectra.values().to_owned();
    let peaks = column_peaks(&e);
    let n = e.ncols();
    let mut trace = vec![frobenius_residual(&c, &e, pixels)];

    for _ in 0..sweeps {
        // C columns
        let pe = pixels.dot(&e);
        let ete = e.t().dot(&e);
        for k in 0..n {
            let d = ete[[k, k]];
            if d <= 0.0 {
                continue;
            }
            let update = (&pe.column(k) - &c.dot(&ete.column(k))) / d;
            let mut col = c.column_mut(k);
            col.zip_mut_with(&update, |v, u| *v = (*v + u).max(0.0));
        }
        // E columns
        let ptc = pixels.t().dot(&c);
        let ctc = c.t().dot(&c);
        for k in 0..n {
            let d = ctc[[k, k]];
            if d <= 0.0 {
                continue;
            }
            let update = (&ptc.column(k) - &e.dot(&ctc.column(k))) / d;
            let mut col = e.column_mut(k);
            col.zip_mut_with(&update, |v, u| *v = (*v + u).max(0.0));
        }
        // fix the scale ambiguity
        for (k, target) in peaks.iter().enumerate() {
            let peak = e.column(k).fold(0.0f64, |a, &b| a.max(b));
            if peak > 0.0 && *target > 0.0 {
                let s = target / peak;
                e.column_mut(k).mapv_inplace(|v| v * s);
                c.column_mut(k).mapv_inplace(|v| v / s);
            }
        }

        let prev = *trace.last().unwrap();
        let cur = frobenius_residual(&c, &e, pixels);
        trace.push(cur);
        if cur == 0.0 || prev - cur < RELATIVE_TOLERANCE * prev {
            break;
        }
    }

    Ok(NmfResult {
        conc: ConcentrationMatrix::from_nonnegative(c),
        spectra: e,
        objective_trace: trace,
    })
}
