//! Diffusion-approximation optical forward model.
//!
//! `p = Γφ₀ · exp(−μ_eff ρ) · μa` with `μ_eff = sqrt(3 μa (μa + μs′))`,
//! evaluated per pixel and wavelength. The combined Grüneisen × surface
//! fluence row `Γφ₀` is used throughout since the two factors cannot be
//! separated from pressure data alone.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::Real;

/// Absorption and reduced scattering coefficients (mm⁻¹), both `I × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalFields<F> {
    mu_a: Array2<F>,
    mu_s_prime: Array2<F>,
}

impl<F: Real> OpticalFields<F> {
    pub fn new(mu_a: Array2<F>, mu_s_prime: Array2<F>) -> Result<Self> {
        if mu_a.dim() != mu_s_prime.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mu_a {:?} vs mu_s' {:?}",
                mu_a.dim(),
                mu_s_prime.dim()
            )));
        }
        if mu_a.iter().any(|v| !(*v >= F::zero())) {
            return Err(Error::NegativeValue("mu_a"));
        }
        if mu_s_prime.iter().any(|v| !(*v >= F::zero())) {
            return Err(Error::NegativeValue("mu_s'"));
        }
        Ok(Self { mu_a, mu_s_prime })
    }

    pub fn mu_a(&self) -> ArrayView2<'_, F> {
        self.mu_a.view()
    }

    pub fn mu_s_prime(&self) -> ArrayView2<'_, F> {
        self.mu_s_prime.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mu_a.dim()
    }

    pub fn into_parts(self) -> (Array2<F>, Array2<F>) {
        (self.mu_a, self.mu_s_prime)
    }
}

/// `Γφ₀` (length L) and pixel depths ρ (length I, mm).
#[derive(Clone, Debug, PartialEq)]
pub struct FluenceParams<F> {
    gamma_phi0: Array1<F>,
    depths: Array1<F>,
}

impl<F: Real> FluenceParams<F> {
    pub fn new(gamma_phi0: Array1<F>, depths: Array1<F>) -> Result<Self> {
        if gamma_phi0.iter().any(|v| !(*v >= F::zero())) {
            return Err(Error::NegativeValue("gamma_phi0"));
        }
        if depths.iter().any(|v| !(*v >= F::zero())) {
            return Err(Error::NegativeValue("depths"));
        }
        Ok(Self { gamma_phi0, depths })
    }

    /// `Γφ₀ = 1` at every wavelength.
    pub fn unit(wavelengths: usize, depths: Array1<F>) -> Result<Self> {
        Self::new(Array1::from_elem(wavelengths, F::one()), depths)
    }

    pub fn gamma_phi0(&self) -> ArrayView1<'_, F> {
        self.gamma_phi0.view()
    }

    pub fn depths(&self) -> ArrayView1<'_, F> {
        self.depths.view()
    }

    fn check(&self, fields: &OpticalFields<F>) -> Result<()> {
        let (i, l) = fields.dim();
        if self.gamma_phi0.len() != l || self.depths.len() != i {
            return Err(Error::DimensionMismatch(format!(
                "fields {i}x{l}, gamma_phi0 {}, depths {}",
                self.gamma_phi0.len(),
                self.depths.len()
            )));
        }
        Ok(())
    }
}

/// Nonlinear multiplier `Ψ = exp(−μ_eff ρ) − 1` and the pressure it yields.
#[derive(Clone, Debug)]
pub struct Decomposition<F> {
    pub multiplier: Array2<F>,
    pub pressure: Array2<F>,
}

#[inline]
pub(crate) fn mu_eff<F: Real>(mu_a: F, mu_s: F) -> F {
    (F::of(3.0) * mu_a * (mu_a + mu_s)).sqrt()
}

/// `μ_eff = sqrt(3 μa (μa + μs′))`, elementwise.
pub fn effective_attenuation<F: Real>(fields: &OpticalFields<F>) -> Array2<F> {
    effective_attenuation_views(fields.mu_a(), fields.mu_s_prime())
}

pub(crate) fn effective_attenuation_views<F: Real>(
    mu_a: ArrayView2<'_, F>,
    mu_s: ArrayView2<'_, F>,
) -> Array2<F> {
    Zip::from(&mu_a).and(&mu_s).map_collect(|&a, &s| mu_eff(a, s))
}

/// `Φ = Γφ₀ · exp(−μ_eff ρ)`.
pub fn fluence<F: Real>(fields: &OpticalFields<F>, params: &FluenceParams<F>) -> Result<Array2<F>> {
    params.check(fields)?;
    let mut phi = effective_attenuation(fields);
    for (mut row, &rho) in phi.rows_mut().into_iter().zip(&params.depths) {
        Zip::from(&mut row)
            .and(&params.gamma_phi0)
            .for_each(|m, &g| *m = g * (-*m * rho).exp());
    }
    Ok(phi)
}

/// `p = Φ ⊙ μa` evaluated directly.
pub fn forward_pressure<F: Real>(
    fields: &OpticalFields<F>,
    params: &FluenceParams<F>,
) -> Result<Array2<F>> {
    let mut p = fluence(fields, params)?;
    p.zip_mut_with(&fields.mu_a, |p, &a| *p = *p * a);
    Ok(p)
}

/// `p = Γφ₀ ⊙ (Ψ ⊙ μa + μa)`: the linear term plus the nonlinear correction.
pub fn forward_decomposed<F: Real>(
    fields: &OpticalFields<F>,
    params: &FluenceParams<F>,
) -> Result<Decomposition<F>> {
    params.check(fields)?;
    let multiplier = nonlinear_multiplier(fields.mu_a(), fields.mu_s_prime(), params.depths());
    let pressure = decomposed_pressure(multiplier.view(), fields.mu_a(), params.gamma_phi0());
    Ok(Decomposition {
        multiplier,
        pressure,
    })
}

pub(crate) fn nonlinear_multiplier<F: Real>(
    mu_a: ArrayView2<'_, F>,
    mu_s: ArrayView2<'_, F>,
    depths: ArrayView1<'_, F>,
) -> Array2<F> {
    let mut psi = effective_attenuation_views(mu_a, mu_s);
    for (mut row, &rho) in psi.rows_mut().into_iter().zip(depths) {
        // exp_m1 keeps Ψ exactly 0 at the surface and accurate for small μ_eff ρ
        row.mapv_inplace(|m| (-m * rho).exp_m1());
    }
    psi
}

pub(crate) fn decomposed_pressure<F: Real>(
    psi: ArrayView2<'_, F>,
    mu_a: ArrayView2<'_, F>,
    gamma_phi0: ArrayView1<'_, F>,
) -> Array2<F> {
    let mut p = Array2::zeros(mu_a.dim());
    for ((mut out, psi), a) in p.rows_mut().into_iter().zip(psi.rows()).zip(mu_a.rows()) {
        Zip::from(&mut out)
            .and(&psi)
            .and(&a)
            .and(&gamma_phi0)
            .for_each(|o, &s, &a, &g| *o = g * (s * a + a));
    }
    p
}
