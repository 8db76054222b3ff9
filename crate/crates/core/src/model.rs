//! SPOI-AE: two encoders (μa-Net, μs′-Net), latent unmixing through the
//! spectra pseudoinverse, the physics decoder, the α·MSE + β·MSAD loss, the
//! training loop and checkpoints.
//!
//! Decoder chain for a batch `P` with depths ρ:
//!
//! ```text
//! Ma = μa-Net(P)           Ms = μs′-Net(P)
//! Ĉ  = ReLU(Ma E⁺ᵀ)        M̂a = ReLU(Ĉ Eᵀ)
//! Ψ  = exp(−sqrt(3 M̂a (M̂a + Ms)) ρ) − 1
//! P̂  = Γφ₀ ⊙ (Ψ ⊙ M̂a + M̂a)
//! ```
//!
//! Gradients flow through the explicit `E` factor; `E⁺` is treated as a
//! constant and refreshed after every optimizer step.

use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::PixelBatch;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::forward::{decomposed_pressure, effective_attenuation_views, nonlinear_multiplier, OpticalFields};
use crate::io::{TensorFile, TensorRecord};
use crate::linalg::{matmul, matmul_tn};
use crate::metrics::{sad_cosine, so2, So2Map};
use crate::nn::{adam_step, AdamState, BatchNormParams, BlockCache, DenseLayerParams, LayerBlock, Mlp, Mode};
use crate::spectra::{pseudoinverse, ConcentrationMatrix, SpectraMatrix};
use crate::Real;

/// RNG stream ids derived from the training seed.
const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Rows per chunk during inference (bounds memory on large images).
const INFER_CHUNK: usize = 4096;

/// Learnable state of SPOI-AE.
#[derive(Clone, Debug, PartialEq)]
pub struct SpoiModel<F> {
    pub mua_net: Mlp<F>,
    pub mus_net: Mlp<F>,
    /// `L × N` spectra `E`.
    spectra: Array2<F>,
    /// `N × L` pseudoinverse of `spectra`, treated as constant in backprop.
    spectra_pinv: Array2<F>,
    chromophores: Vec<String>,
    /// `1 × L` combined Grüneisen × surface fluence.
    pub gamma_phi0: Array2<F>,
    /// Whether `E` is learned.
    pub adjust_e: bool,
    /// Unit of the μa-Net output: `μa = mua_unit · μa-Net(P)` (mm⁻¹).
    pub mua_unit: F,
}

fn cast2<F: Real, G: Real>(a: &Array2<F>) -> Array2<G> {
    a.mapv(|v| G::of(v.f64()))
}

fn pinv_of<F: Real>(e: &Array2<F>) -> Result<Array2<F>> {
    Ok(cast2(&pseudoinverse(cast2::<F, f64>(e).view())?))
}

/// Encoder outputs plus the caches their backward passes need.
#[derive(Clone, Debug)]
pub struct ForwardPass<F> {
    pub fields: OpticalFields<F>,
    /// `Ĉ`, `I × N`.
    pub conc: Array2<F>,
    /// `M̂a`, `I × L`.
    pub mu_a_hat: Array2<F>,
    /// `P̂`, `I × L`.
    pub pressure_hat: Array2<F>,
    mua_caches: Vec<BlockCache<F>>,
    mus_caches: Vec<BlockCache<F>>,
    pre_conc: Array2<F>,
    pre_mu_a_hat: Array2<F>,
    depths: Array1<F>,
}

impl<F: Real> SpoiModel<F> {
    /// Fresh model: networks initialized from `rng`, `Γφ₀ = 1`, `E` from `spectra`.
    pub fn new<R: rand::Rng>(
        spectra: &SpectraMatrix,
        config: &ModelConfig,
        adjust_e: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let widths = &config.hidden_widths;
        let l = spectra.wavelength_count();
        let chain = |hidden: &[usize]| {
            let mut w = vec![l];
            w.extend_from_slice(hidden);
            w.push(l);
            w
        };
        let mua_net = Mlp::new(&chain(&widths.mua), rng);
        let mus_net = Mlp::new(&chain(&widths.mus), rng);
        Ok(Self {
            mua_net,
            mus_net,
            spectra: cast2(&spectra.values().to_owned()),
            spectra_pinv: cast2(&spectra.pinv()?.to_owned()),
            chromophores: spectra.names().to_vec(),
            gamma_phi0: Array2::ones((1, l)),
            adjust_e,
            mua_unit: F::of(config.mua_unit),
        })
    }

    pub fn wavelength_count(&self) -> usize {
        self.spectra.nrows()
    }

    pub fn chromophore_count(&self) -> usize {
        self.spectra.ncols()
    }

    pub fn chromophores(&self) -> &[String] {
        &self.chromophores
    }

    pub fn spectra_values(&self) -> ArrayView2<'_, F> {
        self.spectra.view()
    }

    /// Current `E` as a validated [`SpectraMatrix`].
    pub fn spectra(&self) -> Result<SpectraMatrix> {
        SpectraMatrix::new(cast2(&self.spectra), self.chromophores.clone())
    }

    /// Replaces `E` and recomputes its pseudoinverse.
    pub fn set_spectra(&mut self, values: Array2<F>) -> Result<()> {
        if values.dim() != self.spectra.dim() {
            return Err(Error::DimensionMismatch(format!(
                "spectra {:?}, expected {:?}",
                values.dim(),
                self.spectra.dim()
            )));
        }
        if values.iter().any(|v| !(*v >= F::zero())) {
            return Err(Error::NegativeValue("spectra"));
        }
        self.spectra_pinv = pinv_of(&values)?;
        self.spectra = values;
        Ok(())
    }

    /// Clamps `E` and `Γφ₀` at zero and refreshes `E⁺`.
    pub fn project(&mut self) -> Result<()> {
        self.gamma_phi0.mapv_inplace(|v| v.max(F::zero()));
        if self.adjust_e {
            self.spectra.mapv_inplace(|v| v.max(F::zero()));
            self.spectra_pinv = pinv_of(&self.spectra)?;
        }
        Ok(())
    }

    /// Learnable tensors in a fixed order (see [`SpoiModel::param_names`]).
    /// Mutating `spectra` through this does not refresh `E⁺`; call
    /// [`SpoiModel::project`] afterwards.
    pub fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        let mut v = self.mua_net.params_mut();
        v.extend(self.mus_net.params_mut());
        v.push(&mut self.gamma_phi0);
        if self.adjust_e {
            v.push(&mut self.spectra);
        }
        v
    }

    pub fn params(&self) -> Vec<&Array2<F>> {
        let mut v = self.mua_net.params();
        v.extend(self.mus_net.params());
        v.push(&self.gamma_phi0);
        if self.adjust_e {
            v.push(&self.spectra);
        }
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = self.mua_net.param_names("mua");
        v.extend(self.mus_net.param_names("mus"));
        v.push("gamma_phi0".into());
        if self.adjust_e {
            v.push("spectra".into());
        }
        v
    }

    pub fn cast<G: Real>(&self) -> SpoiModel<G> {
        SpoiModel {
            mua_net: self.mua_net.cast(),
            mus_net: self.mus_net.cast(),
            spectra: cast2(&self.spectra),
            spectra_pinv: cast2(&self.spectra_pinv),
            chromophores: self.chromophores.clone(),
            gamma_phi0: cast2(&self.gamma_phi0),
            adjust_e: self.adjust_e,
            mua_unit: G::of(self.mua_unit.f64()),
        }
    }

    fn check_width(&self, l: usize) -> Result<()> {
        if l != self.wavelength_count() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} wavelengths, batch has {l}",
                self.wavelength_count()
            )));
        }
        Ok(())
    }

    /// `(μa, μs′) = (μa-Net(P), μs′-Net(P))`.
    pub fn encode(&self, pixels: ArrayView2<'_, F>, mode: Mode) -> Result<OpticalFields<F>> {
        self.check_width(pixels.ncols())?;
        let (mu_a, _) = self.mua_net.forward(pixels, mode)?;
        let (mu_s, _) = self.mus_net.forward(pixels, mode)?;
        OpticalFields::new(mu_a * self.mua_unit, mu_s)
    }

    /// Physics decoder: returns `(Ĉ, M̂a, P̂)` for the given fields and depths.
    pub fn decode(
        &self,
        fields: &OpticalFields<F>,
        depths: ArrayView1<'_, F>,
    ) -> Result<(Array2<F>, Array2<F>, Array2<F>)> {
        let d = self.decode_inner(fields.mu_a(), fields.mu_s_prime(), depths)?;
        Ok((d.conc, d.mu_a_hat, d.pressure_hat))
    }

    fn decode_inner(
        &self,
        mu_a: ArrayView2<'_, F>,
        mu_s: ArrayView2<'_, F>,
        depths: ArrayView1<'_, F>,
    ) -> Result<Decoded<F>> {
        self.check_width(mu_a.ncols())?;
        if depths.len() != mu_a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} depths for {} pixels",
                depths.len(),
                mu_a.nrows()
            )));
        }
        let pre_conc = matmul(mu_a, self.spectra_pinv.t());
        let conc = pre_conc.mapv(|v| v.max(F::zero()));
        let pre_mu_a_hat = matmul(conc.view(), self.spectra.t());
        let mu_a_hat = pre_mu_a_hat.mapv(|v| v.max(F::zero()));
        let psi = nonlinear_multiplier(mu_a_hat.view(), mu_s, depths);
        let gamma = self.gamma_phi0.row(0);
        let pressure_hat = decomposed_pressure(psi.view(), mu_a_hat.view(), gamma);
        Ok(Decoded {
            pre_conc,
            conc,
            pre_mu_a_hat,
            mu_a_hat,
            pressure_hat,
        })
    }

    /// Full forward pass keeping everything the backward pass needs.
    pub fn forward(&self, pixels: ArrayView2<'_, F>, depths: ArrayView1<'_, F>, mode: Mode) -> Result<ForwardPass<F>> {
        self.check_width(pixels.ncols())?;
        let (mu_a, mua_caches) = self.mua_net.forward(pixels, mode)?;
        let mu_a = mu_a * self.mua_unit;
        let (mu_s, mus_caches) = self.mus_net.forward(pixels, mode)?;
        let d = self.decode_inner(mu_a.view(), mu_s.view(), depths)?;
        Ok(ForwardPass {
            fields: OpticalFields::new(mu_a, mu_s)?,
            conc: d.conc,
            mu_a_hat: d.mu_a_hat,
            pressure_hat: d.pressure_hat,
            mua_caches,
            mus_caches,
            pre_conc: d.pre_conc,
            pre_mu_a_hat: d.pre_mu_a_hat,
            depths: depths.to_owned(),
        })
    }

    /// Gradients of a scalar loss with respect to [`SpoiModel::params`],
    /// given `dL/dP̂`.
    pub fn backward(&self, pass: &ForwardPass<F>, grad_p_hat: ArrayView2<'_, F>) -> Vec<Array2<F>> {
        let zero = F::zero();
        let three = F::of(3.0);
        let two = F::of(2.0);
        let mu_s = pass.fields.mu_s_prime();
        let m_eff = effective_attenuation_views(pass.mu_a_hat.view(), mu_s);
        let mut grad_a = Array2::<F>::zeros(pass.mu_a_hat.dim());
        let mut grad_s = Array2::<F>::zeros(pass.mu_a_hat.dim());
        let mut grad_gamma = Array2::<F>::zeros((1, self.wavelength_count()));
        let gamma = self.gamma_phi0.row(0);
        for (i, &rho) in pass.depths.iter().enumerate() {
            for l in 0..self.wavelength_count() {
                let (dp, a, ms, m, g) = (
                    grad_p_hat[[i, l]],
                    pass.mu_a_hat[[i, l]],
                    mu_s[[i, l]],
                    m_eff[[i, l]],
                    gamma[l],
                );
                let x = (-m * rho).exp();
                grad_gamma[[0, l]] = grad_gamma[[0, l]] + dp * x * a;
                let mut da = dp * g * x;
                // μ_eff = 0 only when M̂a = 0, where the chain-rule term vanishes
                if m > zero {
                    let d_meff = -dp * g * a * rho * x;
                    da = da + d_meff * three * (two * a + ms) / (two * m);
                    grad_s[[i, l]] = d_meff * three * a / (two * m);
                }
                grad_a[[i, l]] = da;
            }
        }
        // ReLU right derivative: pass the gradient where the pre-activation is >= 0.
        let mask = |g: &mut Array2<F>, pre: &Array2<F>| {
            Zip::from(g).and(pre).for_each(|g, &p| {
                if p < zero {
                    *g = zero
                }
            })
        };
        let mut grad_t = grad_a;
        mask(&mut grad_t, &pass.pre_mu_a_hat);
        let grad_e = self.adjust_e.then(|| matmul_tn(grad_t.view(), pass.conc.view()));
        let mut grad_c = matmul(grad_t.view(), self.spectra.view());
        mask(&mut grad_c, &pass.pre_conc);
        let grad_mu_a = matmul(grad_c.view(), self.spectra_pinv.view()) * self.mua_unit;

        let (_, mua_grads) = self.mua_net.backward(&pass.mua_caches, grad_mu_a);
        let (_, mus_grads) = self.mus_net.backward(&pass.mus_caches, grad_s);
        let mut out: Vec<Array2<F>> = mua_grads.into_iter().flat_map(|g| g.into_vec()).collect();
        out.extend(mus_grads.into_iter().flat_map(|g| g.into_vec()));
        out.push(grad_gamma);
        out.extend(grad_e);
        out
    }

    /// Sets every `Γφ₀` entry to the least-squares scalar `⟨P, P̂⟩ / ⟨P̂, P̂⟩`
    /// of the current eval-mode reconstruction. Returns the scale applied.
    pub fn fit_gamma_scale(&mut self, batch: &PixelBatch) -> Result<f64> {
        let r = self.infer(batch)?;
        let num: f64 = batch.pixels().iter().zip(r.pressure_hat.iter()).map(|(a, b)| a * b).sum();
        let den: f64 = r.pressure_hat.iter().map(|b| b * b).sum();
        if !(den > 0.0 && num > 0.0) {
            return Ok(1.0);
        }
        let scale = num / den;
        self.gamma_phi0.mapv_inplace(|g| g * F::of(scale));
        Ok(scale)
    }

    /// Eval-mode inference in `f64`.
    pub fn infer(&self, batch: &PixelBatch) -> Result<UnmixResult> {
        self.check_width(batch.wavelength_count())?;
        let (i, l) = batch.pixels().dim();
        let n = self.chromophore_count();
        let mut out = UnmixResult {
            conc: ConcentrationMatrix::from_nonnegative(Array2::zeros((i, n))),
            mu_a: Array2::zeros((i, l)),
            mu_a_hat: Array2::zeros((i, l)),
            mu_s_prime: Array2::zeros((i, l)),
            pressure_hat: Array2::zeros((i, l)),
            so2: So2Map { values: vec![] },
        };
        let mut conc = Array2::zeros((i, n));
        for start in (0..i).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(i);
            let p: Array2<F> = cast2(&batch.pixels().slice(s![start..end, ..]).to_owned());
            let d: Array1<F> = batch.depths().slice(s![start..end]).mapv(F::of);
            let pass = self.forward(p.view(), d.view(), Mode::Eval)?;
            let rows = s![start..end, ..];
            conc.slice_mut(rows).assign(&cast2::<F, f64>(&pass.conc));
            out.mu_a.slice_mut(rows).assign(&cast2::<F, f64>(&pass.fields.mu_a().to_owned()));
            out.mu_s_prime
                .slice_mut(rows)
                .assign(&cast2::<F, f64>(&pass.fields.mu_s_prime().to_owned()));
            out.mu_a_hat.slice_mut(rows).assign(&cast2::<F, f64>(&pass.mu_a_hat));
            out.pressure_hat.slice_mut(rows).assign(&cast2::<F, f64>(&pass.pressure_hat));
        }
        out.conc = ConcentrationMatrix::from_nonnegative(conc);
        out.so2 = if n == 2 {
            so2(&out.conc)?
        } else {
            So2Map { values: vec![None; i] }
        };
        Ok(out)
    }
}

struct Decoded<F> {
    pre_conc: Array2<F>,
    conc: Array2<F>,
    pre_mu_a_hat: Array2<F>,
    mu_a_hat: Array2<F>,
    pressure_hat: Array2<F>,
}

/// Per-pixel outputs of a trained model.
#[derive(Clone, Debug)]
pub struct UnmixResult {
    pub conc: ConcentrationMatrix,
    pub mu_a: Array2<f64>,
    pub mu_a_hat: Array2<f64>,
    pub mu_s_prime: Array2<f64>,
    pub pressure_hat: Array2<f64>,
    pub so2: So2Map,
}

/// Loss value and its two terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub msad: f64,
    pub loss: f64,
}

fn check_loss_shapes<F>(p: ArrayView2<'_, F>, p_hat: ArrayView2<'_, F>) -> Result<()> {
    if p.dim() != p_hat.dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", p.dim(), p_hat.dim())));
    }
    if p.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// `α·MSE + β·MSAD` (values accumulated in `f64`).
pub fn loss<F: Real>(p: ArrayView2<'_, F>, p_hat: ArrayView2<'_, F>, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    Ok(loss_terms(p, p_hat, alpha, beta, false)?.0)
}

/// Loss plus `dL/dP̂`.
pub fn loss_with_grad<F: Real>(
    p: ArrayView2<'_, F>,
    p_hat: ArrayView2<'_, F>,
    alpha: f64,
    beta: f64,
) -> Result<(LossBreakdown, Array2<F>)> {
    let (l, g) = loss_terms(p, p_hat, alpha, beta, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn loss_terms<F: Real>(
    p: ArrayView2<'_, F>,
    p_hat: ArrayView2<'_, F>,
    alpha: f64,
    beta: f64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Array2<F>>)> {
    check_loss_shapes(p, p_hat)?;
    let rows = p.nrows() as f64;
    let mut grad = want_grad.then(|| Array2::<F>::zeros(p.dim()));
    let (mut sq, mut sad_sum) = (0.0, 0.0);
    for (i, (pr, qr)) in p.rows().into_iter().zip(p_hat.rows()).enumerate() {
        let (mut dot, mut pp, mut qq, mut err) = (0.0, 0.0, 0.0, 0.0);
        for (&a, &b) in pr.iter().zip(qr.iter()) {
            let (a, b) = (a.f64(), b.f64());
            dot += a * b;
            pp += a * a;
            qq += b * b;
            err += (a - b) * (a - b);
        }
        let (np, nq) = (pp.sqrt(), qq.sqrt());
        let denom = np * nq + crate::metrics::SAD_EPSILON;
        let raw = dot / denom;
        let u = sad_cosine(dot, np, nq);
        sq += err;
        sad_sum += u.acos() / std::f64::consts::FRAC_PI_2;
        if let Some(g) = grad.as_mut() {
            // d acos(u)/du scaled by 2/π; zero where the clamp is active.
            let d_sad_du = if raw.abs() <= 1.0 {
                -1.0 / (1.0 - u * u).max(1e-12).sqrt() / std::f64::consts::FRAC_PI_2
            } else {
                0.0
            };
            for (k, gk) in g.row_mut(i).iter_mut().enumerate() {
                let (a, b) = (pr[k].f64(), qr[k].f64());
                let mut du = a / denom;
                if nq > 0.0 {
                    du -= dot * np * (b / nq) / (denom * denom);
                }
                let v = alpha * 2.0 * (b - a) / rows + beta * d_sad_du * du / rows;
                *gk = F::of(v);
            }
        }
    }
    let mse = sq / rows;
    let msad = sad_sum / rows;
    Ok((
        LossBreakdown {
            mse,
            msad,
            loss: alpha * mse + beta * msad,
        },
        grad,
    ))
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_msad: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_msad: Option<f64>,
    pub wall_ms: u64,
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub model: SpoiModel<F>,
    pub history: Vec<EpochRecord>,
    pub adam: AdamState<F>,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded train/eval split: returns `(train, eval)` index lists, each sorted.
pub fn split_indices(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let n_eval = ((n as f64) * eval_fraction).round() as usize;
    let n_eval = n_eval.min(n.saturating_sub(2));
    let mut eval = idx[..n_eval].to_vec();
    let mut train = idx[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    (train, eval)
}

/// Initializes a model from `config.seed` and trains it on `data`.
pub fn train<F: Real>(
    data: &PixelBatch,
    spectra: &SpectraMatrix,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<F>> {
    let model = SpoiModel::new(spectra, model_config, config.adjust_e, &mut stream_rng(config.seed, STREAM_INIT))?;
    train_model(model, data, config, on_epoch)
}

/// Learning rate for `epoch` under the cosine schedule of `config`.
pub fn annealed_learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    let lr = config.learning_rate;
    if config.epochs < 2 {
        return lr;
    }
    let t = epoch as f64 / (config.epochs - 1) as f64;
    let floor = lr * config.final_lr_fraction;
    floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Trains an existing model with shuffled mini-batch Adam. `config.adjust_e`
/// overrides the model's flag.
pub fn train_model<F: Real>(
    mut model: SpoiModel<F>,
    data: &PixelBatch,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    model.check_width(data.wavelength_count())?;
    model.adjust_e = config.adjust_e;
    let (train_indices, eval_indices) = split_indices(data.len(), config.eval_fraction, config.seed);
    if train_indices.len() < 2 {
        return Err(Error::BatchTooSmall(train_indices.len()));
    }
    let pixels: Array2<F> = cast2(&data.pixels().to_owned());
    let depths: Array1<F> = data.depths().mapv(F::of);
    let eval_set = (!eval_indices.is_empty()).then(|| data.select(&eval_indices));
    if config.fit_gamma_init && config.epochs > 0 {
        let train_set = data.select(&train_indices);
        let train_pixels: Array2<F> = cast2(&train_set.pixels().to_owned());
        model.mua_net.recalibrate(train_pixels.view(), INFER_CHUNK)?;
        model.mus_net.recalibrate(train_pixels.view(), INFER_CHUNK)?;
        model.fit_gamma_scale(&train_set)?;
    }
    let mut adam = AdamState::new(config.learning_rate);
    let mut shuffle_rng = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut order = train_indices.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let names = model.param_names();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        adam.learning_rate = annealed_learning_rate(config, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut mse_sum, mut msad_sum, mut seen) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let p = pixels.select(Axis(0), chunk);
            let d = depths.select(Axis(0), chunk);
            let pass = model.forward(p.view(), d.view(), Mode::Train)?;
            let (terms, grad) = loss_with_grad(p.view(), pass.pressure_hat.view(), config.alpha, config.beta)?;
            if !terms.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("mse={}, msad={}", terms.mse, terms.msad),
                });
            }
            let grads = model.backward(&pass, grad.view());
            adam_step(&mut model.params_mut(), &grads, &mut adam, &names)?;
            model.mua_net.update_running(&pass.mua_caches);
            model.mus_net.update_running(&pass.mus_caches);
            model.project()?;
            mse_sum += terms.mse * chunk.len() as f64;
            msad_sum += terms.msad * chunk.len() as f64;
            seen += chunk.len();
        }
        let (train_mse, train_msad) = (mse_sum / seen as f64, msad_sum / seen as f64);
        if config.recalibrate_bn && epoch + 1 == config.epochs {
            let train_pixels = pixels.select(Axis(0), &train_indices);
            model.mua_net.recalibrate(train_pixels.view(), INFER_CHUNK)?;
            model.mus_net.recalibrate(train_pixels.view(), INFER_CHUNK)?;
        }
        let (eval_mse, eval_msad) = match &eval_set {
            Some(e) => {
                let r = model.infer(e)?;
                let t = loss(e.pixels(), r.pressure_hat.view(), config.alpha, config.beta)?;
                (Some(t.mse), Some(t.msad))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_mse,
            train_msad,
            loss: config.alpha * train_mse + config.beta * train_msad,
            eval_mse,
            eval_msad,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        model,
        history,
        adam,
        train_indices,
        eval_indices,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    step_count: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

fn push_mlp<F: Real>(file: &mut TensorFile, net: &Mlp<F>, prefix: &str) -> Result<()> {
    for (j, b) in net.blocks.iter().enumerate() {
        file.push_array2(&format!("{prefix}.{j}.weight"), b.dense.weights.view())?;
        file.push_array2(&format!("{prefix}.{j}.bias"), b.dense.bias.view())?;
        if let Some(bn) = &b.norm {
            file.push_array2(&format!("{prefix}.{j}.bn_gamma"), bn.gamma.view())?;
            file.push_array2(&format!("{prefix}.{j}.bn_beta"), bn.beta.view())?;
            file.push_array2(&format!("running/{prefix}.{j}.mean"), bn.running_mean.view())?;
            file.push_array2(&format!("running/{prefix}.{j}.var"), bn.running_var.view())?;
        }
    }
    Ok(())
}

fn read_array<G: Real>(file: &TensorFile, name: &str) -> Result<Array2<G>> {
    Ok(cast2(&file.require(name)?.to_array2()?))
}

fn read_mlp<G: Real>(file: &TensorFile, prefix: &str, bn_meta: (f64, f64)) -> Result<Mlp<G>> {
    let mut blocks = vec![];
    for j in 0.. {
        let key = |t: &str| format!("{prefix}.{j}.{t}");
        if file.get(&key("weight")).is_none() {
            break;
        }
        let dense = DenseLayerParams {
            weights: read_array(file, &key("weight"))?,
            bias: read_array(file, &key("bias"))?,
        };
        let norm = match file.get(&key("bn_gamma")) {
            Some(_) => Some(BatchNormParams {
                gamma: read_array(file, &key("bn_gamma"))?,
                beta: read_array(file, &key("bn_beta"))?,
                running_mean: read_array(file, &format!("running/{prefix}.{j}.mean"))?,
                running_var: read_array(file, &format!("running/{prefix}.{j}.var"))?,
                momentum: bn_meta.0,
                epsilon: bn_meta.1,
            }),
            None => None,
        };
        blocks.push(LayerBlock { dense, norm });
    }
    if blocks.is_empty() {
        return Err(Error::Format(format!("checkpoint has no `{prefix}` network")));
    }
    for w in blocks.windows(2) {
        if w[0].dense.fan_out() != w[1].dense.fan_in() {
            return Err(Error::Format(format!("`{prefix}` layer widths do not chain")));
        }
    }
    Ok(Mlp { blocks })
}

fn encode_text(s: &str) -> Vec<f32> {
    s.bytes().map(f32::from).collect()
}

fn decode_text(rec: &TensorRecord) -> Result<String> {
    let bytes = rec
        .data
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("tensor `{}` is not byte text", rec.name)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Format(format!("tensor `{}` is not UTF-8", rec.name)))
}

/// Stores text as one byte value per `f32` entry.
pub fn text_record(name: &str, text: &str) -> TensorRecord {
    let data = encode_text(text);
    TensorRecord::new(name, vec![data.len()], data).expect("rank-1 shape matches")
}

/// Inverse of [`text_record`].
pub fn read_text_record(file: &TensorFile, name: &str) -> Result<String> {
    decode_text(file.require(name)?)
}

impl<F: Real> SpoiModel<F> {
    /// Serializes the model, and the optimizer state if given.
    pub fn to_tensor_file(&self, adam: Option<&AdamState<F>>) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        push_mlp(&mut f, &self.mua_net, "mua")?;
        push_mlp(&mut f, &self.mus_net, "mus")?;
        f.push_array2("gamma_phi0", self.gamma_phi0.view())?;
        f.push_array2("spectra", self.spectra.view())?;
        f.push(text_record("meta/chromophores", &self.chromophores.join("\n")))?;
        f.push_vec("meta/adjust_e", &[if self.adjust_e { 1.0 } else { 0.0 }])?;
        f.push(text_record("meta/mua_unit", &serde_json::to_string(&self.mua_unit.f64())?))?;
        let bn = self
            .mua_net
            .blocks
            .iter()
            .find_map(|b| b.norm.as_ref())
            .map(|n| (n.momentum, n.epsilon))
            .unwrap_or((crate::nn::BN_MOMENTUM, crate::nn::BN_EPSILON));
        // f64 metadata travels as JSON text so it round-trips exactly
        f.push(text_record("meta/bn", &serde_json::to_string(&[bn.0, bn.1])?))?;
        if let Some(a) = adam {
            let meta = AdamMeta {
                step_count: a.step_count,
                learning_rate: a.learning_rate,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            };
            f.push(text_record("adam/state", &serde_json::to_string(&meta)?))?;
            let names = self.param_names();
            for (k, name) in names.iter().enumerate() {
                if let (Some(m), Some(v)) = (a.first_moment.get(k), a.second_moment.get(k)) {
                    f.push_array2(&format!("adam.m/{name}"), m.view())?;
                    f.push_array2(&format!("adam.v/{name}"), v.view())?;
                }
            }
        }
        Ok(f)
    }

    /// Rebuilds a model (and optimizer state, if stored) from a checkpoint.
    pub fn from_tensor_file(file: &TensorFile) -> Result<(Self, Option<AdamState<F>>)> {
        let bn: (f64, f64) = serde_json::from_str(&read_text_record(file, "meta/bn")?)?;
        let mua_net = read_mlp(file, "mua", bn)?;
        let mus_net = read_mlp(file, "mus", bn)?;
        let spectra: Array2<F> = read_array(file, "spectra")?;
        let gamma_phi0: Array2<F> = read_array(file, "gamma_phi0")?;
        let chromophores: Vec<String> = read_text_record(file, "meta/chromophores")?
            .split('\n')
            .map(str::to_owned)
            .collect();
        let adjust_e = file.require("meta/adjust_e")?.data.first().copied() == Some(1.0);
        let mua_unit: f64 = serde_json::from_str(&read_text_record(file, "meta/mua_unit")?)?;
        if !(mua_unit > 0.0 && mua_unit.is_finite()) {
            return Err(Error::Format("meta/mua_unit must be a positive number".into()));
        }
        let l = spectra.nrows();
        if chromophores.len() != spectra.ncols() {
            return Err(Error::Format("chromophore names do not match spectra columns".into()));
        }
        for (name, net) in [("mua", &mua_net), ("mus", &mus_net)] {
            let first = net.blocks[0].dense.fan_in();
            let last = net.blocks[net.blocks.len() - 1].dense.fan_out();
            if first != l || last != l {
                return Err(Error::Format(format!("`{name}` network is {first}→{last}, spectra have {l} rows")));
            }
        }
        if gamma_phi0.dim() != (1, l) {
            return Err(Error::Format("gamma_phi0 must be 1×L".into()));
        }
        if spectra.iter().any(|v| !(*v >= F::zero())) {
            return Err(Error::NegativeValue("spectra"));
        }
        let model = Self {
            mua_net,
            mus_net,
            spectra_pinv: pinv_of(&spectra)?,
            spectra,
            chromophores,
            gamma_phi0,
            adjust_e,
            mua_unit: F::of(mua_unit),
        };
        let adam = match file.get("adam/state") {
            None => None,
            Some(_) => {
                let meta: AdamMeta = serde_json::from_str(&read_text_record(file, "adam/state")?)?;
                let mut a = AdamState::new(meta.learning_rate);
                a.beta1 = meta.beta1;
                a.beta2 = meta.beta2;
                a.eps = meta.eps;
                a.step_count = meta.step_count;
                if a.step_count > 0 {
                    for name in model.param_names() {
                        a.first_moment.push(read_array(file, &format!("adam.m/{name}"))?);
                        a.second_moment.push(read_array(file, &format!("adam.v/{name}"))?);
                    }
                }
                Some(a)
            }
        };
        Ok((model, adam))
    }
}
