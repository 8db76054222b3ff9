//! Minimal neural-network substrate: activations, batch normalization, the
//! two dense block kinds, and Adam.
//!
//! Backward passes are hand-derived per block; the finite-difference tests at
//! the bottom of this module and in `model` keep them honest.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::linalg::{col_sums, matmul, matmul_tn};
use crate::Real;

/// Negative-side slope of the leaky ReLU.
pub const LRELU_SLOPE: f64 = 0.01;
/// Variance guard inside batch normalization.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn lrelu<F: Real>(x: ArrayView2<'_, F>) -> Array2<F> {
    let slope = F::of(LRELU_SLOPE);
    x.mapv(|v| if v >= F::zero() { v } else { slope * v })
}

pub fn relu<F: Real>(x: ArrayView2<'_, F>) -> Array2<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// `W` is `out × in`, `b` is `1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayerParams<F> {
    pub weights: Array2<F>,
    pub bias: Array2<F>,
}

impl<F: Real> DenseLayerParams<F> {
    /// Uniform(±1/sqrt(fan_in)) weights, zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weights: Array2::from_shape_fn((fan_out, fan_in), |_| F::of(dist.sample(rng))),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }

    /// `X Wᵀ + b`.
    pub fn affine(&self, x: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if x.ncols() != self.fan_in() {
            return Err(Error::DimensionMismatch(format!(
                "layer expects {} features, got {}",
                self.fan_in(),
                x.ncols()
            )));
        }
        Ok(matmul(x, self.weights.t()) + &self.bias)
    }
}

/// Affine parameters (`γ`, `β`) and running statistics of a normalized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<F> {
    pub gamma: Array2<F>,
    pub beta: Array2<F>,
    pub running_mean: Array2<F>,
    pub running_var: Array2<F>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<F: Real> BatchNormParams<F> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array2::ones((1, features)),
            beta: Array2::zeros((1, features)),
            running_mean: Array2::zeros((1, features)),
            running_var: Array2::ones((1, features)),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.ncols()
    }

    /// Folds one batch's statistics into the running estimates; the variance
    /// uses the unbiased estimator.
    pub fn update_running(&mut self, stats: &BatchStats<F>) {
        let m = F::of(self.momentum);
        let keep = F::one() - m;
        let n = stats.rows as f64;
        let unbias = F::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        Zip::from(&mut self.running_mean)
            .and(&stats.mean)
            .for_each(|r, &b| *r = keep * *r + m * b);
        Zip::from(&mut self.running_var)
            .and(&stats.var)
            .for_each(|r, &b| *r = keep * *r + m * b * unbias);
    }
}

/// Biased per-feature batch statistics from a train-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Array2<F>,
    pub var: Array2<F>,
    pub rows: usize,
}

/// Everything the batch-norm backward pass needs.
#[derive(Clone, Debug)]
pub struct NormCache<F> {
    normalized: Array2<F>,
    inv_std: Array2<F>,
    mode: Mode,
    pub stats: Option<BatchStats<F>>,
}

/// `(X − E[X]) / sqrt(Var[X] + ε)` per feature. Train mode uses the batch's
/// (biased) statistics; eval mode uses the running ones.
pub fn batch_norm<F: Real>(
    x: ArrayView2<'_, F>,
    params: &BatchNormParams<F>,
    mode: Mode,
) -> Result<(Array2<F>, NormCache<F>)> {
    if x.ncols() != params.features() {
        return Err(Error::DimensionMismatch(format!(
            "batch norm over {} features, got {}",
            params.features(),
            x.ncols()
        )));
    }
    let eps = F::of(params.epsilon);
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let rows = x.nrows();
            if rows < 2 {
                return Err(Error::BatchTooSmall(rows));
            }
            let n = F::of(rows as f64);
            let mean = col_sums(x) / n;
            let centered = &x - &mean;
            let var = col_sums(centered.mapv(|v| v * v).view()) / n;
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                rows,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (params.running_mean.clone(), params.running_var.clone(), None),
    };
    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
    let normalized = (&x - &mean) * &inv_std;
    Ok((
        normalized.clone(),
        NormCache {
            normalized,
            inv_std,
            mode,
            stats,
        },
    ))
}

/// Gradient of [`batch_norm`] with respect to its input.
pub fn batch_norm_backward<F: Real>(cache: &NormCache<F>, grad_out: ArrayView2<'_, F>) -> Array2<F> {
    match cache.mode {
        Mode::Eval => &grad_out * &cache.inv_std,
        Mode::Train => {
            let n = F::of(grad_out.nrows() as f64);
            let sum_g = col_sums(grad_out);
            let sum_gx = col_sums((&grad_out * &cache.normalized).view());
            let inner = &grad_out * n - &sum_g - &(&cache.normalized * &sum_gx);
            inner * &(&cache.inv_std / n)
        }
    }
}

/// One layer block: with normalization it is `f(X) = γ ⊙ BN(LReLU(X Wᵀ + b) + β)`,
/// without it is `g(X) = ReLU(X Wᵀ + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlock<F> {
    pub dense: DenseLayerParams<F>,
    pub norm: Option<BatchNormParams<F>>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<F> {
    input: Array2<F>,
    pre_activation: Array2<F>,
    norm: Option<NormCache<F>>,
}

impl<F> BlockCache<F> {
    pub fn batch_stats(&self) -> Option<&BatchStats<F>> {
        self.norm.as_ref().and_then(|n| n.stats.as_ref())
    }
}

/// Gradients for one [`LayerBlock`]; `gamma`/`beta` only for normalized blocks.
#[derive(Clone, Debug)]
pub struct BlockGrads<F> {
    pub weights: Array2<F>,
    pub bias: Array2<F>,
    pub gamma: Option<Array2<F>>,
    pub beta: Option<Array2<F>>,
}

impl<F: Real> LayerBlock<F> {
    pub fn f<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            dense: DenseLayerParams::init(fan_in, fan_out, rng),
            norm: Some(BatchNormParams::new(fan_out)),
        }
    }

    pub fn g<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            dense: DenseLayerParams::init(fan_in, fan_out, rng),
            norm: None,
        }
    }

    pub fn is_normalized(&self) -> bool {
        self.norm.is_some()
    }

    pub fn forward(&self, x: ArrayView2<'_, F>, mode: Mode) -> Result<(Array2<F>, BlockCache<F>)> {
        let z = self.dense.affine(x)?;
        match &self.norm {
            Some(bn) => {
                let shifted = lrelu(z.view()) + &bn.beta;
                let (normalized, norm_cache) = batch_norm(shifted.view(), bn, mode)?;
                let y = normalized * &bn.gamma;
                Ok((
                    y,
                    BlockCache {
                        input: x.to_owned(),
                        pre_activation: z,
                        norm: Some(norm_cache),
                    },
                ))
            }
            None => Ok((
                relu(z.view()),
                BlockCache {
                    input: x.to_owned(),
                    pre_activation: z,
                    norm: None,
                },
            )),
        }
    }

    /// Returns `(dL/dX, parameter gradients)`.
    pub fn backward(&self, cache: &BlockCache<F>, grad_out: ArrayView2<'_, F>) -> (Array2<F>, BlockGrads<F>) {
        let slope = F::of(LRELU_SLOPE);
        let (grad_z, gamma, beta) = match (&self.norm, &cache.norm) {
            (Some(bn), Some(nc)) => {
                let grad_gamma = col_sums((&grad_out * &nc.normalized).view());
                let grad_norm = &grad_out * &bn.gamma;
                let grad_shifted = batch_norm_backward(nc, grad_norm.view());
                let grad_beta = col_sums(grad_shifted.view());
                let mut gz = grad_shifted;
                // right derivative at the kink
                Zip::from(&mut gz)
                    .and(&cache.pre_activation)
                    .for_each(|g, &z| {
                        if z < F::zero() {
                            *g = *g * slope
                        }
                    });
                (gz, Some(grad_gamma), Some(grad_beta))
            }
            _ => {
                let mut gz = grad_out.to_owned();
                Zip::from(&mut gz)
                    .and(&cache.pre_activation)
                    .for_each(|g, &z| {
                        if z < F::zero() {
                            *g = F::zero()
                        }
                    });
                (gz, None, None)
            }
        };
        let grad_w = matmul_tn(grad_z.view(), cache.input.view());
        let grad_b = col_sums(grad_z.view());
        let grad_x = matmul(grad_z.view(), self.dense.weights.view());
        (
            grad_x,
            BlockGrads {
                weights: grad_w,
                bias: grad_b,
                gamma,
                beta,
            },
        )
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        let mut v = vec![&mut self.dense.weights, &mut self.dense.bias];
        if let Some(bn) = &mut self.norm {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    pub fn params(&self) -> Vec<&Array2<F>> {
        let mut v = vec![&self.dense.weights, &self.dense.bias];
        if let Some(bn) = &self.norm {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
        v
    }
}

impl<F> BlockGrads<F> {
    pub fn into_vec(self) -> Vec<Array2<F>> {
        let mut v = vec![self.weights, self.bias];
        v.extend(self.gamma);
        v.extend(self.beta);
        v
    }
}

/// Free-function form of an `f` block.
pub fn block_f<F: Real>(
    x: ArrayView2<'_, F>,
    layer: &DenseLayerParams<F>,
    bn: &BatchNormParams<F>,
    mode: Mode,
) -> Result<Array2<F>> {
    let block = LayerBlock {
        dense: layer.clone(),
        norm: Some(bn.clone()),
    };
    Ok(block.forward(x, mode)?.0)
}

/// Free-function form of a `g` block.
pub fn block_g<F: Real>(x: ArrayView2<'_, F>, layer: &DenseLayerParams<F>) -> Result<Array2<F>> {
    Ok(relu(layer.affine(x)?.view()))
}

/// A chain of blocks: some `f` blocks terminated by one `g` block.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    pub blocks: Vec<LayerBlock<F>>,
}

impl<F: Real> Mlp<F> {
    /// `g ∘ f ∘ … ∘ f` with the given widths (`widths[0]` is the input).
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        let last = widths.len() - 2;
        let blocks = widths
            .windows(2)
            .enumerate()
            .map(|(j, w)| {
                if j == last {
                    LayerBlock::g(w[0], w[1], rng)
                } else {
                    LayerBlock::f(w[0], w[1], rng)
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, x: ArrayView2<'_, F>, mode: Mode) -> Result<(Array2<F>, Vec<BlockCache<F>>)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.to_owned();
        for b in &self.blocks {
            let (out, cache) = b.forward(h.view(), mode)?;
            caches.push(cache);
            h = out;
        }
        Ok((h, caches))
    }

    pub fn backward(&self, caches: &[BlockCache<F>], grad_out: Array2<F>) -> (Array2<F>, Vec<BlockGrads<F>>) {
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut g = grad_out;
        for (b, c) in self.blocks.iter().zip(caches).rev() {
            let (gx, bg) = b.backward(c, g.view());
            grads.push(bg);
            g = gx;
        }
        grads.reverse();
        (g, grads)
    }

    pub fn update_running(&mut self, caches: &[BlockCache<F>]) {
        for (b, c) in self.blocks.iter_mut().zip(caches) {
            if let (Some(bn), Some(stats)) = (&mut b.norm, c.batch_stats()) {
                bn.update_running(stats);
            }
        }
    }

    /// Replaces every block's running statistics with the exact population
    /// statistics of `x` (unbiased variance), block by block, streaming `x`
    /// in row chunks so memory stays bounded.
    pub fn recalibrate(&mut self, x: ArrayView2<'_, F>, chunk: usize) -> Result<()> {
        let rows = x.nrows();
        if rows < 2 {
            return Err(Error::BatchTooSmall(rows));
        }
        for j in 0..self.blocks.len() {
            let Some(features) = self.blocks[j].norm.as_ref().map(|n| n.features()) else {
                continue;
            };
            let mut sum = vec![0.0f64; features];
            let mut sum_sq = vec![0.0f64; features];
            // two passes (mean, then centered squares) for a well-conditioned variance
            for pass in 0..2 {
                for c in x.axis_chunks_iter(ndarray::Axis(0), chunk.max(1)) {
                    let mut h = c.to_owned();
                    for b in &self.blocks[..j] {
                        h = b.forward(h.view(), Mode::Eval)?.0;
                    }
                    let block = &self.blocks[j];
                    let bn = block.norm.as_ref().expect("checked above");
                    let shifted = lrelu(block.dense.affine(h.view())?.view()) + &bn.beta;
                    for r in shifted.rows() {
                        for (k, &v) in r.iter().enumerate() {
                            if pass == 0 {
                                sum[k] += v.f64();
                            } else {
                                let d = v.f64() - sum[k];
                                sum_sq[k] += d * d;
                            }
                        }
                    }
                }
                if pass == 0 {
                    sum.iter_mut().for_each(|s| *s /= rows as f64);
                }
            }
            let bn = self.blocks[j].norm.as_mut().expect("checked above");
            for k in 0..features {
                bn.running_mean[[0, k]] = F::of(sum[k]);
                bn.running_var[[0, k]] = F::of(sum_sq[k] / (rows - 1) as f64);
            }
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Array2<F>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    /// Parameter names in [`Mlp::params`] order, prefixed with `prefix`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = vec![];
        for (j, b) in self.blocks.iter().enumerate() {
            names.push(format!("{prefix}.{j}.weight"));
            names.push(format!("{prefix}.{j}.bias"));
            if b.is_normalized() {
                names.push(format!("{prefix}.{j}.bn_gamma"));
                names.push(format!("{prefix}.{j}.bn_beta"));
            }
        }
        names
    }

    pub fn cast<G: Real>(&self) -> Mlp<G> {
        let c = |a: &Array2<F>| a.mapv(|v| G::of(v.f64()));
        Mlp {
            blocks: self
                .blocks
                .iter()
                .map(|b| LayerBlock {
                    dense: DenseLayerParams {
                        weights: c(&b.dense.weights),
                        bias: c(&b.dense.bias),
                    },
                    norm: b.norm.as_ref().map(|n| BatchNormParams {
                        gamma: c(&n.gamma),
                        beta: c(&n.beta),
                        running_mean: c(&n.running_mean),
                        running_var: c(&n.running_var),
                        momentum: n.momentum,
                        epsilon: n.epsilon,
                    }),
                })
                .collect(),
        }
    }
}

/// Bias-corrected Adam over a list of `Array2` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub first_moment: Vec<Array2<F>>,
    pub second_moment: Vec<Array2<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: vec![],
            second_moment: vec![],
        }
    }
}

/// One Adam update. `names` label tensors in error messages.
pub fn adam_step<F: Real>(
    params: &mut [&mut Array2<F>],
    grads: &[Array2<F>],
    state: &mut AdamState<F>,
    names: &[String],
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() {
            return Err(Error::DimensionMismatch(format!(
                "gradient {i} has shape {:?}, parameter {:?}",
                g.dim(),
                p.dim()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFiniteGradient(name));
        }
    }
    if state.first_moment.is_empty() {
        state.first_moment = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        state.second_moment = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (F::of(state.beta1), F::of(state.beta2));
    let correction1 = F::of(1.0 - state.beta1.powi(t));
    let correction2 = F::of(1.0 - state.beta2.powi(t));
    let lr = F::of(state.learning_rate);
    let eps = F::of(state.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        Zip::from(&mut **p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
