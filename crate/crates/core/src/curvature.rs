//! Gauss-Newton curvature, natural-gradient solves and the momentum
//! inverse-Hessian-vector-product iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::Divergence;
use crate::error::{Error, Result};
use crate::linalg::{
    axpy, distance, matvec, max_eigenvalue, norm, scale, solve_spd, sub, symmetric_operator_norm,
    Matrix,
};
use crate::loss::{softmax, Loss};
use crate::model::{grad_loss, ModelSpec, TokenDataset};

/// Largest parameter count for which the dense GNH is assembled.
pub const MAX_DENSE_DIM: usize = 4096;

/// `H(θ) = mean_x J(x) S_h(x) J(x)ᵀ` over a batch.
#[derive(Clone, Debug)]
pub struct GnhAssembly {
    pub h: Matrix,
    pub source_batch: TokenDataset,
    pub theta_at: Vec<f64>,
}

impl GnhAssembly {
    /// `H + λI`
    pub fn damped(&self, lambda: f64) -> Matrix {
        self.h.shifted(lambda)
    }

    pub fn hvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        matvec(&self.h, v)
    }
}

pub fn assemble_gnh(spec: &ModelSpec, theta: &[f64], batch: &TokenDataset) -> Result<GnhAssembly> {
    let dim = spec.param_count();
    if dim > MAX_DENSE_DIM {
        return Err(Error::TooLarge {
            dim,
            limit: MAX_DENSE_DIM,
        });
    }
    if batch.is_empty() {
        return Err(Error::InvalidInput("GNH batch is empty".into()));
    }
    let v = spec.vocab_size;
    let mut h = Matrix::zeros(dim, dim);
    for pair in batch.pairs() {
        let jac = spec.logit_jacobian(theta, &pair.context)?;
        let p = softmax(&spec.logits(theta, &pair.context)?);
        let rows: Vec<usize> = (0..dim)
            .filter(|&i| jac.row(i).iter().any(|&x| x != 0.0))
            .collect();
        // J S Jᵀ restricted to the nonzero rows: Σ_j p_j J_j J_jᵀ − (Jp)(Jp)ᵀ.
        let jp: Vec<f64> = rows
            .iter()
            .map(|&i| crate::linalg::dot(jac.row(i), &p))
            .collect();
        let block: Vec<Vec<f64>> = (0..rows.len())
            .into_par_iter()
            .map(|a| {
                let ra = jac.row(rows[a]);
                (a..rows.len())
                    .map(|b| {
                        let rb = jac.row(rows[b]);
                        let mut s = 0.0;
                        for j in 0..v {
                            s += p[j] * ra[j] * rb[j];
                        }
                        s - jp[a] * jp[b]
                    })
                    .collect()
            })
            .collect();
        for (a, upper) in block.iter().enumerate() {
            for (k, &val) in upper.iter().enumerate() {
                let b = a + k;
                h[(rows[a], rows[b])] += val;
                if b != a {
                    h[(rows[b], rows[a])] += val;
                }
            }
        }
    }
    let h = h.scaled(1.0 / batch.len() as f64);
    Ok(GnhAssembly {
        h,
        source_batch: batch.clone(),
        theta_at: theta.to_vec(),
    })
}

/// `(H(θ) + λ′I)^{-1} ∇L(θ)` with `H` on the pretrain batch and `∇L` on the
/// forget batch.
pub fn natural_gradient(
    spec: &ModelSpec,
    theta: &[f64],
    forget_batch: &TokenDataset,
    pretrain_batch: &TokenDataset,
    loss: &Loss,
    damping: f64,
) -> Result<Vec<f64>> {
    natural_gradient_scaled(
        spec,
        theta,
        theta,
        forget_batch,
        pretrain_batch,
        loss,
        1.0,
        damping,
    )
}

/// `(c·H(θ_h) + λ′I)^{-1} ∇L(θ_g)`; `c` is a divergence's curvature scale
/// and the two evaluation points may differ.
#[allow(clippy::too_many_arguments)]
pub fn natural_gradient_scaled(
    spec: &ModelSpec,
    theta_h: &[f64],
    theta_g: &[f64],
    forget_batch: &TokenDataset,
    pretrain_batch: &TokenDataset,
    loss: &Loss,
    curvature_scale: f64,
    damping: f64,
) -> Result<Vec<f64>> {
    if !(damping > 0.0) {
        return Err(Error::Precondition(
            "natural-gradient damping must be positive".into(),
        ));
    }
    let g = grad_loss(spec, theta_g, forget_batch, loss)?;
    let gnh = assemble_gnh(spec, theta_h, pretrain_batch)?;
    solve_spd(&gnh.h.scaled(curvature_scale).shifted(damping), &g)
}

/// Synthetic per-step errors `ε_t` added to the IHVP iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorInjection {
    #[default]
    Zero,
    /// Random directions of fixed norm.
    ConstantNorm { norm: f64, seed: u64 },
    /// Random directions with norm `norm · rate^t`.
    Decaying { norm: f64, rate: f64, seed: u64 },
}

impl ErrorInjection {
    fn source(&self, dim: usize) -> Box<dyn FnMut(usize) -> Vec<f64>> {
        let unit = move |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm(&v);
            scale(&v, 1.0 / n)
        };
        match *self {
            ErrorInjection::Zero => Box::new(move |_| vec![0.0; dim]),
            ErrorInjection::ConstantNorm { norm, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Box::new(move |_| scale(&unit(&mut rng), norm))
            }
            ErrorInjection::Decaying { norm, rate, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Box::new(move |t| scale(&unit(&mut rng), norm * rate.powi(t as i32)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IhvpConfig {
    pub eta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub steps: usize,
    #[serde(default)]
    pub error_injection: ErrorInjection,
}

impl IhvpConfig {
    /// Checks `μ ∈ [0,1)`, `λ > 0` and `η < 1/(λ_max(H) + λ)`.
    pub fn validate(&self, h: &Matrix) -> Result<()> {
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::Precondition(format!(
                "momentum {} is outside [0, 1)",
                self.mu
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Precondition("damping must be positive".into()));
        }
        let limit = 1.0 / (max_eigenvalue(h)? + self.lambda);
        if !(self.eta > 0.0 && self.eta < limit) {
            return Err(Error::Precondition(format!(
                "step size {} must lie in (0, {limit}) = (0, 1/(λ_max(H)+λ))",
                self.eta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IhvpTrace {
    pub u_star: Vec<f64>,
    /// `‖u_t − u*‖` for `t = 0..=T`.
    pub distances: Vec<f64>,
    /// `‖ε_t‖` for `t = 0..T`.
    pub error_norms: Vec<f64>,
}

/// Runs `u_{t+1} = u_t − η(g + (H+λ)u_t + ε_t) + μ(u_t − u_{t−1})` from
/// `u_0 = u_{−1} = 0`; the fixed point is `u* = −(H+λ)^{-1} g`.
pub fn ihvp_momentum(h: &Matrix, g: &[f64], cfg: &IhvpConfig) -> Result<(Vec<f64>, IhvpTrace)> {
    let dim = g.len();
    if h.rows() != dim || h.cols() != dim {
        return Err(Error::Dimension("H and g disagree in dimension".into()));
    }
    cfg.validate(h)?;
    let damped = h.shifted(cfg.lambda);
    let u_star = scale(&solve_spd(&damped, g)?, -1.0);
    let mut errors = cfg.error_injection.source(dim);
    let mut u = vec![0.0; dim];
    let mut u_prev = u.clone();
    let mut distances = vec![distance(&u, &u_star)];
    let mut error_norms = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let eps = errors(t);
        error_norms.push(norm(&eps));
        let hu = matvec(&damped, &u)?;
        let mut next = u.clone();
        for i in 0..dim {
            next[i] += -cfg.eta * (g[i] + hu[i] + eps[i]) + cfg.mu * (u[i] - u_prev[i]);
        }
        u_prev = std::mem::replace(&mut u, next);
        distances.push(distance(&u, &u_star));
    }
    Ok((
        u,
        IhvpTrace {
            u_star,
            distances,
            error_norms,
        },
    ))
}

/// Contraction rate `1 − min{1 − √μ, ηλ/(1−μ)}`.
pub fn lemma_rate(eta: f64, mu: f64, lambda: f64) -> f64 {
    1.0 - (1.0 - mu.sqrt()).min(eta * lambda / (1.0 - mu))
}

/// `rate^t·‖u_0 − u*‖ + √2·max{η/(1−√μ), (1−μ)/λ}·max_j‖ε_j‖`
pub fn lemma_bound(
    eta: f64,
    mu: f64,
    lambda: f64,
    t: usize,
    initial_distance: f64,
    max_error: f64,
) -> f64 {
    let noise = std::f64::consts::SQRT_2 * (eta / (1.0 - mu.sqrt())).max((1.0 - mu) / lambda);
    lemma_rate(eta, mu, lambda).powi(t as i32) * initial_distance + noise * max_error
}

/// Ingredients for the regularity estimates: natural gradients use the
/// forget-batch loss and the divergence's damped curvature on the pretrain
/// batch.
pub struct RegularityProblem<'a> {
    pub spec: &'a ModelSpec,
    pub forget: &'a TokenDataset,
    pub pretrain: &'a TokenDataset,
    pub loss: &'a Loss,
    pub divergence: Divergence,
}

/// Maxima over sample points and damping values of the four regularity
/// quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegularityEstimate {
    /// `‖c·H(θ) + λ′I‖`
    pub damped_curvature_norm: f64,
    /// `‖N(θ_i) − N(θ_j)‖ / ‖θ_i − θ_j‖`
    pub natural_gradient_lipschitz: f64,
    /// `‖∇D(θ_i, θ_j) − c·H(θ_j)(θ_i − θ_j)‖ / ‖θ_i − θ_j‖²`
    pub divergence_remainder: f64,
    /// `‖N(θ)‖`
    pub natural_gradient_norm: f64,
}

impl RegularityEstimate {
    pub fn constant(&self) -> f64 {
        self.damped_curvature_norm
            .max(self.natural_gradient_lipschitz)
            .max(self.divergence_remainder)
            .max(self.natural_gradient_norm)
    }
}

/// Estimates the four regularity quantities. Pairwise terms need at least
/// two samples and are zero otherwise. Nothing is asserted about the result.
pub fn estimate_regularity(
    problem: &RegularityProblem<'_>,
    samples: &[Vec<f64>],
    dampings: &[f64],
) -> Result<RegularityEstimate> {
    if samples.is_empty() || dampings.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one sample point and one damping value".into(),
        ));
    }
    let c = problem.divergence.kind.curvature_scale();
    let curv: Vec<Matrix> = samples
        .iter()
        .map(|theta| {
            Ok(assemble_gnh(problem.spec, theta, problem.pretrain)?
                .h
                .scaled(c))
        })
        .collect::<Result<_>>()?;
    let grads: Vec<Vec<f64>> = samples
        .iter()
        .map(|theta| grad_loss(problem.spec, theta, problem.forget, problem.loss))
        .collect::<Result<_>>()?;
    let mut est = RegularityEstimate::default();
    for &damping in dampings {
        let naturals: Vec<Vec<f64>> = curv
            .iter()
            .zip(&grads)
            .map(|(hm, g)| {
                est.damped_curvature_norm = est
                    .damped_curvature_norm
                    .max(symmetric_operator_norm(&hm.shifted(damping))?);
                solve_spd(&hm.shifted(damping), g)
            })
            .collect::<Result<_>>()?;
        for (i, ni) in naturals.iter().enumerate() {
            est.natural_gradient_norm = est.natural_gradient_norm.max(norm(ni));
            for (j, nj) in naturals.iter().enumerate().skip(i + 1) {
                let gap = distance(&samples[i], &samples[j]);
                if gap > 0.0 {
                    est.natural_gradient_lipschitz =
                        est.natural_gradient_lipschitz.max(distance(ni, nj) / gap);
                }
            }
        }
    }
    let raw = Divergence::new(problem.divergence.kind, 0.0);
    for (i, theta_i) in samples.iter().enumerate() {
        for (j, theta_j) in samples.iter().enumerate() {
            let gap = distance(theta_i, theta_j);
            if i == j || gap == 0.0 {
                continue;
            }
            let (_, grad_d) =
                raw.raw_value_and_grad(problem.spec, theta_i, theta_j, problem.pretrain)?;
            let mut rem = grad_d;
            axpy(-1.0, &matvec(&curv[j], &sub(theta_i, theta_j))?, &mut rem);
            est.divergence_remainder = est.divergence_remainder.max(norm(&rem) / (gap * gap));
        }
    }
    Ok(est)
}

/// The largest of the four regularity quantities.
pub fn estimate_regularity_constant(
    problem: &RegularityProblem<'_>,
    samples: &[Vec<f64>],
    dampings: &[f64],
) -> Result<f64> {
    Ok(estimate_regularity(problem, samples, dampings)?.constant())
}
