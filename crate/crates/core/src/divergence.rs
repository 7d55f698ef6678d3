//! Proximity terms `D(θ, θ′)` between the optimized model and a reference.
//!
//! - KL: batch mean of `KL(sf(h(x;θ)) ‖ sf(h(x;θ′)))`, current model first.
//! - QKL: batch mean of `(h−h′)ᵀ S_h (h−h′)` with `S_h = Diag(p) − ppᵀ`,
//!   `p = sf(h)` evaluated at the current model.
//! - Bregman: `L(θ) − L(θ′) − (θ−θ′)ᵀ∇L(θ′)` of the batch NLL, which is
//!   convex for the bigram model.
//!
//! Every kind may be damped by `(λ/2)‖θ − θ′‖²`. Gradients are exact and
//! differentiate through every `θ` dependence, including `S_h` in QKL.

use serde::{Deserialize, Serialize};

use crate::curvature::assemble_gnh;
use crate::error::{Error, Result};
use crate::linalg::{axpy, distance, dot, norm, sub};
use crate::loss::{log_softmax, softmax, Loss};
use crate::model::{loss_and_grad, reduce_logit_terms, ModelSpec, TokenDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    Qkl,
    Bregman,
}

impl DivergenceKind {
    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Qkl => "qkl",
            DivergenceKind::Bregman => "bregman",
        }
    }

    /// Ratio between the divergence's second-order term and
    /// `½(θ−θ′)ᵀ H (θ−θ′)` with `H` the Gauss-Newton Hessian of the batch.
    /// QKL carries no ½ factor, so its curvature is `2H`.
    pub fn curvature_scale(self) -> f64 {
        match self {
            DivergenceKind::Qkl => 2.0,
            DivergenceKind::Kl | DivergenceKind::Bregman => 1.0,
        }
    }
}

/// A divergence kind with damping, serialized as
/// `{"divergence": "kl", "lambda": 0.5}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    #[serde(rename = "divergence")]
    pub kind: DivergenceKind,
    #[serde(default)]
    pub lambda: f64,
}

impl Divergence {
    pub fn new(kind: DivergenceKind, lambda: f64) -> Self {
        Self { kind, lambda }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be a nonnegative real"));
        }
        if self.kind == DivergenceKind::Bregman && spec.kind != crate::model::ModelKind::Bigram {
            return Err(Error::config(
                "divergence",
                "the Bregman divergence needs a loss convex in θ; only the bigram model qualifies",
            ));
        }
        Ok(())
    }

    /// Undamped divergence value and its `θ`-gradient.
    pub fn raw_value_and_grad(
        &self,
        spec: &ModelSpec,
        theta: &[f64],
        reference: &[f64],
        batch: &TokenDataset,
    ) -> Result<(f64, Vec<f64>)> {
        match self.kind {
            DivergenceKind::Kl => kl_value_and_grad(spec, theta, reference, batch),
            DivergenceKind::Qkl => qkl_value_and_grad(spec, theta, reference, batch),
            DivergenceKind::Bregman => {
                let nll = NllObjective { spec, batch };
                let value = bregman_div(&nll, theta, reference)?;
                let g = nll.gradient(theta)?;
                let g_ref = nll.gradient(reference)?;
                Ok((value, sub(&g, &g_ref)))
            }
        }
    }

    /// `D_λ(θ, θ′)` and `∇_θ D_λ(θ, θ′) = ∇_θ D + λ(θ − θ′)`.
    pub fn value_and_grad(
        &self,
        spec: &ModelSpec,
        theta: &[f64],
        reference: &[f64],
        batch: &TokenDataset,
    ) -> Result<(f64, Vec<f64>)> {
        let (value, mut grad) = self.raw_value_and_grad(spec, theta, reference, batch)?;
        let diff = sub(theta, reference);
        axpy(self.lambda, &diff, &mut grad);
        Ok((value + 0.5 * self.lambda * dot(&diff, &diff), grad))
    }

    pub fn value(
        &self,
        spec: &ModelSpec,
        theta: &[f64],
        reference: &[f64],
        batch: &TokenDataset,
    ) -> Result<f64> {
        let raw = match self.kind {
            DivergenceKind::Kl => kl_div(spec, theta, reference, batch)?,
            DivergenceKind::Qkl => qkl_div(spec, theta, reference, batch)?,
            DivergenceKind::Bregman => {
                bregman_div(&NllObjective { spec, batch }, theta, reference)?
            }
        };
        let d = distance(theta, reference);
        Ok(raw + 0.5 * self.lambda * d * d)
    }

    pub fn damped_grad(
        &self,
        spec: &ModelSpec,
        theta: &[f64],
        reference: &[f64],
        batch: &TokenDataset,
    ) -> Result<Vec<f64>> {
        Ok(self.value_and_grad(spec, theta, reference, batch)?.1)
    }
}

fn check_batch(batch: &TokenDataset) -> Result<()> {
    if batch.is_empty() {
        Err(Error::InvalidInput("divergence batch is empty".into()))
    } else {
        Ok(())
    }
}

fn kl_value_and_grad(
    spec: &ModelSpec,
    theta: &[f64],
    reference: &[f64],
    batch: &TokenDataset,
) -> Result<(f64, Vec<f64>)> {
    check_batch(batch)?;
    let (total, grad) = reduce_logit_terms(spec, theta, batch.pairs(), |pair, h| {
        let h_ref = spec.logits(reference, &pair.context)?;
        let lp = log_softmax(h);
        let lq = log_softmax(&h_ref);
        let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        let dh = lp
            .iter()
            .zip(&lq)
            .map(|(a, b)| a.exp() * (a - b - kl))
            .collect();
        Ok((kl, dh))
    })?;
    let n = batch.len() as f64;
    Ok((total / n, grad.into_iter().map(|g| g / n).collect()))
}

/// `S_p v = p ⊙ v − p (pᵀv)`
fn softmax_cov_apply(p: &[f64], v: &[f64]) -> Vec<f64> {
    let pv = dot(p, v);
    p.iter().zip(v).map(|(pi, vi)| pi * (vi - pv)).collect()
}

/// Single-context QKL value and its gradient with respect to `h`.
pub fn qkl_logits(h: &[f64], h_ref: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(h);
    let d = sub(h, h_ref);
    let mean = dot(&p, &d);
    let value: f64 = p.iter().zip(&d).map(|(pi, di)| pi * di * di).sum::<f64>() - mean * mean;
    // Through (h − h′): 2 S d. Through p = sf(h): S g with g_i = d_i² − 2 m d_i.
    let sd = softmax_cov_apply(&p, &d);
    let g: Vec<f64> = d.iter().map(|di| di * di - 2.0 * mean * di).collect();
    let sg = softmax_cov_apply(&p, &g);
    let grad = sd.iter().zip(&sg).map(|(a, b)| 2.0 * a + b).collect();
    (value, grad)
}

fn qkl_value_and_grad(
    spec: &ModelSpec,
    theta: &[f64],
    reference: &[f64],
    batch: &TokenDataset,
) -> Result<(f64, Vec<f64>)> {
    check_batch(batch)?;
    let (total, grad) = reduce_logit_terms(spec, theta, batch.pairs(), |pair, h| {
        let h_ref = spec.logits(reference, &pair.context)?;
        Ok(qkl_logits(h, &h_ref))
    })?;
    let n = batch.len() as f64;
    Ok((total / n, grad.into_iter().map(|g| g / n).collect()))
}

/// Batch-mean `KL(sf(h(x;θ)) ‖ sf(h(x;θ′)))`.
pub fn kl_div(
    spec: &ModelSpec,
    theta: &[f64],
    reference: &[f64],
    batch: &TokenDataset,
) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for pair in batch.pairs() {
        let h = spec.logits(theta, &pair.context)?;
        let h_ref = spec.logits(reference, &pair.context)?;
        total += crate::loss::it_value(&h, &h_ref);
    }
    Ok(total / batch.len() as f64)
}

/// Batch-mean `(h − h′)ᵀ S_h (h − h′)`.
pub fn qkl_div(
    spec: &ModelSpec,
    theta: &[f64],
    reference: &[f64],
    batch: &TokenDataset,
) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for pair in batch.pairs() {
        let h = spec.logits(theta, &pair.context)?;
        let h_ref = spec.logits(reference, &pair.context)?;
        total += qkl_logits(&h, &h_ref).0;
    }
    Ok(total / batch.len() as f64)
}

/// A differentiable objective convex in `θ`.
pub trait ConvexObjective {
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// Batch-mean NLL; convex in `θ` for the bigram model.
pub struct NllObjective<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a TokenDataset,
}

impl ConvexObjective for NllObjective<'_> {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        crate::loss::batch_loss(&Loss::Nll, self.spec, theta, self.batch)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(loss_and_grad(self.spec, theta, self.batch, &Loss::Nll)?.1)
    }
}

/// `L(θ) − L(θ′) − (θ − θ′)ᵀ∇L(θ′)`
pub fn bregman_div(
    objective: &impl ConvexObjective,
    theta: &[f64],
    reference: &[f64],
) -> Result<f64> {
    if theta.len() != reference.len() {
        return Err(Error::Dimension("θ and θ′ differ in length".into()));
    }
    let g_ref = objective.gradient(reference)?;
    Ok(objective.value(theta)? - objective.value(reference)? - dot(&sub(theta, reference), &g_ref))
}

/// `|D_λ(θ′ + t·d, θ′) − ½t²·dᵀ(c·H(θ′) + λI)d|`, with `H` the Gauss-Newton
/// Hessian frozen at `θ′` and `c` the kind's curvature scale.
pub fn local_quadratic_residual(
    divergence: &Divergence,
    spec: &ModelSpec,
    reference: &[f64],
    direction: &[f64],
    t: f64,
    batch: &TokenDataset,
) -> Result<f64> {
    if (norm(direction) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("direction must have unit norm".into()));
    }
    if t < 0.0 {
        return Err(Error::InvalidInput("scale must be nonnegative".into()));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let gnh = assemble_gnh(spec, reference, batch)?;
    let quad =
        divergence.kind.curvature_scale() * gnh.h.quadratic_form(direction)? + divergence.lambda;
    let mut theta = reference.to_vec();
    axpy(t, direction, &mut theta);
    let value = divergence.value(spec, &theta, reference, batch)?;
    Ok((value - 0.5 * t * t * quad).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DatasetRole, Pair, ParamVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(v: u32, ctx: usize) -> TokenDataset {
        let seqs = (0..6)
            .map(|i| {
                (0..9)
                    .map(|t| ((i * 5 + t * t + 1) % v as usize) as u32)
                    .collect()
            })
            .collect();
        TokenDataset::from_sequences(seqs, ctx, DatasetRole::Pretrain)
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let step = 1e-5;
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                p[i] = x[i] + step;
                let fp = f(&p);
                p[i] = x[i] - step;
                let fm = f(&p);
                p[i] = x[i];
                (fp - fm) / (2.0 * step)
            })
            .collect()
    }

    fn perturbed(theta: &[f64], rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        theta
            .iter()
            .map(|v| v + rng.random_range(-scale..scale))
            .collect()
    }

    #[test]
    fn kl_examples() {
        let spec = ModelSpec::bigram(2);
        let batch = TokenDataset::from_pairs(
            vec![Pair {
                context: vec![0],
                next: 1,
            }],
            DatasetRole::Pretrain,
        );
        let theta = [1.0, 0.0, 0.0, 0.0];
        let zero = [0.0; 4];
        assert_eq!(kl_div(&spec, &theta, &theta, &batch).unwrap(), 0.0);
        let p = softmax(&[1.0, 0.0]);
        let want = p[0] * (p[0] / 0.5).ln() + p[1] * (p[1] / 0.5).ln();
        assert!((kl_div(&spec, &theta, &zero, &batch).unwrap() - want).abs() < 1e-15);
        let empty = TokenDataset::from_pairs(vec![], DatasetRole::Pretrain);
        assert!(kl_div(&spec, &theta, &zero, &empty).is_err());
    }

    #[test]
    fn qkl_examples() {
        let (v, _) = qkl_logits(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((v - 0.25).abs() < 1e-15);
        let h = [0.4, -1.2, 2.0];
        assert_eq!(qkl_logits(&h, &h).0, 0.0);
        let shifted: Vec<f64> = h.iter().map(|x| x + 3.5).collect();
        assert!(qkl_logits(&h, &shifted).0.abs() < 1e-14);
    }

    #[test]
    fn bregman_examples() {
        struct Quadratic(crate::linalg::Matrix);
        impl ConvexObjective for Quadratic {
            fn value(&self, theta: &[f64]) -> Result<f64> {
                Ok(0.5 * self.0.quadratic_form(theta)?)
            }
            fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
                crate::linalg::matvec(&self.0, theta)
            }
        }
        let a = crate::linalg::Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let q = Quadratic(a.clone());
        let (x, y) = ([1.0, -2.0], [0.3, 0.7]);
        assert_eq!(bregman_div(&q, &x, &x).unwrap(), 0.0);
        let want = 0.5 * a.quadratic_form(&sub(&x, &y)).unwrap();
        assert!((bregman_div(&q, &x, &y).unwrap() - want).abs() < 1e-12);

        let spec = ModelSpec::bigram(4);
        let batch = corpus(4, 1);
        let nll = NllObjective {
            spec: &spec,
            batch: &batch,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(bregman_div(&nll, &a, &b).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn gradient_vanishes_at_coincidence() {
        let spec = ModelSpec::bigram(3);
        let batch = corpus(3, 1);
        let theta = spec.init_params(2);
        for kind in [
            DivergenceKind::Kl,
            DivergenceKind::Qkl,
            DivergenceKind::Bregman,
        ] {
            let g = Divergence::new(kind, 0.7)
                .damped_grad(&spec, &theta, &theta, &batch)
                .unwrap();
            assert!(norm(&g) < 1e-15, "{kind:?}");
        }
    }

    #[test]
    fn damping_only_on_untouched_rows() {
        // Contexts only use token 0, so rows 1 and 2 carry only the damping term.
        let spec = ModelSpec::bigram(3);
        let batch = TokenDataset::from_pairs(
            vec![Pair {
                context: vec![0],
                next: 2,
            }],
            DatasetRole::Pretrain,
        );
        let reference = ParamVector::zeros(&spec);
        let mut theta = reference.clone();
        theta[4] = 0.5;
        theta[8] = -1.0;
        let lambda = 0.3;
        let g = Divergence::new(DivergenceKind::Kl, lambda)
            .damped_grad(&spec, &theta, &reference, &batch)
            .unwrap();
        let want = crate::linalg::scale(&sub(&theta, &reference), lambda);
        assert!(distance(&g, &want) < 1e-15);
    }

    #[test]
    fn damped_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for spec in [ModelSpec::bigram(4), ModelSpec::mlp(4, 2, 3)] {
            let batch = corpus(4, spec.context_len);
            for kind in [
                DivergenceKind::Kl,
                DivergenceKind::Qkl,
                DivergenceKind::Bregman,
            ] {
                let div = Divergence::new(kind, 0.25);
                if div.validate(&spec).is_err() {
                    continue;
                }
                for _ in 0..20 {
                    let reference: Vec<f64> =
                        perturbed(&vec![0.0; spec.param_count()], &mut rng, 1.5);
                    let theta = perturbed(&reference, &mut rng, 0.8);
                    let g = div.damped_grad(&spec, &theta, &reference, &batch).unwrap();
                    let fd = fd_grad(|t| div.value(&spec, t, &reference, &batch).unwrap(), &theta);
                    let err = distance(&g, &fd);
                    assert!(err <= 1e-5 * (1.0 + norm(&fd)), "{kind:?} {err}");
                }
            }
        }
    }

    #[test]
    fn divergences_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ModelSpec::mlp(5, 2, 4);
        let batch = corpus(5, 2);
        for _ in 0..30 {
            let a = perturbed(&vec![0.0; spec.param_count()], &mut rng, 3.0);
            let b = perturbed(&vec![0.0; spec.param_count()], &mut rng, 3.0);
            assert!(kl_div(&spec, &a, &b, &batch).unwrap() >= -1e-12);
            assert!(qkl_div(&spec, &a, &b, &batch).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn residual_scaling() {
        let spec = ModelSpec::mlp(4, 2, 3);
        let batch = corpus(4, 2);
        let reference: Vec<f64> = spec.init_params(4).iter().map(|v| v * 10.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = perturbed(&vec![0.0; spec.param_count()], &mut rng, 1.0);
        let d = crate::linalg::scale(&d, 1.0 / norm(&d));
        for kind in [DivergenceKind::Kl, DivergenceKind::Qkl] {
            let div = Divergence::new(kind, 0.1);
            assert_eq!(
                local_quadratic_residual(&div, &spec, &reference, &d, 0.0, &batch).unwrap(),
                0.0
            );
            let mut t = 1e-2;
            let mut prev =
                local_quadratic_residual(&div, &spec, &reference, &d, t, &batch).unwrap();
            while t > 1.5e-4 {
                t *= 0.5;
                let r = local_quadratic_residual(&div, &spec, &reference, &d, t, &batch).unwrap();
                assert!(prev / r >= 6.0, "{kind:?} t={t}: {prev} -> {r}");
                prev = r;
            }
        }
    }
}
