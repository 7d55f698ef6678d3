//! Mean-teacher proximal optimization, its batched clipped variant, the
//! natural-gradient reference trajectory and first-order baselines.
//!
//! Every run minimizes `αL(θ) + D_λ(θ, θ′)` where `L` is the unlearning loss
//! on the forget split and `D_λ` the damped divergence on the pretrain split.
//! The mean teacher moves the reference `θ′` as an exponential moving average
//! of the iterates; the baselines keep `θ′ = θ_0` fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curvature::assemble_gnh;
use crate::divergence::Divergence;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, distance, norm, solve_spd};
use crate::loss::{Loss, LossKind, TeacherLogits, TeacherSource};
use crate::model::{loss_and_grad, ModelSpec, TokenDataset};

/// Largest parameter count for which trajectories keep every iterate.
pub const MAX_STORED_DIM: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipFormula {
    /// `l = min(1, c/‖g‖)`
    #[default]
    Main,
    /// `l = 1/max(‖g‖, c)`
    Alg2,
}

/// Gradient scale `l` for a gradient of norm `grad_norm` and threshold `c`.
pub fn clip_scale(grad_norm: f64, threshold: Option<f64>, formula: ClipFormula) -> f64 {
    match (threshold, formula) {
        (None, _) => 1.0,
        (Some(c), ClipFormula::Main) => {
            if grad_norm > c {
                c / grad_norm
            } else {
                1.0
            }
        }
        (Some(c), ClipFormula::Alg2) => 1.0 / grad_norm.max(c),
    }
}

fn default_batch() -> usize {
    16
}

/// Run configuration, serialized flat:
/// `{"eta": 0.01, "kappa": 1.0, "alpha": 0.1, "mu": 0.9, "steps": 500,
///   "loss": "nlul", "divergence": "kl", "lambda": 0.5, "seed": 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtConfig {
    pub eta: f64,
    pub kappa: f64,
    pub alpha: f64,
    #[serde(default)]
    pub mu: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(default)]
    pub clip_formula: ClipFormula,
    #[serde(default = "default_batch")]
    pub batch_forget: usize,
    #[serde(default = "default_batch")]
    pub batch_pretrain: usize,
    #[serde(flatten)]
    pub loss: LossKind,
    #[serde(flatten)]
    pub divergence: Divergence,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate the NGD gradient at the previous iterate.
    #[serde(default)]
    pub ngd_grad_lag: bool,
}

impl MtConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be a positive real"));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::config("kappa", "must be a positive real"));
        }
        if !(self.eta * self.kappa < 1.0) {
            return Err(Error::config(
                "kappa",
                format!(
                    "ηκ = {} must be < 1 for the reference update to contract",
                    self.eta * self.kappa
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::config("mu", "must lie in [0, 1)"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("clip", "must be a positive real"));
            }
        }
        if self.batch_forget == 0 {
            return Err(Error::config("batch_forget", "must be positive"));
        }
        if self.batch_pretrain == 0 {
            return Err(Error::config("batch_pretrain", "must be positive"));
        }
        self.loss.validate()?;
        self.divergence.validate(spec)
    }
}

/// Step size and damping of the natural-gradient trajectory that the mean
/// teacher tracks: `γ = καη/(1−κη)`, `λ̄ = λ + (1−μ)κ/(1−ηκ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedNgdParams {
    pub gamma: f64,
    pub lambda_bar: f64,
}

impl DerivedNgdParams {
    pub fn new(eta: f64, kappa: f64, alpha: f64, lambda: f64, mu: f64) -> Self {
        let contraction = 1.0 - eta * kappa;
        Self {
            gamma: kappa * alpha * eta / contraction,
            lambda_bar: lambda + (1.0 - mu) * kappa / contraction,
        }
    }

    pub fn from_config(cfg: &MtConfig) -> Self {
        Self::new(cfg.eta, cfg.kappa, cfg.alpha, cfg.divergence.lambda, cfg.mu)
    }
}

/// Sequence (or pair, for pair-only datasets) indices drawn for one step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLog {
    pub forget: Vec<usize>,
    pub pretrain: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// `θ_t`; absent above [`MAX_STORED_DIM`].
    pub theta: Option<Vec<f64>>,
    /// `θ′_t`; absent above [`MAX_STORED_DIM`].
    pub reference: Option<Vec<f64>>,
    /// Norm of the objective gradient taken at `(θ_t, θ′_t)`.
    pub grad_norm: f64,
    /// `‖∇L(θ_t)‖` of the unlearning loss alone.
    pub loss_grad_norm: f64,
    /// `L(θ_t)` on the step's forget batch.
    pub loss: f64,
    /// `D_λ(θ_t, θ′_t)` on the step's pretrain batch.
    pub divergence: f64,
    /// Scale applied to the gradient leaving `θ_t`.
    pub clip_scale: f64,
    pub batch: Option<BatchLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub final_theta: Vec<f64>,
    pub final_reference: Vec<f64>,
    /// Set when a stopper ended the run before `T` steps.
    pub stopped_early: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// CSV with columns `t,grad_norm,loss,divergence,clip_scale` and, when a
    /// reference trajectory is given, `deviation = ‖θ_t − θ̄_t‖`.
    pub fn to_csv(&self, reference: Option<&Trajectory>) -> Result<String> {
        let deviations = reference.map(|r| step_deviations(self, r)).transpose()?;
        let mut out = String::from("t,grad_norm,loss,divergence,clip_scale");
        if deviations.is_some() {
            out.push_str(",deviation");
        }
        out.push('\n');
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}",
                s.t, s.grad_norm, s.loss, s.divergence, s.clip_scale
            ));
            if let Some(d) = &deviations {
                out.push_str(&format!(",{:e}", d[i]));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

fn step_deviations(a: &Trajectory, b: &Trajectory) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "trajectories have {} and {} steps",
            a.len(),
            b.len()
        )));
    }
    a.steps
        .iter()
        .zip(&b.steps)
        .map(|(x, y)| match (&x.theta, &y.theta) {
            (Some(p), Some(q)) => Ok(distance(p, q)),
            _ => Err(Error::InvalidInput(
                "trajectory does not store iterates".into(),
            )),
        })
        .collect()
}

/// `max_t ‖θ_t − θ̄_t‖`
pub fn trajectory_deviation(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    Ok(step_deviations(a, b)?.into_iter().fold(0.0, f64::max))
}

/// Objective values and gradient at one `(θ, θ′)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub loss_grad_norm: f64,
    pub divergence: f64,
    /// `∇_θ{αL(θ) + D_λ(θ, θ′)}`
    pub grad: Vec<f64>,
    pub batch: Option<BatchLog>,
}

/// Something a proximal run can query once per step.
pub trait ProximalObjective {
    fn evaluate(&mut self, theta: &[f64], reference: &[f64]) -> Result<Evaluation>;
}

struct Sampler {
    rng: ChaCha8Rng,
    forget: usize,
    pretrain: usize,
}

fn sample(
    ds: &TokenDataset,
    n: usize,
    context_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(TokenDataset, Vec<usize>)> {
    let role = ds.role();
    if !ds.sequences().is_empty() {
        let idx: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..ds.sequences().len()))
            .collect();
        let seqs = idx.iter().map(|&i| ds.sequences()[i].clone()).collect();
        Ok((TokenDataset::from_sequences(seqs, context_len, role), idx))
    } else if !ds.is_empty() {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..ds.len())).collect();
        let pairs = idx.iter().map(|&i| ds.pairs()[i].clone()).collect();
        Ok((TokenDataset::from_pairs(pairs, role), idx))
    } else {
        Err(Error::InvalidInput(format!("{role:?} dataset is empty")))
    }
}

/// `αL + D_λ` for a model on a forget/pretrain split.
pub struct ModelObjective<'a> {
    spec: &'a ModelSpec,
    forget: &'a TokenDataset,
    pretrain: &'a TokenDataset,
    loss: Loss,
    divergence: Divergence,
    alpha: f64,
    sampler: Option<Sampler>,
}

impl<'a> ModelObjective<'a> {
    /// Full-batch objective.
    pub fn full(
        spec: &'a ModelSpec,
        forget: &'a TokenDataset,
        pretrain: &'a TokenDataset,
        loss: Loss,
        divergence: Divergence,
        alpha: f64,
    ) -> Self {
        Self {
            spec,
            forget,
            pretrain,
            loss,
            divergence,
            alpha,
            sampler: None,
        }
    }

    /// Objective on batches drawn with replacement at every evaluation.
    pub fn sampled(mut self, batch_forget: usize, batch_pretrain: usize, seed: u64) -> Self {
        self.sampler = Some(Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            forget: batch_forget,
            pretrain: batch_pretrain,
        });
        self
    }
}

impl ProximalObjective for ModelObjective<'_> {
    fn evaluate(&mut self, theta: &[f64], reference: &[f64]) -> Result<Evaluation> {
        let c = self.spec.context_len;
        let (forget, pretrain, batch) = match &mut self.sampler {
            None => (None, None, None),
            Some(s) => {
                let (f, fi) = sample(self.forget, s.forget, c, &mut s.rng)?;
                let (p, pi) = sample(self.pretrain, s.pretrain, c, &mut s.rng)?;
                (
                    Some(f),
                    Some(p),
                    Some(BatchLog {
                        forget: fi,
                        pretrain: pi,
                    }),
                )
            }
        };
        let forget = forget.as_ref().unwrap_or(self.forget);
        let pretrain = pretrain.as_ref().unwrap_or(self.pretrain);
        let (loss, mut grad) = loss_and_grad(self.spec, theta, forget, &self.loss)?;
        let loss_grad_norm = norm(&grad);
        let (divergence, dgrad) = self
            .divergence
            .value_and_grad(self.spec, theta, reference, pretrain)?;
        for (g, d) in grad.iter_mut().zip(&dgrad) {
            *g = self.alpha * *g + d;
        }
        Ok(Evaluation {
            loss,
            loss_grad_norm,
            divergence,
            grad,
            batch,
        })
    }
}

/// Binds a loss selection for a run starting at `base`; IT teachers given as
/// a path are loaded from a parameter dump.
pub fn resolve_loss(kind: &LossKind, spec: &ModelSpec, base: &[f64]) -> Result<Loss> {
    let teacher = match kind {
        LossKind::It {
            teacher: TeacherSource::Path(path),
        } => {
            let (tspec, theta) = crate::io::load_params(path)?;
            if tspec.vocab_size != spec.vocab_size {
                return Err(Error::config(
                    "teacher",
                    "teacher vocabulary differs from the model's",
                ));
            }
            Some(TeacherLogits::Fixed {
                spec: tspec,
                theta: theta.into_coords().into(),
            })
        }
        _ => None,
    };
    kind.bind(base, teacher)
}

/// Predicate on the iterate; `Ok(true)` stops the run.
pub type StopCheck<'a> = Box<dyn FnMut(&[f64]) -> Result<bool> + 'a>;

/// Early-termination hook checked on the iterate every `every` steps.
pub struct Stopper<'a> {
    pub every: usize,
    pub check: StopCheck<'a>,
}

struct Recorder {
    store: bool,
    steps: Vec<StepRecord>,
}

impl Recorder {
    fn new(dim: usize) -> Self {
        Self {
            store: dim <= MAX_STORED_DIM,
            steps: Vec::new(),
        }
    }

    fn push(
        &mut self,
        t: usize,
        theta: &[f64],
        reference: &[f64],
        ev: Evaluation,
        clip_scale: f64,
    ) {
        self.steps.push(StepRecord {
            t,
            theta: self.store.then(|| theta.to_vec()),
            reference: self.store.then(|| reference.to_vec()),
            grad_norm: norm(&ev.grad),
            loss_grad_norm: ev.loss_grad_norm,
            loss: ev.loss,
            divergence: ev.divergence,
            clip_scale,
            batch: ev.batch,
        });
    }

    fn finish(self, theta: Vec<f64>, reference: Vec<f64>, stopped_early: bool) -> Trajectory {
        Trajectory {
            steps: self.steps,
            final_theta: theta,
            final_reference: reference,
            stopped_early,
        }
    }
}

fn evaluate_checked(
    obj: &mut impl ProximalObjective,
    theta: &[f64],
    reference: &[f64],
    t: usize,
) -> Result<Evaluation> {
    let ev = obj.evaluate(theta, reference)?;
    if !(all_finite(&ev.grad) && ev.loss.is_finite() && ev.divergence.is_finite()) {
        return Err(Error::NonFinite { step: t });
    }
    Ok(ev)
}

fn should_stop(stopper: &mut Option<Stopper<'_>>, t: usize, theta: &[f64]) -> Result<bool> {
    match stopper {
        Some(s) if s.every > 0 && t.is_multiple_of(s.every) => (s.check)(theta),
        _ => Ok(false),
    }
}

/// Mean-teacher iteration:
/// `θ_t = θ_{t−1} − η∇{αL + D_λ}(θ_{t−1}, θ′_{t−1}) + μ(θ_{t−1} − θ_{t−2})`,
/// `θ′_t = (1−ηκ)θ′_{t−1} + ηκθ_t`, with `θ_{−1} = θ′_0 = θ_0`.
pub fn mt_iterate(
    obj: &mut impl ProximalObjective,
    theta0: &[f64],
    cfg: &MtConfig,
) -> Result<Trajectory> {
    let (eta, mu) = (cfg.eta, cfg.mu);
    let rate = eta * cfg.kappa;
    let mut theta = theta0.to_vec();
    let mut prev = theta.clone();
    let mut reference = theta.clone();
    let mut rec = Recorder::new(theta.len());
    for t in 0..=cfg.steps {
        let ev = evaluate_checked(obj, &theta, &reference, t)?;
        let grad = ev.grad.clone();
        rec.push(t, &theta, &reference, ev, 1.0);
        if t == cfg.steps {
            break;
        }
        let next: Vec<f64> = (0..theta.len())
            .map(|i| theta[i] - eta * grad[i] + mu * (theta[i] - prev[i]))
            .collect();
        if !all_finite(&next) {
            return Err(Error::NonFinite { step: t + 1 });
        }
        // `θ′ + ηκ(θ − θ′)` rather than `(1−ηκ)θ′ + ηκθ`: the two agree, but only
        // this form leaves θ′ bitwise fixed when θ = θ′.
        for (r, x) in reference.iter_mut().zip(&next) {
            *r += rate * (x - *r);
        }
        prev = std::mem::replace(&mut theta, next);
    }
    Ok(rec.finish(theta, reference, false))
}

/// Batched mean teacher with clipping and momentum: `v ← μv + l·g`,
/// `θ_t = θ_{t−1} − ηv`, `θ′_t = (1 − lηκ)θ′_{t−1} + lηκθ_t`.
///
/// The buffer is kept pre-multiplied by `η` so that a clipped step equals an
/// unclipped step with learning rate `lη` bit for bit.
pub fn mt_batched_iterate(
    obj: &mut impl ProximalObjective,
    theta0: &[f64],
    cfg: &MtConfig,
    mut stopper: Option<Stopper<'_>>,
) -> Result<Trajectory> {
    let mut theta = theta0.to_vec();
    let mut reference = theta.clone();
    let mut velocity = vec![0.0; theta.len()];
    let mut rec = Recorder::new(theta.len());
    let mut stopped = false;
    for t in 0..=cfg.steps {
        if t > 0 && t < cfg.steps && should_stop(&mut stopper, t, &theta)? {
            stopped = true;
        }
        let ev = evaluate_checked(obj, &theta, &reference, t)?;
        let l = clip_scale(norm(&ev.grad), cfg.clip, cfg.clip_formula);
        let grad = ev.grad.clone();
        rec.push(t, &theta, &reference, ev, l);
        if stopped || t == cfg.steps {
            break;
        }
        let eta_eff = cfg.eta * l;
        for ((v, x), g) in velocity.iter_mut().zip(theta.iter_mut()).zip(&grad) {
            *v = cfg.mu * *v + eta_eff * g;
            *x -= *v;
        }
        if !all_finite(&theta) {
            return Err(Error::NonFinite { step: t + 1 });
        }
        let rate = eta_eff * cfg.kappa;
        for (r, x) in reference.iter_mut().zip(&theta) {
            *r += rate * (x - *r);
        }
    }
    Ok(rec.finish(theta, reference, stopped))
}

/// Mean-teacher run of a model; `full_batch` uses the whole of both splits at
/// every step, otherwise batches are drawn with the configured seed.
pub fn mt_run(
    spec: &ModelSpec,
    theta0: &[f64],
    forget: &TokenDataset,
    pretrain: &TokenDataset,
    cfg: &MtConfig,
    full_batch: bool,
) -> Result<Trajectory> {
    cfg.validate(spec)?;
    let loss = resolve_loss(&cfg.loss, spec, theta0)?;
    let mut obj = ModelObjective::full(spec, forget, pretrain, loss, cfg.divergence, cfg.alpha);
    if !full_batch {
        obj = obj.sampled(cfg.batch_forget, cfg.batch_pretrain, cfg.seed);
    }
    mt_iterate(&mut obj, theta0, cfg)
}

/// Batched, clipped mean-teacher run with an optional stopper.
pub fn mt_run_batched(
    spec: &ModelSpec,
    theta0: &[f64],
    forget: &TokenDataset,
    pretrain: &TokenDataset,
    cfg: &MtConfig,
    stopper: Option<Stopper<'_>>,
) -> Result<Trajectory> {
    cfg.validate(spec)?;
    let loss = resolve_loss(&cfg.loss, spec, theta0)?;
    let mut obj = ModelObjective::full(spec, forget, pretrain, loss, cfg.divergence, cfg.alpha)
        .sampled(cfg.batch_forget, cfg.batch_pretrain, cfg.seed);
    mt_batched_iterate(&mut obj, theta0, cfg, stopper)
}

/// Natural-gradient reference `θ̄_{t+1} = θ̄_t − γ(c·H(θ̄_t) + λ̄I)^{-1}∇L(·)`
/// on full batches, with `γ, λ̄` derived from the config and `c` the
/// divergence's curvature scale. The gradient is taken at `θ̄_t`, or at
/// `θ̄_{t−1}` (with `θ̄_{−1} = θ̄_0`) when `ngd_grad_lag` is set.
pub fn ngd_run(
    spec: &ModelSpec,
    theta0: &[f64],
    forget: &TokenDataset,
    pretrain: &TokenDataset,
    cfg: &MtConfig,
) -> Result<Trajectory> {
    cfg.validate(spec)?;
    let loss = resolve_loss(&cfg.loss, spec, theta0)?;
    let params = DerivedNgdParams::from_config(cfg);
    let c = cfg.divergence.kind.curvature_scale();
    let mut theta = theta0.to_vec();
    let mut prev = theta.clone();
    let mut rec = Recorder::new(theta.len());
    for t in 0..=cfg.steps {
        let (loss_here, grad_here) = loss_and_grad(spec, &theta, forget, &loss)?;
        let grad = if cfg.ngd_grad_lag {
            loss_and_grad(spec, &prev, forget, &loss)?.1
        } else {
            grad_here
        };
        if !(all_finite(&grad) && loss_here.is_finite()) {
            return Err(Error::NonFinite { step: t });
        }
        let curvature = assemble_gnh(spec, &theta, pretrain)?
            .h
            .scaled(c)
            .shifted(params.lambda_bar);
        let natural = solve_spd(&curvature, &grad)?;
        let ev = Evaluation {
            loss: loss_here,
            loss_grad_norm: norm(&grad),
            divergence: 0.0,
            grad,
            batch: None,
        };
        rec.push(t, &theta, &theta, ev, 1.0);
        if t == cfg.steps {
            break;
        }
        let next: Vec<f64> = theta
            .iter()
            .zip(&natural)
            .map(|(x, n)| x - params.gamma * n)
            .collect();
        if !all_finite(&next) {
            return Err(Error::NonFinite { step: t + 1 });
        }
        prev = std::mem::replace(&mut theta, next);
    }
    let reference = theta.clone();
    Ok(rec.finish(theta, reference, false))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    MomentumSgd,
    Adamw,
}

/// AdamW settings. The learning rate is held at `warmup_fraction·η` for
/// `warmup_flat` steps, then rises linearly to `η` over `warmup_linear` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub warmup_flat: usize,
    pub warmup_linear: usize,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_fraction: 0.1,
            warmup_flat: 100,
            warmup_linear: 100,
        }
    }
}

impl AdamParams {
    /// Learning rate for 1-based step `t`.
    pub fn learning_rate(&self, eta: f64, t: usize) -> f64 {
        let low = self.warmup_fraction * eta;
        if t <= self.warmup_flat {
            low
        } else if t <= self.warmup_flat + self.warmup_linear {
            let frac = (t - self.warmup_flat) as f64 / self.warmup_linear as f64;
            low + (eta - low) * frac
        } else {
            eta
        }
    }
}

/// First-order run on `αL(θ) + D_λ(θ, θ_0)` with a fixed reference, using
/// the same batch sampling and clipping as the batched mean teacher.
#[allow(clippy::too_many_arguments)]
pub fn baseline_run(
    kind: BaselineKind,
    spec: &ModelSpec,
    theta0: &[f64],
    forget: &TokenDataset,
    pretrain: &TokenDataset,
    cfg: &MtConfig,
    adam: &AdamParams,
    mut stopper: Option<Stopper<'_>>,
) -> Result<Trajectory> {
    cfg.validate(spec)?;
    let loss = resolve_loss(&cfg.loss, spec, theta0)?;
    let mut obj = ModelObjective::full(spec, forget, pretrain, loss, cfg.divergence, cfg.alpha)
        .sampled(cfg.batch_forget, cfg.batch_pretrain, cfg.seed);
    let dim = theta0.len();
    let reference = theta0.to_vec();
    let mut theta = theta0.to_vec();
    let mut prev = theta.clone();
    let (mut m, mut v) = (vec![0.0; dim], vec![0.0; dim]);
    let mut rec = Recorder::new(dim);
    let mut stopped = false;
    for t in 0..=cfg.steps {
        if t > 0 && t < cfg.steps && should_stop(&mut stopper, t, &theta)? {
            stopped = true;
        }
        let ev = evaluate_checked(&mut obj, &theta, &reference, t)?;
        let l = clip_scale(norm(&ev.grad), cfg.clip, cfg.clip_formula);
        let grad: Vec<f64> = ev.grad.iter().map(|g| l * g).collect();
        rec.push(t, &theta, &reference, ev, l);
        if stopped || t == cfg.steps {
            break;
        }
        let next: Vec<f64> = match kind {
            BaselineKind::MomentumSgd => (0..dim)
                .map(|i| theta[i] - cfg.eta * grad[i] + cfg.mu * (theta[i] - prev[i]))
                .collect(),
            BaselineKind::Adamw => {
                let step = t + 1;
                let lr = adam.learning_rate(cfg.eta, step);
                let c1 = 1.0 - adam.beta1.powi(step as i32);
                let c2 = 1.0 - adam.beta2.powi(step as i32);
                (0..dim)
                    .map(|i| {
                        m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * grad[i];
                        v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * grad[i] * grad[i];
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + adam.eps);
                        theta[i] - lr * (update + adam.weight_decay * theta[i])
                    })
                    .collect()
            }
        };
        if !all_finite(&next) {
            return Err(Error::NonFinite { step: t + 1 });
        }
        prev = std::mem::replace(&mut theta, next);
    }
    Ok(rec.finish(theta, reference, stopped))
}
