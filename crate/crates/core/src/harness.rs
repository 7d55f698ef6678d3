//! Experiment orchestration: synthetic corpora, memorized targets,
//! memorization metrics, unlearning comparisons and the verification suites.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{
    estimate_regularity, ihvp_momentum, lemma_bound, ErrorInjection, IhvpConfig,
    RegularityEstimate, RegularityProblem,
};
use crate::divergence::{local_quadratic_residual, Divergence, DivergenceKind};
use crate::error::{Error, Result};
use crate::linalg::{matmul, max_eigenvalue, norm, scale, Matrix};
use crate::loss::{batch_loss, npo_weight, softmax, Loss, LossKind};
use crate::model::{loss_and_grad, DatasetRole, ModelSpec, ParamVector, Token, TokenDataset};
use crate::optimizer::{
    baseline_run, mt_iterate, mt_run, mt_run_batched, ngd_run, resolve_loss, trajectory_deviation,
    AdamParams, BaselineKind, DerivedNgdParams, Evaluation, ModelObjective, MtConfig,
    ProximalObjective, Stopper, Trajectory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Generator {
    /// Independent uniform tokens.
    Random,
    /// A random motif of `period` tokens repeated from a random phase.
    Patterned { period: usize },
    /// Distinct first token per sequence, uniform tokens after it. Needs
    /// `n_sequences ≤ vocab_size`.
    Keyed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub forget_fraction: f64,
    pub generator: Generator,
    #[serde(default)]
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if self.n_sequences < 2 {
            return Err(Error::config("n_sequences", "must be at least 2"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("seq_len", "must be at least 2"));
        }
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return Err(Error::config("forget_fraction", "must lie in (0, 1)"));
        }
        match self.generator {
            Generator::Patterned { period: 0 } => {
                return Err(Error::config("generator.period", "must be positive"));
            }
            Generator::Keyed if self.n_sequences > self.vocab_size => {
                return Err(Error::config(
                    "n_sequences",
                    "keyed corpora need n_sequences <= vocab_size",
                ));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn n_forget(&self) -> usize {
        ((self.n_sequences as f64 * self.forget_fraction).round() as usize)
            .clamp(1, self.n_sequences - 1)
    }

    /// Distinct sequences; the first [`Self::n_forget`] form the forget split.
    pub fn sequences(&self) -> Result<Vec<Vec<Token>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let v = self.vocab_size as Token;
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.n_sequences);
        let mut keys: Vec<Token> = (0..v).collect();
        keys.shuffle(&mut rng);
        let budget = 1000 * self.n_sequences;
        for _ in 0..budget {
            if out.len() == self.n_sequences {
                break;
            }
            let seq: Vec<Token> = match self.generator {
                Generator::Random => (0..self.seq_len).map(|_| rng.random_range(0..v)).collect(),
                Generator::Patterned { period } => {
                    let motif: Vec<Token> = (0..period).map(|_| rng.random_range(0..v)).collect();
                    let phase = rng.random_range(0..period);
                    (0..self.seq_len)
                        .map(|t| motif[(t + phase) % period])
                        .collect()
                }
                Generator::Keyed => std::iter::once(keys[out.len()])
                    .chain((1..self.seq_len).map(|_| rng.random_range(0..v)))
                    .collect(),
            };
            if seen.insert(seq.clone()) {
                out.push(seq);
            }
        }
        if out.len() < self.n_sequences {
            return Err(Error::config(
                "n_sequences",
                "the generator cannot produce that many distinct sequences",
            ));
        }
        Ok(out)
    }
}

/// Disjoint forget and pretrain splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub forget: TokenDataset,
    pub pretrain: TokenDataset,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec, context_len: usize) -> Result<Self> {
        let mut seqs = spec.sequences()?;
        let pretrain = seqs.split_off(spec.n_forget());
        Ok(Self::from_sequences(seqs, pretrain, context_len))
    }

    pub fn from_sequences(
        forget: Vec<Vec<Token>>,
        pretrain: Vec<Vec<Token>>,
        context_len: usize,
    ) -> Self {
        Self {
            forget: TokenDataset::from_sequences(forget, context_len, DatasetRole::Forget),
            pretrain: TokenDataset::from_sequences(pretrain, context_len, DatasetRole::Pretrain),
        }
    }

    /// Both splits together, for training the target.
    pub fn union(&self, context_len: usize) -> TokenDataset {
        let mut seqs = self.forget.sequences().to_vec();
        seqs.extend_from_slice(self.pretrain.sequences());
        TokenDataset::from_sequences(seqs, context_len, DatasetRole::Pretrain)
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        self.forget.validate(spec)?;
        self.pretrain.validate(spec)?;
        let forget: HashSet<&Vec<Token>> = self.forget.sequences().iter().collect();
        if self.pretrain.sequences().iter().any(|s| forget.contains(s)) {
            return Err(Error::InvalidInput(
                "forget and pretrain splits share a sequence".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub exact_match_rate: f64,
    pub lcs_ratio: f64,
    pub nll_forget: f64,
    pub nll_pretrain: f64,
}

/// Greedy decoding; ties go to the lowest token id.
pub fn greedy_continuation(
    spec: &ModelSpec,
    theta: &[f64],
    prompt: &[Token],
    len: usize,
) -> Result<Vec<Token>> {
    let mut seq = prompt.to_vec();
    for _ in 0..len {
        let start = seq.len().saturating_sub(spec.context_len);
        let h = spec.logits(theta, &seq[start..])?;
        let mut best = 0;
        for (j, &x) in h.iter().enumerate() {
            if x > h[best] {
                best = j;
            }
        }
        seq.push(best as Token);
    }
    Ok(seq.split_off(prompt.len()))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// `LCS(generated, truth) / |truth|`
pub fn lcs_ratio<T: PartialEq>(generated: &[T], truth: &[T]) -> f64 {
    if truth.is_empty() {
        1.0
    } else {
        lcs_len(generated, truth) as f64 / truth.len() as f64
    }
}

/// Greedy continuation metrics on the forget prompts, plus per-token NLL on
/// both splits.
pub fn memorization_report(
    spec: &ModelSpec,
    theta: &[f64],
    corpus: &Corpus,
    prompt_len: usize,
    completion_len: usize,
) -> Result<MemorizationReport> {
    let seqs = corpus.forget.sequences();
    if seqs.is_empty() {
        return Err(Error::InvalidInput("forget split has no sequences".into()));
    }
    if prompt_len == 0 {
        return Err(Error::config("prompt_len", "must be positive"));
    }
    let mut exact = 0usize;
    let mut lcs = 0.0;
    for seq in seqs {
        if prompt_len + completion_len > seq.len() {
            return Err(Error::config(
                "completion_len",
                format!(
                    "prompt_len + completion_len exceeds the sequence length {}",
                    seq.len()
                ),
            ));
        }
        let truth = &seq[prompt_len..prompt_len + completion_len];
        let got = greedy_continuation(spec, theta, &seq[..prompt_len], completion_len)?;
        if got == truth {
            exact += 1;
        }
        lcs += lcs_ratio(&got, truth);
    }
    let n = seqs.len() as f64;
    Ok(MemorizationReport {
        exact_match_rate: exact as f64 / n,
        lcs_ratio: lcs / n,
        nll_forget: batch_loss(&Loss::Nll, spec, theta, &corpus.forget)?,
        nll_pretrain: batch_loss(&Loss::Nll, spec, theta, &corpus.pretrain)?,
    })
}

fn default_train_lr() -> f64 {
    0.5
}
fn default_train_momentum() -> f64 {
    0.9
}
fn default_threshold() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub epochs: usize,
    #[serde(default = "default_train_lr")]
    pub lr: f64,
    #[serde(default = "default_train_momentum")]
    pub momentum: f64,
    /// Minimum forget exact-match rate the trained target must reach.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub prompt_len: usize,
    pub completion_len: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Trains a target on both splits with full-batch momentum gradient descent
/// on the NLL, one step per epoch, and checks that it memorized the forget
/// split.
pub fn build_target(
    spec: &ModelSpec,
    corpus: &Corpus,
    cfg: &TargetConfig,
) -> Result<(ParamVector, MemorizationReport)> {
    spec.validate()?;
    corpus.validate(spec)?;
    if !(cfg.lr > 0.0) {
        return Err(Error::config("lr", "must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::config("momentum", "must lie in [0, 1)"));
    }
    let data = corpus.union(spec.context_len);
    let mut theta = spec.init_params(cfg.seed);
    let mut velocity = vec![0.0; theta.len()];
    for epoch in 0..cfg.epochs {
        let (_, g) = loss_and_grad(spec, &theta, &data, &Loss::Nll)?;
        for ((x, v), gi) in theta.iter_mut().zip(velocity.iter_mut()).zip(&g) {
            *v = cfg.momentum * *v + gi;
            *x -= cfg.lr * *v;
        }
        if !crate::linalg::all_finite(&theta) {
            return Err(Error::NonFinite { step: epoch + 1 });
        }
    }
    let report = memorization_report(spec, &theta, corpus, cfg.prompt_len, cfg.completion_len)?;
    if report.exact_match_rate < cfg.threshold {
        return Err(Error::NotMemorized {
            rate: report.exact_match_rate,
            threshold: cfg.threshold,
        });
    }
    Ok((theta, report))
}

/// Mean `p_y` over the forget pairs.
pub fn mean_target_probability(
    spec: &ModelSpec,
    theta: &[f64],
    forget: &TokenDataset,
) -> Result<f64> {
    if forget.is_empty() {
        return Err(Error::InvalidInput("forget split is empty".into()));
    }
    let mut total = 0.0;
    for pair in forget.pairs() {
        total += softmax(&spec.logits(theta, &pair.context)?)[pair.next as usize];
    }
    Ok(total / forget.len() as f64)
}

// ---------------------------------------------------------------------------
// Trajectory approximation

fn default_alphas() -> Vec<f64> {
    vec![0.1, 0.05, 0.025, 0.0125]
}
fn default_min_slope() -> f64 {
    0.8
}
fn default_init_scale() -> f64 {
    1.0
}

/// Full-batch mean teacher against its natural-gradient reference on a
/// bigram model, over a grid of loss weights with `T·γ` held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Config {
    pub corpus: CorpusSpec,
    /// Base run; `alpha` and `steps` are replaced per grid point.
    pub mt: MtConfig,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// The product `T·γ`.
    pub horizon: f64,
    #[serde(default)]
    pub init_seed: u64,
    /// Initial parameters are `init_scale ×` the uniform(−0.1, 0.1) draw.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_min_slope")]
    pub min_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Row {
    pub grad_lag: bool,
    pub alpha: f64,
    pub steps: usize,
    pub gamma: f64,
    pub lambda_bar: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Fit {
    pub grad_lag: bool,
    /// Least-squares slope of `ln deviation` against `ln(α ln(1/α))`.
    pub slope: f64,
    pub monotone: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub rows: Vec<Theorem1Row>,
    pub fits: Vec<Theorem1Fit>,
    /// Regularity quantities along the largest-α trajectory.
    pub regularity: RegularityEstimate,
    pub pass: bool,
}

pub fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn verify_theorem1(cfg: &Theorem1Config) -> Result<Theorem1Report> {
    let spec = ModelSpec::bigram(cfg.corpus.vocab_size);
    cfg.mt.validate(&spec)?;
    if cfg.alphas.len() < 2 || cfg.alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::config(
            "alphas",
            "need at least two values in (0, 1)",
        ));
    }
    if !(cfg.horizon > 0.0) {
        return Err(Error::config("horizon", "must be positive"));
    }
    let corpus = Corpus::generate(&cfg.corpus, 1)?;
    let theta0: Vec<f64> = spec
        .init_params(cfg.init_seed)
        .iter()
        .map(|x| x * cfg.init_scale)
        .collect();

    let runs: Vec<Result<(Vec<Theorem1Row>, Trajectory)>> = cfg
        .alphas
        .par_iter()
        .map(|&alpha| {
            let params = DerivedNgdParams::new(
                cfg.mt.eta,
                cfg.mt.kappa,
                alpha,
                cfg.mt.divergence.lambda,
                cfg.mt.mu,
            );
            let mut mt_cfg = cfg.mt.clone();
            mt_cfg.alpha = alpha;
            mt_cfg.steps = (cfg.horizon / params.gamma).round() as usize;
            let mt = mt_run(
                &spec,
                &theta0,
                &corpus.forget,
                &corpus.pretrain,
                &mt_cfg,
                true,
            )?;
            let mut rows = Vec::new();
            for lag in [false, true] {
                mt_cfg.ngd_grad_lag = lag;
                let ngd = ngd_run(&spec, &theta0, &corpus.forget, &corpus.pretrain, &mt_cfg)?;
                rows.push(Theorem1Row {
                    grad_lag: lag,
                    alpha,
                    steps: mt_cfg.steps,
                    gamma: params.gamma,
                    lambda_bar: params.lambda_bar,
                    deviation: trajectory_deviation(&mt, &ngd)?,
                });
            }
            Ok((rows, mt))
        })
        .collect();
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    for run in runs {
        let (r, t) = run?;
        rows.extend(r);
        trajectories.push(t);
    }
    rows.sort_by(|a, b| {
        a.grad_lag
            .cmp(&b.grad_lag)
            .then(b.alpha.total_cmp(&a.alpha))
    });

    let mut fits = Vec::new();
    for lag in [false, true] {
        let sel: Vec<&Theorem1Row> = rows.iter().filter(|r| r.grad_lag == lag).collect();
        let x: Vec<f64> = sel
            .iter()
            .map(|r| (r.alpha * (1.0 / r.alpha).ln()).ln())
            .collect();
        let y: Vec<f64> = sel.iter().map(|r| r.deviation.ln()).collect();
        let slope = least_squares_slope(&x, &y);
        let monotone = sel.windows(2).all(|w| w[1].deviation < w[0].deviation);
        fits.push(Theorem1Fit {
            grad_lag: lag,
            slope,
            monotone,
            pass: monotone && slope >= cfg.min_slope,
        });
    }

    let largest = cfg
        .alphas
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty grid");
    let traj = &trajectories[largest];
    let stride = (traj.len() / 20).max(1);
    let samples: Vec<Vec<f64>> = traj
        .steps
        .iter()
        .step_by(stride)
        .filter_map(|s| s.theta.clone())
        .collect();
    let loss = resolve_loss(&cfg.mt.loss, &spec, &theta0)?;
    let lambda_bar = DerivedNgdParams::new(
        cfg.mt.eta,
        cfg.mt.kappa,
        cfg.alphas[largest],
        cfg.mt.divergence.lambda,
        cfg.mt.mu,
    )
    .lambda_bar;
    let regularity = estimate_regularity(
        &RegularityProblem {
            spec: &spec,
            forget: &corpus.forget,
            pretrain: &corpus.pretrain,
            loss: &loss,
            divergence: cfg.mt.divergence,
        },
        &samples,
        &[lambda_bar],
    )?;
    let pass = fits.iter().all(|f| f.pass);
    Ok(Theorem1Report {
        rows,
        fits,
        regularity,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Momentum IHVP bound

fn default_lemma_mus() -> Vec<f64> {
    vec![0.0, 0.5, 0.9]
}
fn default_lemma_lambdas() -> Vec<f64> {
    vec![0.1, 1.0, 10.0]
}
fn default_lemma_dim() -> usize {
    8
}
fn default_error_norm() -> f64 {
    0.01
}
fn default_eta_fraction() -> f64 {
    0.5
}
fn default_lemma_steps() -> usize {
    400
}
fn default_roundoff() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaConfig {
    #[serde(default = "default_lemma_dim")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lemma_mus")]
    pub mus: Vec<f64>,
    #[serde(default = "default_lemma_lambdas")]
    pub lambdas: Vec<f64>,
    /// Norm of the constant-norm injected errors.
    #[serde(default = "default_error_norm")]
    pub error_norm: f64,
    /// `η = eta_fraction / (λ_max(H) + λ)`.
    #[serde(default = "default_eta_fraction")]
    pub eta_fraction: f64,
    #[serde(default = "default_lemma_steps")]
    pub steps: usize,
    /// Slack `roundoff·‖u_0 − u*‖` added to the bound so that floating-point
    /// noise is not mistaken for a violation once the geometric term
    /// underflows.
    #[serde(default = "default_roundoff")]
    pub roundoff: f64,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaRow {
    pub mu: f64,
    pub lambda: f64,
    pub error_mode: String,
    pub eta: f64,
    pub steps: usize,
    /// `max_t ‖u_t − u*‖ / bound_t`
    pub max_ratio: f64,
    pub violations: usize,
    pub first_violation: Option<usize>,
    pub skipped: Option<String>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub rows: Vec<LemmaRow>,
    pub pass: bool,
}

/// Random SPD matrix `AAᵀ/dim` with uniform(−1, 1) entries in `A`.
pub fn random_spd(dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::from_row_major(
        dim,
        dim,
        (0..dim * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .expect("square");
    matmul(&a, &a.transpose())
        .expect("square")
        .scaled(1.0 / dim as f64)
}

/// Compares `‖u_t − u*‖` with the closed-form bound at every step, over the
/// grid `mus × lambdas × {zero, constant-norm}` errors.
pub fn verify_lemma(cfg: &LemmaConfig) -> Result<LemmaReport> {
    if cfg.dim == 0 || cfg.steps == 0 {
        return Err(Error::config(
            "dim",
            "dimension and step count must be positive",
        ));
    }
    let h = random_spd(cfg.dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let g: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lmax = max_eigenvalue(&h)?;
    let modes = [
        ("zero", ErrorInjection::Zero),
        (
            "const-norm",
            ErrorInjection::ConstantNorm {
                norm: cfg.error_norm,
                seed: cfg.seed.wrapping_add(2),
            },
        ),
    ];
    let mut rows = Vec::new();
    for &mu in &cfg.mus {
        for &lambda in &cfg.lambdas {
            for (name, injection) in modes {
                let eta = cfg.eta_fraction / (lmax + lambda);
                let ihvp = IhvpConfig {
                    eta,
                    mu,
                    lambda,
                    steps: cfg.steps,
                    error_injection: injection,
                };
                let mut row = LemmaRow {
                    mu,
                    lambda,
                    error_mode: name.into(),
                    eta,
                    steps: cfg.steps,
                    max_ratio: 0.0,
                    violations: 0,
                    first_violation: None,
                    skipped: None,
                    pass: true,
                };
                match ihvp_momentum(&h, &g, &ihvp) {
                    Err(Error::Precondition(msg)) => {
                        row.skipped = Some(msg);
                    }
                    Err(e) => return Err(e),
                    Ok((_, trace)) => {
                        let e0 = trace.distances[0];
                        let mut max_err: f64 = 0.0;
                        for (t, &d) in trace.distances.iter().enumerate() {
                            if t > 0 {
                                max_err = max_err.max(trace.error_norms[t - 1]);
                            }
                            let bound =
                                lemma_bound(eta, mu, lambda, t, e0, max_err) + cfg.roundoff * e0;
                            let ratio = d / bound;
                            row.max_ratio = row.max_ratio.max(ratio);
                            if d > bound {
                                row.violations += 1;
                                row.first_violation.get_or_insert(t);
                            }
                        }
                        row.pass = row.violations == 0;
                    }
                }
                rows.push(row);
            }
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(LemmaReport { rows, pass })
}

// ---------------------------------------------------------------------------
// Local quadratic behavior of the divergences

fn default_t_large() -> f64 {
    1e-2
}
fn default_t_small() -> f64 {
    1e-4
}
fn default_min_ratio() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticConfig {
    pub corpus: CorpusSpec,
    pub context_len: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_t_large")]
    pub t_large: f64,
    #[serde(default = "default_t_small")]
    pub t_small: f64,
    #[serde(default = "default_min_ratio")]
    pub min_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticRow {
    pub model: String,
    pub divergence: String,
    /// `residual(t_large) / t_large²`
    pub scaled_large: f64,
    /// `residual(t_small) / t_small²`
    pub scaled_small: f64,
    pub ratio: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticReport {
    pub rows: Vec<QuadraticRow>,
    pub pass: bool,
}

pub fn verify_divergence_quadratic(cfg: &QuadraticConfig) -> Result<QuadraticReport> {
    let v = cfg.corpus.vocab_size;
    let models = [
        ModelSpec::bigram(v),
        ModelSpec::mlp(v, cfg.context_len, cfg.hidden_dim),
    ];
    let mut rows = Vec::new();
    for spec in &models {
        spec.validate()?;
        let corpus = Corpus::generate(&cfg.corpus, spec.context_len)?;
        let theta: Vec<f64> = spec
            .init_params(cfg.seed)
            .iter()
            .map(|x| x * cfg.init_scale)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let d: Vec<f64> = (0..theta.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let d = scale(&d, 1.0 / norm(&d));
        for kind in [DivergenceKind::Kl, DivergenceKind::Qkl] {
            let div = Divergence::new(kind, cfg.lambda);
            let r = |t: f64| -> Result<f64> {
                Ok(
                    local_quadratic_residual(&div, spec, &theta, &d, t, &corpus.pretrain)?
                        / (t * t),
                )
            };
            let scaled_large = r(cfg.t_large)?;
            let scaled_small = r(cfg.t_small)?;
            let ratio = scaled_large / scaled_small;
            rows.push(QuadraticRow {
                model: spec_name(spec),
                divergence: kind.name().into(),
                scaled_large,
                scaled_small,
                ratio,
                pass: ratio >= cfg.min_ratio,
            });
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(QuadraticReport { rows, pass })
}

fn spec_name(spec: &ModelSpec) -> String {
    serde_json::to_value(spec.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Gradient dynamics at a memorized start

fn default_saturation() -> f64 {
    0.9
}

fn default_dynamics_losses() -> Vec<LossKind> {
    vec![
        LossKind::Ll,
        LossKind::Npo { beta: 0.1 },
        LossKind::nlul(),
        LossKind::It {
            teacher: Default::default(),
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Full-batch run settings; `loss` is replaced by each entry of `losses`.
    pub mt: MtConfig,
    #[serde(default = "default_dynamics_losses")]
    pub losses: Vec<LossKind>,
    /// Minimum mean `p_y` on forget pairs for the start to count as memorized.
    #[serde(default = "default_saturation")]
    pub saturation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPoint {
    pub loss: String,
    pub t: usize,
    pub forget_nll: f64,
    /// The loss value itself; for IT this is the KL to the teacher.
    pub loss_value: f64,
    pub loss_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    pub loss: String,
    pub initial_grad_norm: f64,
    pub forget_nll_start: f64,
    pub forget_nll_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub mean_target_probability: f64,
    /// Mean NPO sequence weight at the start, where the model is its own base.
    pub npo_initial_weight: f64,
    pub summaries: Vec<DynamicsSummary>,
    pub points: Vec<DynamicsPoint>,
}

fn default_min_grad_ratio() -> f64 {
    10.0
}
fn default_min_escape() -> f64 {
    1.0
}
fn default_max_stagnation() -> f64 {
    0.1
}

/// Pass thresholds for the dynamics contrast between NLUL and LL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsThresholds {
    /// Lower bound on `‖∇NLUL‖ / ‖∇LL‖` at the start.
    #[serde(default = "default_min_grad_ratio")]
    pub min_grad_ratio: f64,
    /// Lower bound on the forget-NLL rise under NLUL.
    #[serde(default = "default_min_escape")]
    pub min_nlul_rise: f64,
    /// Upper bound on the forget-NLL rise under LL.
    #[serde(default = "default_max_stagnation")]
    pub max_ll_rise: f64,
}

impl Default for DynamicsThresholds {
    fn default() -> Self {
        Self {
            min_grad_ratio: default_min_grad_ratio(),
            min_nlul_rise: default_min_escape(),
            max_ll_rise: default_max_stagnation(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsVerdict {
    pub grad_ratio: f64,
    pub nlul_rise: f64,
    pub ll_rise: f64,
    /// `‖∇NLUL‖` exceeds the LL and NPO gradient norms at the start.
    pub nlul_largest: bool,
    pub pass: bool,
}

impl DynamicsReport {
    /// Needs `ll` and `nlul` runs; `npo` is compared when present.
    pub fn verdict(&self, th: &DynamicsThresholds) -> Result<DynamicsVerdict> {
        let get = |name: &str| {
            self.summary(name)
                .ok_or_else(|| Error::config("losses", format!("the study needs a `{name}` run")))
        };
        let (ll, nlul) = (get("ll")?, get("nlul")?);
        let grad_ratio = nlul.initial_grad_norm / ll.initial_grad_norm;
        let nlul_rise = nlul.forget_nll_end - nlul.forget_nll_start;
        let ll_rise = ll.forget_nll_end - ll.forget_nll_start;
        let nlul_largest = nlul.initial_grad_norm > ll.initial_grad_norm
            && self
                .summary("npo")
                .is_none_or(|n| nlul.initial_grad_norm > n.initial_grad_norm);
        let pass = grad_ratio >= th.min_grad_ratio
            && nlul_rise >= th.min_nlul_rise
            && ll_rise <= th.max_ll_rise
            && nlul_largest;
        Ok(DynamicsVerdict {
            grad_ratio,
            nlul_rise,
            ll_rise,
            nlul_largest,
            pass,
        })
    }

    pub fn summary(&self, loss: &str) -> Option<&DynamicsSummary> {
        self.summaries.iter().find(|s| s.loss == loss)
    }

    /// Long-format CSV: `loss,t,forget_nll,loss_value,loss_grad_norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("loss,t,forget_nll,loss_value,loss_grad_norm\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e}\n",
                p.loss, p.t, p.forget_nll, p.loss_value, p.loss_grad_norm
            ));
        }
        out
    }
}

/// Records the forget NLL at every evaluation.
struct Tracked<'a> {
    inner: ModelObjective<'a>,
    spec: &'a ModelSpec,
    forget: &'a TokenDataset,
    nll: Vec<f64>,
}

impl ProximalObjective for Tracked<'_> {
    fn evaluate(&mut self, theta: &[f64], reference: &[f64]) -> Result<Evaluation> {
        self.nll
            .push(batch_loss(&Loss::Nll, self.spec, theta, self.forget)?);
        self.inner.evaluate(theta, reference)
    }
}

pub fn gradient_dynamics_study(
    spec: &ModelSpec,
    target: &[f64],
    corpus: &Corpus,
    cfg: &DynamicsConfig,
) -> Result<DynamicsReport> {
    let p = mean_target_probability(spec, target, &corpus.forget)?;
    if !(p >= cfg.saturation) {
        return Err(Error::Precondition(format!(
            "the start is not memorized: mean p_y on forget pairs is {p:.4}, below {}; p_y is not saturated",
            cfg.saturation
        )));
    }
    let mut npo_w = 0.0;
    for seq in corpus.forget.sequences() {
        npo_w += npo_weight(spec, seq, target, target, 1.0)?;
    }
    let npo_initial_weight = npo_w / corpus.forget.sequences().len() as f64;

    let runs: Vec<Result<(DynamicsSummary, Vec<DynamicsPoint>)>> = cfg
        .losses
        .par_iter()
        .map(|kind| {
            let mut run_cfg = cfg.mt.clone();
            run_cfg.loss = kind.clone();
            run_cfg.validate(spec)?;
            let loss = resolve_loss(kind, spec, target)?;
            let mut obj = Tracked {
                inner: ModelObjective::full(
                    spec,
                    &corpus.forget,
                    &corpus.pretrain,
                    loss,
                    run_cfg.divergence,
                    run_cfg.alpha,
                ),
                spec,
                forget: &corpus.forget,
                nll: Vec::new(),
            };
            let traj = mt_iterate(&mut obj, target, &run_cfg)?;
            let name = kind.name().to_string();
            let points: Vec<DynamicsPoint> = traj
                .steps
                .iter()
                .zip(&obj.nll)
                .map(|(s, &nll)| DynamicsPoint {
                    loss: name.clone(),
                    t: s.t,
                    forget_nll: nll,
                    loss_value: s.loss,
                    loss_grad_norm: s.loss_grad_norm,
                })
                .collect();
            let summary = DynamicsSummary {
                loss: name,
                initial_grad_norm: points[0].loss_grad_norm,
                forget_nll_start: points[0].forget_nll,
                forget_nll_end: points[points.len() - 1].forget_nll,
            };
            Ok((summary, points))
        })
        .collect();
    let mut summaries = Vec::new();
    let mut points = Vec::new();
    for run in runs {
        let (s, p) = run?;
        summaries.push(s);
        points.extend(p);
    }
    Ok(DynamicsReport {
        mean_target_probability: p,
        npo_initial_weight,
        summaries,
        points,
    })
}

// ---------------------------------------------------------------------------
// Unlearning experiments

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Leaves the target untouched.
    Noop,
    /// Full-batch mean teacher.
    Mt,
    /// Batched mean teacher with clipping; honours the stop rule.
    MtBatched,
    MomentumSgd,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub optimizer: OptimizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<MtConfig>,
    #[serde(default)]
    pub adam: AdamParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    ExactMatch,
    LcsRatio,
}

/// Stops a run once the metric on the forget prompts falls to `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub metric: StopMetric,
    pub threshold: f64,
    pub every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompt_len: usize,
    pub completion_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub name: String,
    pub before: MemorizationReport,
    pub after: Option<MemorizationReport>,
    /// `|nll_pretrain(after) − nll_pretrain(before)|`
    pub drift: Option<f64>,
    /// `‖θ_final − θ_target‖`
    pub param_shift: Option<f64>,
    pub steps_run: usize,
    pub error: Option<String>,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
    #[serde(skip)]
    pub final_theta: Option<Vec<f64>>,
}

fn make_stopper<'a>(
    rule: Option<StopRule>,
    spec: &'a ModelSpec,
    corpus: &'a Corpus,
    eval: EvalConfig,
) -> Option<Stopper<'a>> {
    rule.map(|rule| Stopper {
        every: rule.every,
        check: Box::new(move |theta: &[f64]| {
            let r = memorization_report(spec, theta, corpus, eval.prompt_len, eval.completion_len)?;
            let value = match rule.metric {
                StopMetric::ExactMatch => r.exact_match_rate,
                StopMetric::LcsRatio => r.lcs_ratio,
            };
            Ok(value <= rule.threshold)
        }),
    })
}

fn run_optimizer(
    spec: &ModelSpec,
    target: &[f64],
    corpus: &Corpus,
    method: &MethodSpec,
    stop: Option<StopRule>,
    eval: EvalConfig,
) -> Result<(Vec<f64>, Option<Trajectory>)> {
    let cfg = || {
        method.config.as_ref().ok_or_else(|| {
            Error::config(
                "config",
                format!("method {} needs a run config", method.name),
            )
        })
    };
    let traj = match method.optimizer {
        OptimizerKind::Noop => return Ok((target.to_vec(), None)),
        OptimizerKind::Mt => mt_run(spec, target, &corpus.forget, &corpus.pretrain, cfg()?, true)?,
        OptimizerKind::MtBatched => mt_run_batched(
            spec,
            target,
            &corpus.forget,
            &corpus.pretrain,
            cfg()?,
            make_stopper(stop, spec, corpus, eval),
        )?,
        OptimizerKind::MomentumSgd | OptimizerKind::Adamw => {
            let kind = if method.optimizer == OptimizerKind::Adamw {
                BaselineKind::Adamw
            } else {
                BaselineKind::MomentumSgd
            };
            baseline_run(
                kind,
                spec,
                target,
                &corpus.forget,
                &corpus.pretrain,
                cfg()?,
                &method.adam,
                make_stopper(stop, spec, corpus, eval),
            )?
        }
    };
    Ok((traj.final_theta.clone(), Some(traj)))
}

/// Runs one method from `target`; failures become an error row.
pub fn run_method(
    spec: &ModelSpec,
    target: &[f64],
    corpus: &Corpus,
    method: &MethodSpec,
    stop: Option<StopRule>,
    eval: EvalConfig,
) -> Result<MethodOutcome> {
    let before = memorization_report(spec, target, corpus, eval.prompt_len, eval.completion_len)?;
    let mut out = MethodOutcome {
        name: method.name.clone(),
        before,
        after: None,
        drift: None,
        param_shift: None,
        steps_run: 0,
        error: None,
        trajectory: None,
        final_theta: None,
    };
    match run_optimizer(spec, target, corpus, method, stop, eval) {
        Ok((theta, traj)) => {
            let after =
                memorization_report(spec, &theta, corpus, eval.prompt_len, eval.completion_len)?;
            out.drift = Some((after.nll_pretrain - before.nll_pretrain).abs());
            out.after = Some(after);
            out.param_shift = Some(crate::linalg::distance(&theta, target));
            out.steps_run = traj.as_ref().map_or(0, |t| t.len() - 1);
            out.trajectory = traj;
            out.final_theta = Some(theta);
        }
        Err(e @ Error::Config { .. }) => return Err(e),
        Err(e) => out.error = Some(e.to_string()),
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub rows: Vec<MethodOutcome>,
}

impl UnlearnReport {
    /// One row per method: before/after metrics and drift.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,steps,em_before,em_after,lcs_before,lcs_after,nll_forget_before,nll_forget_after,nll_pretrain_before,nll_pretrain_after,drift,param_shift,error\n",
        );
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        for r in &self.rows {
            let a = r.after;
            out.push_str(&format!(
                "{},{},{:e},{},{:e},{},{:e},{},{:e},{},{},{},{}\n",
                r.name,
                r.steps_run,
                r.before.exact_match_rate,
                opt(a.map(|a| a.exact_match_rate)),
                r.before.lcs_ratio,
                opt(a.map(|a| a.lcs_ratio)),
                r.before.nll_forget,
                opt(a.map(|a| a.nll_forget)),
                r.before.nll_pretrain,
                opt(a.map(|a| a.nll_pretrain)),
                opt(r.drift),
                opt(r.param_shift),
                r.error.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        out
    }
}

/// Runs every method from the same target on the same corpus and prompts.
pub fn unlearn_experiment(
    spec: &ModelSpec,
    target: &[f64],
    corpus: &Corpus,
    methods: &[MethodSpec],
    stop: Option<StopRule>,
    eval: EvalConfig,
) -> Result<UnlearnReport> {
    let rows: Vec<Result<MethodOutcome>> = methods
        .par_iter()
        .map(|m| run_method(spec, target, corpus, m, stop, eval))
        .collect();
    Ok(UnlearnReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub steps_run: usize,
    /// Metrics on the full forget split after this round.
    pub report: MemorizationReport,
    /// Pretrain-NLL drift from the original target.
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialReport {
    pub single_round: MethodOutcome,
    pub rounds: Vec<RoundRow>,
    pub final_drift: f64,
    /// `final_drift / single_round drift`
    pub drift_ratio: f64,
}

/// Splits the forget sequences into `rounds` contiguous parts and unlearns
/// them one after another, each round starting where the previous ended.
/// A single round over the whole forget split is run for comparison.
pub fn sequential_unlearn(
    spec: &ModelSpec,
    target: &[f64],
    corpus: &Corpus,
    method: &MethodSpec,
    rounds: usize,
    stop: Option<StopRule>,
    eval: EvalConfig,
) -> Result<SequentialReport> {
    let seqs = corpus.forget.sequences();
    if rounds == 0 || rounds > seqs.len() {
        return Err(Error::config(
            "rounds",
            format!("must lie in 1..={}", seqs.len()),
        ));
    }
    let single_round = run_method(spec, target, corpus, method, stop, eval)?;
    let base = memorization_report(spec, target, corpus, eval.prompt_len, eval.completion_len)?;
    let mut theta = target.to_vec();
    let mut rows = Vec::new();
    let per = seqs.len().div_ceil(rounds);
    for (round, chunk) in seqs.chunks(per).enumerate() {
        let part = Corpus::from_sequences(
            chunk.to_vec(),
            corpus.pretrain.sequences().to_vec(),
            spec.context_len,
        );
        let outcome = run_method(spec, &theta, &part, method, stop, eval)?;
        if let Some(err) = outcome.error {
            return Err(Error::InvalidInput(format!("round {round} failed: {err}")));
        }
        theta = outcome.final_theta.expect("successful run");
        let report =
            memorization_report(spec, &theta, corpus, eval.prompt_len, eval.completion_len)?;
        rows.push(RoundRow {
            round,
            steps_run: outcome.steps_run,
            report,
            drift: (report.nll_pretrain - base.nll_pretrain).abs(),
        });
    }
    let final_drift = rows.last().map_or(0.0, |r| r.drift);
    let drift_ratio = final_drift / single_round.drift.unwrap_or(f64::NAN);
    Ok(SequentialReport {
        single_round,
        rounds: rows,
        final_drift,
        drift_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_spec(generator: Generator) -> CorpusSpec {
        CorpusSpec {
            vocab_size: 8,
            n_sequences: 10,
            seq_len: 12,
            forget_fraction: 0.3,
            generator,
            seed: 3,
        }
    }

    #[test]
    fn corpus_splits_are_disjoint_and_seeded() {
        for gen in [Generator::Random, Generator::Patterned { period: 4 }] {
            let spec = corpus_spec(gen);
            let a = Corpus::generate(&spec, 2).unwrap();
            assert_eq!(a.forget.sequences().len(), 3);
            assert_eq!(a.pretrain.sequences().len(), 7);
            a.validate(&ModelSpec::mlp(8, 2, 3)).unwrap();
            assert_eq!(Corpus::generate(&spec, 2).unwrap(), a);
        }
        let tiny = CorpusSpec {
            vocab_size: 2,
            n_sequences: 5,
            seq_len: 2,
            ..corpus_spec(Generator::Random)
        };
        assert!(tiny.sequences().is_err());
    }

    #[test]
    fn keyed_sequences_have_distinct_first_tokens() {
        let spec = CorpusSpec {
            n_sequences: 8,
            ..corpus_spec(Generator::Keyed)
        };
        let seqs = spec.sequences().unwrap();
        let firsts: HashSet<Token> = seqs.iter().map(|s| s[0]).collect();
        assert_eq!(firsts.len(), 8);
        let too_many = CorpusSpec {
            n_sequences: 9,
            ..spec
        };
        assert!(too_many.validate().is_err());
    }

    #[test]
    fn patterned_sequences_repeat() {
        let seqs = corpus_spec(Generator::Patterned { period: 3 })
            .sequences()
            .unwrap();
        for s in seqs {
            assert!((3..s.len()).all(|t| s[t] == s[t - 3]));
        }
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_ratio(b"axc", b"abc"), 2.0 / 3.0);
        assert_eq!(lcs_len(b"abcbdab", b"bdcaba"), 4);
        assert_eq!(lcs_ratio::<u8>(b"", b""), 1.0);
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let spec = ModelSpec::bigram(4);
        assert_eq!(
            greedy_continuation(&spec, &[0.0; 16], &[3], 3).unwrap(),
            vec![0, 0, 0]
        );
    }

    fn chain_target(
        seqs: Vec<Vec<Token>>,
    ) -> (ModelSpec, Corpus, Result<(ParamVector, MemorizationReport)>) {
        let spec = ModelSpec::bigram(6);
        let corpus = Corpus::from_sequences(seqs, vec![vec![5, 5, 5, 5, 5]], 1);
        let cfg = TargetConfig {
            epochs: 300,
            lr: 2.0,
            momentum: 0.9,
            threshold: 0.0,
            prompt_len: 1,
            completion_len: 4,
            seed: 0,
        };
        let out = build_target(&spec, &corpus, &cfg);
        (spec, corpus, out)
    }

    #[test]
    fn bigram_chain_is_memorized() {
        let (_, _, out) = chain_target(vec![vec![0, 1, 2, 3, 4]]);
        let (_, report) = out.unwrap();
        assert_eq!(report.exact_match_rate, 1.0);
        assert_eq!(report.lcs_ratio, 1.0);
    }

    #[test]
    fn bigram_conflict_caps_exact_match() {
        // Both sequences continue token 1 differently: 0→1→2→… and 3→1→4→….
        // A bigram row can prefer only one successor, so at most one of the
        // two completions can be reproduced.
        let (_, _, out) = chain_target(vec![vec![0, 1, 2, 2, 2], vec![3, 1, 4, 4, 4]]);
        let (_, report) = out.unwrap();
        assert_eq!(report.exact_match_rate, 0.5);
    }

    #[test]
    fn target_threshold_is_enforced() {
        let spec = ModelSpec::bigram(6);
        let corpus = Corpus::from_sequences(
            vec![vec![0, 1, 2, 2, 2], vec![3, 1, 4, 4, 4]],
            vec![vec![5, 5, 5]],
            1,
        );
        let cfg = TargetConfig {
            epochs: 100,
            lr: 2.0,
            momentum: 0.9,
            threshold: 0.9,
            prompt_len: 1,
            completion_len: 4,
            seed: 0,
        };
        assert!(matches!(
            build_target(&spec, &corpus, &cfg),
            Err(Error::NotMemorized { .. })
        ));
    }

    #[test]
    fn uniform_model_rarely_matches() {
        let spec = ModelSpec::mlp(32, 2, 4);
        let cs = CorpusSpec {
            vocab_size: 32,
            n_sequences: 200,
            seq_len: 14,
            forget_fraction: 0.5,
            generator: Generator::Random,
            seed: 9,
        };
        let corpus = Corpus::generate(&cs, 2).unwrap();
        let zero = vec![0.0; spec.param_count()];
        let r = memorization_report(&spec, &zero, &corpus, 4, 10).unwrap();
        // Tie-breaking always emits token 0, so a match needs ten zeros.
        let all_zero = corpus
            .forget
            .sequences()
            .iter()
            .filter(|s| s[4..14].iter().all(|&t| t == 0))
            .count();
        assert_eq!(r.exact_match_rate, all_zero as f64 / 100.0);
        assert!(r.exact_match_rate <= 1e-3);
        assert!((r.nll_forget - (32f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn lemma_mu_zero_rate() {
        use crate::curvature::lemma_rate;
        assert_eq!(lemma_rate(0.1, 0.0, 2.0), 1.0 - 0.2);
    }

    #[test]
    fn slope_of_a_power_law() {
        let x: Vec<f64> = [1.0f64, 2.0, 4.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [3.0f64, 12.0, 48.0].iter().map(|v| v.ln()).collect();
        assert!((least_squares_slope(&x, &y) - 2.0).abs() < 1e-12);
    }
}
