//! Unlearning losses on logits: log-likelihood (LL), negative
//! log-unlikelihood (NLUL), incompetent teacher (IT), the sequence-level NPO
//! loss, and plain NLL.
//!
//! All losses are written as objectives to be *minimized*. LL is the negation
//! of NLL; NLUL is `−log(1 − p_y)`, whose logit gradient is the LL gradient
//! reweighted by `p_y / (1 − p_y)`.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Token, TokenDataset};

pub const DEFAULT_CLAMP_EPS: f64 = 1e-12;

pub fn logsumexp(h: &[f64]) -> f64 {
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + h.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(h: &[f64]) -> Vec<f64> {
    let lse = logsumexp(h);
    h.iter().map(|v| v - lse).collect()
}

pub fn softmax(h: &[f64]) -> Vec<f64> {
    log_softmax(h).into_iter().map(f64::exp).collect()
}

/// Shannon entropy of `softmax(h)` in nats.
pub fn entropy(h: &[f64]) -> f64 {
    log_softmax(h).iter().map(|lp| -lp.exp() * lp).sum()
}

/// `log softmax(h)_y`
pub fn ll_value(h: &[f64], y: Token) -> f64 {
    log_softmax(h)[y as usize]
}

/// Exact logit gradient of [`ll_value`]: `e_y − softmax(h)`.
///
/// Component `y` is `1 − p_y`, summed over the other classes so that it keeps
/// full relative precision when `p_y` is close to 1.
pub fn ll_grad(h: &[f64], y: Token) -> Vec<f64> {
    let y = y as usize;
    let mut g: Vec<f64> = softmax(h).into_iter().map(|p| -p).collect();
    g[y] = -g
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, v)| v)
        .sum::<f64>();
    g
}

/// `log(1 − p_y)` via the complementary log-mass, floored at `log(clamp_eps)`.
/// Returns `(value, clamped)`.
fn log_unlikelihood(h: &[f64], y: Token, clamp_eps: f64) -> (f64, bool) {
    let y = y as usize;
    let others: Vec<f64> = h
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &v)| v)
        .collect();
    let log_rest = logsumexp(&others) - logsumexp(h);
    let floor = clamp_eps.ln();
    if log_rest < floor {
        (floor, true)
    } else {
        (log_rest, false)
    }
}

/// `−log(1 − p_y)` with `p_y` clamped to at most `1 − clamp_eps`.
pub fn nlul_value(h: &[f64], y: Token, clamp_eps: f64) -> f64 {
    -log_unlikelihood(h, y, clamp_eps).0
}

/// The reweighting factor `p_y / (1 − p_y)` (clamped).
pub fn nlul_weight(h: &[f64], y: Token, clamp_eps: f64) -> f64 {
    let (log_rest, clamped) = log_unlikelihood(h, y, clamp_eps);
    if clamped {
        (1.0 - clamp_eps) / clamp_eps
    } else {
        (log_softmax(h)[y as usize] - log_rest).exp()
    }
}

/// `(p_y / (1 − p_y)) · ∇ℓ_LL`.
pub fn nlul_grad(h: &[f64], y: Token, clamp_eps: f64) -> Vec<f64> {
    let w = nlul_weight(h, y, clamp_eps);
    ll_grad(h, y).into_iter().map(|g| w * g).collect()
}

/// `KL(softmax(h) ‖ softmax(teacher))`
pub fn it_value(h: &[f64], teacher: &[f64]) -> f64 {
    let lp = log_softmax(h);
    let lq = log_softmax(teacher);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Logit gradient of [`it_value`]: `p ⊙ (log p − log q − KL)`.
pub fn it_grad(h: &[f64], teacher: &[f64]) -> Vec<f64> {
    let lp = log_softmax(h);
    let lq = log_softmax(teacher);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b - kl))
        .collect()
}

/// `log σ(x)` computed without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// NPO value and sequence weight `π_θ^β / (π_θ^β + π_base^β)` from the two
/// sequence log-probabilities.
pub(crate) fn npo_value_and_weight(logprob: f64, base_logprob: f64, beta: f64) -> (f64, f64) {
    let log_ratio = logprob - base_logprob;
    let value = -(2.0 / beta) * log_sigmoid(-beta * log_ratio);
    (value, sigmoid(beta * log_ratio))
}

/// `−(2/β) log σ(−β log(π_θ(s)/π_base(s)))` for one sequence.
pub fn npo_value(
    spec: &ModelSpec,
    seq: &[Token],
    theta: &[f64],
    base: &[f64],
    beta: f64,
) -> Result<f64> {
    let lp = spec.sequence_logprob(theta, seq)?;
    let base_lp = spec.sequence_logprob(base, seq)?;
    Ok(npo_value_and_weight(lp, base_lp, beta).0)
}

/// Sequence weight `π_θ(s)^β / (π_θ(s)^β + π_base(s)^β)`.
///
/// The parameter gradient of the NPO loss is `2·w·∇ log π_θ(s)`.
pub fn npo_weight(
    spec: &ModelSpec,
    seq: &[Token],
    theta: &[f64],
    base: &[f64],
    beta: f64,
) -> Result<f64> {
    let lp = spec.sequence_logprob(theta, seq)?;
    let base_lp = spec.sequence_logprob(base, seq)?;
    Ok(npo_value_and_weight(lp, base_lp, beta).1)
}

/// Where incompetent-teacher logits come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherLogits {
    /// All-zero logits: the uniform distribution.
    Uniform,
    Fixed {
        spec: ModelSpec,
        theta: Arc<[f64]>,
    },
}

impl TeacherLogits {
    pub fn logits(&self, context: &[Token], vocab_size: usize) -> Result<Vec<f64>> {
        match self {
            TeacherLogits::Uniform => Ok(vec![0.0; vocab_size]),
            TeacherLogits::Fixed { spec, theta } => {
                if spec.vocab_size != vocab_size {
                    return Err(Error::Dimension(format!(
                        "teacher vocabulary {} differs from model vocabulary {vocab_size}",
                        spec.vocab_size
                    )));
                }
                spec.logits(theta, context)
            }
        }
    }
}

/// Serialized teacher reference: `"uniform"` or a path to a parameter dump.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum TeacherSource {
    #[default]
    Uniform,
    Path(PathBuf),
}

impl From<String> for TeacherSource {
    fn from(s: String) -> Self {
        if s == "uniform" {
            TeacherSource::Uniform
        } else {
            TeacherSource::Path(s.into())
        }
    }
}

impl From<TeacherSource> for String {
    fn from(t: TeacherSource) -> String {
        match t {
            TeacherSource::Uniform => "uniform".into(),
            TeacherSource::Path(p) => p.to_string_lossy().into_owned(),
        }
    }
}

fn default_clamp_eps() -> f64 {
    DEFAULT_CLAMP_EPS
}

/// Serializable loss selection, e.g. `{"loss": "npo", "beta": 0.1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "lowercase")]
pub enum LossKind {
    Nll,
    Ll,
    Npo {
        beta: f64,
    },
    It {
        #[serde(default)]
        teacher: TeacherSource,
    },
    Nlul {
        #[serde(default = "default_clamp_eps")]
        clamp_eps: f64,
    },
}

impl LossKind {
    pub fn nlul() -> Self {
        LossKind::Nlul {
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Nll => "nll",
            LossKind::Ll => "ll",
            LossKind::Npo { .. } => "npo",
            LossKind::It { .. } => "it",
            LossKind::Nlul { .. } => "nlul",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Npo { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(Error::config("beta", "must be a positive real"))
            }
            LossKind::Nlul { clamp_eps } if !(clamp_eps > 0.0 && clamp_eps < 1e-3) => {
                Err(Error::config("clamp_eps", "must lie in (0, 1e-3)"))
            }
            _ => Ok(()),
        }
    }

    /// Binds run-time state: NPO's base model and the IT teacher.
    pub fn bind(&self, base: &[f64], teacher: Option<TeacherLogits>) -> Result<Loss> {
        self.validate()?;
        Ok(match *self {
            LossKind::Nll => Loss::Nll,
            LossKind::Ll => Loss::Ll,
            LossKind::Nlul { clamp_eps } => Loss::Nlul { clamp_eps },
            LossKind::Npo { beta } => Loss::Npo {
                beta,
                base: base.into(),
            },
            LossKind::It {
                teacher: ref source,
            } => match (source, teacher) {
                (TeacherSource::Uniform, _) => Loss::It {
                    teacher: TeacherLogits::Uniform,
                },
                (TeacherSource::Path(_), Some(t)) => Loss::It { teacher: t },
                (TeacherSource::Path(p), None) => {
                    return Err(Error::config(
                        "teacher",
                        format!("teacher parameters from {} were not loaded", p.display()),
                    ))
                }
            },
        })
    }
}

/// A loss bound to everything it needs at evaluation time.
#[derive(Clone, Debug, PartialEq)]
pub enum Loss {
    Nll,
    Ll,
    Nlul { clamp_eps: f64 },
    Npo { beta: f64, base: Arc<[f64]> },
    It { teacher: TeacherLogits },
}

impl Loss {
    pub fn nlul() -> Self {
        Loss::Nlul {
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    pub fn is_sequence_level(&self) -> bool {
        matches!(self, Loss::Npo { .. })
    }

    /// Per-pair value and logit gradient. NPO is sequence-level and is
    /// rejected here.
    pub fn token_value_and_grad(
        &self,
        h: &[f64],
        y: Token,
        context: &[Token],
    ) -> Result<(f64, Vec<f64>)> {
        Ok(match self {
            Loss::Nll => (
                -ll_value(h, y),
                ll_grad(h, y).into_iter().map(|g| -g).collect(),
            ),
            Loss::Ll => (ll_value(h, y), ll_grad(h, y)),
            Loss::Nlul { clamp_eps } => (nlul_value(h, y, *clamp_eps), nlul_grad(h, y, *clamp_eps)),
            Loss::It { teacher } => {
                let t = teacher.logits(context, h.len())?;
                (it_value(h, &t), it_grad(h, &t))
            }
            Loss::Npo { .. } => {
                return Err(Error::InvalidInput(
                    "NPO is defined per sequence, not per token".into(),
                ))
            }
        })
    }

    pub fn token_value(&self, h: &[f64], y: Token, context: &[Token]) -> Result<f64> {
        Ok(match self {
            Loss::Nll => -ll_value(h, y),
            Loss::Ll => ll_value(h, y),
            Loss::Nlul { clamp_eps } => nlul_value(h, y, *clamp_eps),
            Loss::It { teacher } => it_value(h, &teacher.logits(context, h.len())?),
            Loss::Npo { .. } => return self.token_value_and_grad(h, y, context).map(|r| r.0),
        })
    }
}

/// Batch-mean loss: over (context, next) pairs, or over sequences for NPO.
pub fn batch_loss(
    loss: &Loss,
    spec: &ModelSpec,
    theta: &[f64],
    batch: &TokenDataset,
) -> Result<f64> {
    if let Loss::Npo { beta, base } = loss {
        let seqs = batch.sequences();
        if seqs.is_empty() {
            return Err(Error::InvalidInput(
                "NPO needs a non-empty batch of sequences".into(),
            ));
        }
        let mut total = 0.0;
        for seq in seqs {
            total += npo_value(spec, seq, theta, base, *beta)?;
        }
        return Ok(total / seqs.len() as f64);
    }
    if batch.is_empty() {
        return Err(Error::InvalidInput("batch is empty".into()));
    }
    let mut total = 0.0;
    for pair in batch.pairs() {
        let h = spec.logits(theta, &pair.context)?;
        spec.check_token(pair.next)?;
        total += loss.token_value(&h, pair.next, &pair.context)?;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{distance, norm};
    use crate::model::{DatasetRole, Pair};
    use proptest::prelude::*;

    fn fd_logits(f: impl Fn(&[f64]) -> f64, h: &[f64]) -> Vec<f64> {
        let step = 1e-5;
        let mut p = h.to_vec();
        (0..h.len())
            .map(|i| {
                p[i] = h[i] + step;
                let fp = f(&p);
                p[i] = h[i] - step;
                let fm = f(&p);
                p[i] = h[i];
                (fp - fm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn ll_examples() {
        assert!((ll_value(&[0.0, 0.0], 0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(ll_value(&[30.0, 0.0], 0).abs() < 1e-10);
        let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let direct = (e[2] / (e[0] + e[1] + e[2])).ln();
        assert!((ll_value(&[1.0, 2.0, 3.0], 2) - direct).abs() < 1e-14);
    }

    #[test]
    fn nlul_examples() {
        assert!((nlul_value(&[0.0, 0.0], 0, DEFAULT_CLAMP_EPS) - 2f64.ln()).abs() < 1e-15);
        // Fully memorized: 1 − p underflows past the clamp.
        let v = nlul_value(&[200.0, 0.0], 0, DEFAULT_CLAMP_EPS);
        assert!((v + DEFAULT_CLAMP_EPS.ln()).abs() < 1e-12 && v.is_finite());
        // h = (0, −20): 1 − p_0 = e^{−20}/(1 + e^{−20}), so the value is 20 + log1p(e^{−20}).
        let v = nlul_value(&[0.0, -20.0], 0, DEFAULT_CLAMP_EPS);
        assert!((v - (20.0 + (-20f64).exp().ln_1p())).abs() < 1e-12);
        // At a gap of 30 the complementary mass e^{−30} is below the clamp.
        let v = nlul_value(&[0.0, -30.0], 0, DEFAULT_CLAMP_EPS);
        assert!((v + DEFAULT_CLAMP_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn nlul_grad_examples() {
        let h = [0.0, 0.0];
        assert_eq!(nlul_grad(&h, 0, DEFAULT_CLAMP_EPS), ll_grad(&h, 0));
        let g = nlul_grad(&[-40.0, 0.0, 0.0], 0, DEFAULT_CLAMP_EPS);
        assert!(norm(&g) < 1e-16);
    }

    #[test]
    fn it_examples() {
        assert!(it_value(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]).abs() < 1e-15);
        assert!(it_value(&[0.0, 0.0], &[0.0, 0.0]).abs() < 1e-15);
        let p = softmax(&[2.0, 0.0]);
        let want = p[0] * (p[0] / 0.5).ln() + p[1] * (p[1] / 0.5).ln();
        assert!((it_value(&[2.0, 0.0], &[0.0, 0.0]) - want).abs() < 1e-14);
    }

    #[test]
    fn npo_examples() {
        let spec = ModelSpec::bigram(3);
        let base = spec.init_params(5);
        let seq = [0u32, 2, 1, 1];
        for beta in [0.1, 1.0, 3.0] {
            let v = npo_value(&spec, &seq, &base, &base, beta).unwrap();
            assert!((v - 2.0 / beta * 2f64.ln()).abs() < 1e-12);
            assert_eq!(npo_weight(&spec, &seq, &base, &base, beta).unwrap(), 0.5);
        }
        // Push π_θ(s) far below π_base(s).
        let mut theta = base.clone();
        for v in theta.iter_mut() {
            *v = 0.0;
        }
        theta[2] = -60.0;
        theta[2 * 3 + 1] = -60.0;
        let v = npo_value(&spec, &seq, &theta, &base, 1.0).unwrap();
        assert!(v > 0.0 && v < 1e-30);
    }

    #[test]
    fn batch_loss_examples() {
        let spec = ModelSpec::mlp(4, 2, 3);
        let theta = spec.init_params(8);
        let loss = Loss::nlul();
        let a = Pair {
            context: vec![1, 2],
            next: 3,
        };
        let b = Pair {
            context: vec![0],
            next: 1,
        };
        let single = TokenDataset::from_pairs(vec![a.clone()], DatasetRole::Forget);
        let dup = TokenDataset::from_pairs(vec![a.clone(), a.clone()], DatasetRole::Forget);
        let both = TokenDataset::from_pairs(vec![a.clone(), b.clone()], DatasetRole::Forget);
        let va = batch_loss(&loss, &spec, &theta, &single).unwrap();
        let direct = nlul_value(&spec.logits(&theta, &[1, 2]).unwrap(), 3, DEFAULT_CLAMP_EPS);
        assert_eq!(va, direct);
        assert_eq!(batch_loss(&loss, &spec, &theta, &dup).unwrap(), va);
        let vb = batch_loss(
            &loss,
            &spec,
            &theta,
            &TokenDataset::from_pairs(vec![b], DatasetRole::Forget),
        )
        .unwrap();
        assert!((batch_loss(&loss, &spec, &theta, &both).unwrap() - 0.5 * (va + vb)).abs() < 1e-15);
        let empty = TokenDataset::from_pairs(vec![], DatasetRole::Forget);
        assert!(batch_loss(&loss, &spec, &theta, &empty).is_err());
    }

    #[test]
    fn loss_kind_serialization() {
        let k: LossKind = serde_json::from_str(r#"{"loss": "nlul"}"#).unwrap();
        assert_eq!(k, LossKind::nlul());
        let k: LossKind = serde_json::from_str(r#"{"loss": "npo", "beta": 0.5}"#).unwrap();
        assert_eq!(k, LossKind::Npo { beta: 0.5 });
        let k: LossKind = serde_json::from_str(r#"{"loss": "it", "teacher": "uniform"}"#).unwrap();
        assert_eq!(
            k,
            LossKind::It {
                teacher: TeacherSource::Uniform
            }
        );
        let k: LossKind =
            serde_json::from_str(r#"{"loss": "it", "teacher": "t/params.bin"}"#).unwrap();
        assert_eq!(
            k,
            LossKind::It {
                teacher: TeacherSource::Path("t/params.bin".into())
            }
        );
        assert!(serde_json::from_str::<LossKind>(r#"{"loss": "dpo"}"#).is_err());
        assert!(LossKind::Npo { beta: -1.0 }.validate().is_err());
        assert!(LossKind::Nlul { clamp_eps: 0.1 }.validate().is_err());
    }

    #[test]
    fn saturation_contrast() {
        // ‖nlul_grad‖ rises toward a finite limit, so the strict comparison is
        // only meaningful while p_y stays well away from the clamp.
        let mut prev: Option<(f64, f64, f64)> = None;
        for k in 0..30 {
            let h = [k as f64 * 0.5, 0.3, -0.2];
            let v = nlul_value(&h, 0, DEFAULT_CLAMP_EPS);
            let ll = norm(&ll_grad(&h, 0));
            let nl = norm(&nlul_grad(&h, 0, DEFAULT_CLAMP_EPS));
            if let Some((pv, pll, pnl)) = prev {
                assert!(v > pv);
                assert!(ll < pll);
                assert!(nl > pnl);
            }
            prev = Some((v, ll, nl));
        }
        assert!(prev.unwrap().1 < 1e-5);
        assert!(norm(&ll_grad(&[40.0, 0.3, -0.2], 0)) < 1e-16);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nlul_weight_identity(h in prop::collection::vec(-8.0f64..8.0, 2..7), y in 0usize..7) {
            let y = (y % h.len()) as Token;
            let probs = softmax(&h);
            let p = probs[y as usize];
            let rest: f64 = probs.iter().enumerate().filter(|&(i, _)| i != y as usize).map(|(_, q)| q).sum();
            let want: Vec<f64> = ll_grad(&h, y).iter().map(|g| g * p / rest).collect();
            prop_assert!(distance(&nlul_grad(&h, y, DEFAULT_CLAMP_EPS), &want) <= 1e-10);
        }

        #[test]
        fn nlul_grad_matches_finite_differences(h in prop::collection::vec(-4.0f64..4.0, 2..6), y in 0usize..6) {
            let y = (y % h.len()) as Token;
            let fd = fd_logits(|x| nlul_value(x, y, DEFAULT_CLAMP_EPS), &h);
            prop_assert!(distance(&nlul_grad(&h, y, DEFAULT_CLAMP_EPS), &fd) <= 1e-6);
        }

        #[test]
        fn it_grad_matches_finite_differences(
            h in prop::collection::vec(-4.0f64..4.0, 4),
            t in prop::collection::vec(-4.0f64..4.0, 4),
        ) {
            let fd = fd_logits(|x| it_value(x, &t), &h);
            prop_assert!(distance(&it_grad(&h, &t), &fd) <= 1e-6);
            prop_assert!(it_value(&h, &t) >= -1e-15);
        }

        #[test]
        fn uniform_teacher_is_mismatch_loss(h in prop::collection::vec(-10.0f64..10.0, 2..9)) {
            let v = h.len() as f64;
            let want = v.ln() - entropy(&h);
            prop_assert!((it_value(&h, &vec![0.0; h.len()]) - want).abs() <= 1e-10);
        }
    }
}
