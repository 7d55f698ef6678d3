//! Small differentiable next-token logit models.
//!
//! Two model kinds are provided:
//!
//! - **bigram-softmax**: a `V×V` table; the logits for a context are the row
//!   indexed by the context's last token. Logits are linear in the parameters.
//! - **mlp-1hidden**: the last `context_len` tokens are one-hot encoded and
//!   concatenated (left-padded with zero slots for short contexts), passed
//!   through one `tanh` hidden layer and a linear readout.
//!
//! Both expose exact parameter gradients (manual backprop) and exact logit
//! Jacobians, which is what dense Gauss-Newton assembly needs.

mod dataset;

use std::ops::{Deref, DerefMut, Range};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{DatasetRole, Pair, TokenDataset};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::loss::{log_softmax, Loss};

pub type Token = u32;

/// Pairs per reduction chunk. Fixed so that the summation order, and hence
/// every floating-point result, does not depend on the thread count.
const REDUCE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "bigram-softmax", alias = "bigram")]
    Bigram,
    #[serde(rename = "mlp-1hidden", alias = "mlp")]
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub vocab_size: usize,
    #[serde(default = "default_context_len")]
    pub context_len: usize,
    #[serde(default)]
    pub hidden_dim: usize,
}

fn default_context_len() -> usize {
    1
}

/// A named coordinate range inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: &'static str,
    pub range: Range<usize>,
}

impl ModelSpec {
    pub fn bigram(vocab_size: usize) -> Self {
        Self {
            kind: ModelKind::Bigram,
            vocab_size,
            context_len: 1,
            hidden_dim: 0,
        }
    }

    pub fn mlp(vocab_size: usize, context_len: usize, hidden_dim: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            vocab_size,
            context_len,
            hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if self.context_len == 0 {
            return Err(Error::config("context_len", "must be positive"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::config(
                "hidden_dim",
                "must be positive for the mlp model",
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let v = self.vocab_size;
        match self.kind {
            ModelKind::Bigram => v * v,
            ModelKind::Mlp => {
                let h = self.hidden_dim;
                h * self.context_len * v + h + v * h + v
            }
        }
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let v = self.vocab_size;
        match self.kind {
            ModelKind::Bigram => vec![ParamBlock {
                name: "table",
                range: 0..v * v,
            }],
            ModelKind::Mlp => {
                let h = self.hidden_dim;
                let w1 = h * self.context_len * v;
                let sizes = [("w1", w1), ("b1", h), ("w2", v * h), ("b2", v)];
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&(name, len)| {
                        let block = ParamBlock {
                            name,
                            range: start..start + len,
                        };
                        start += len;
                        block
                    })
                    .collect()
            }
        }
    }

    pub(crate) fn check_token(&self, token: Token) -> Result<()> {
        if (token as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(Error::TokenOutOfVocab {
                token,
                vocab_size: self.vocab_size,
            })
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "model has {} parameters, got a vector of length {}",
                self.param_count(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// Offsets of the first-layer columns activated by `context`.
    fn active_columns(&self, context: &[Token]) -> Result<Vec<usize>> {
        if context.is_empty() {
            return Err(Error::InvalidInput(
                "context must contain at least one token".into(),
            ));
        }
        for &tok in context {
            self.check_token(tok)?;
        }
        let c = self.context_len;
        let v = self.vocab_size;
        let tail = &context[context.len().saturating_sub(c)..];
        let pad = c - tail.len();
        Ok(tail
            .iter()
            .enumerate()
            .map(|(k, &tok)| (pad + k) * v + tok as usize)
            .collect())
    }

    fn forward(&self, theta: &[f64], context: &[Token]) -> Result<Forward> {
        self.check_theta(theta)?;
        let v = self.vocab_size;
        match self.kind {
            ModelKind::Bigram => {
                let last = *context.last().ok_or_else(|| {
                    Error::InvalidInput("context must contain at least one token".into())
                })?;
                for &tok in context {
                    self.check_token(tok)?;
                }
                let row = last as usize;
                Ok(Forward {
                    logits: theta[row * v..(row + 1) * v].to_vec(),
                    hidden: Vec::new(),
                    columns: vec![row],
                })
            }
            ModelKind::Mlp => {
                let columns = self.active_columns(context)?;
                let h = self.hidden_dim;
                let width = self.context_len * v;
                let (w1, rest) = theta.split_at(h * width);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(v * h);
                let hidden: Vec<f64> = (0..h)
                    .map(|m| {
                        let row = &w1[m * width..(m + 1) * width];
                        (b1[m] + columns.iter().map(|&col| row[col]).sum::<f64>()).tanh()
                    })
                    .collect();
                let logits = (0..v)
                    .map(|j| b2[j] + crate::linalg::dot(&w2[j * h..(j + 1) * h], &hidden))
                    .collect();
                Ok(Forward {
                    logits,
                    hidden,
                    columns,
                })
            }
        }
    }

    /// Accumulates `scale · J · dlogits` into `grad`, where `J` is the
    /// `dim(θ)×V` logit Jacobian at the forward point.
    fn backward(
        &self,
        theta: &[f64],
        fwd: &Forward,
        dlogits: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let v = self.vocab_size;
        match self.kind {
            ModelKind::Bigram => {
                let row = fwd.columns[0];
                axpy(scale, dlogits, &mut grad[row * v..(row + 1) * v]);
            }
            ModelKind::Mlp => {
                let h = self.hidden_dim;
                let width = self.context_len * v;
                let w2_off = h * width + h;
                let b2_off = w2_off + v * h;
                let w2 = &theta[w2_off..b2_off];
                let mut dhidden = vec![0.0; h];
                for j in 0..v {
                    let d = scale * dlogits[j];
                    if d == 0.0 {
                        continue;
                    }
                    grad[b2_off + j] += d;
                    axpy(
                        d,
                        &fwd.hidden,
                        &mut grad[w2_off + j * h..w2_off + (j + 1) * h],
                    );
                    axpy(d, &w2[j * h..(j + 1) * h], &mut dhidden);
                }
                for m in 0..h {
                    let a = fwd.hidden[m];
                    let dz = dhidden[m] * (1.0 - a * a);
                    grad[h * width + m] += dz;
                    for &col in &fwd.columns {
                        grad[m * width + col] += dz;
                    }
                }
            }
        }
    }

    /// Logits `h(x; θ)` for one context.
    pub fn logits(&self, theta: &[f64], context: &[Token]) -> Result<Vec<f64>> {
        Ok(self.forward(theta, context)?.logits)
    }

    /// Exact logit Jacobian, `dim(θ) × V`, entry `(i, j) = ∂h_j/∂θ_i`.
    pub fn logit_jacobian(&self, theta: &[f64], context: &[Token]) -> Result<Matrix> {
        let fwd = self.forward(theta, context)?;
        let v = self.vocab_size;
        let dim = self.param_count();
        let mut jac = Matrix::zeros(dim, v);
        let mut col = vec![0.0; dim];
        let mut unit = vec![0.0; v];
        for j in 0..v {
            col.iter_mut().for_each(|c| *c = 0.0);
            unit[j] = 1.0;
            self.backward(theta, &fwd, &unit, 1.0, &mut col);
            unit[j] = 0.0;
            for (i, &c) in col.iter().enumerate() {
                if c != 0.0 {
                    jac[(i, j)] = c;
                }
            }
        }
        Ok(jac)
    }

    /// Vector-Jacobian product `J · dlogits` at one context.
    pub fn logit_vjp(&self, theta: &[f64], context: &[Token], dlogits: &[f64]) -> Result<Vec<f64>> {
        let fwd = self.forward(theta, context)?;
        if dlogits.len() != self.vocab_size {
            return Err(Error::Dimension(
                "logit cotangent must have length V".into(),
            ));
        }
        let mut grad = vec![0.0; self.param_count()];
        self.backward(theta, &fwd, dlogits, 1.0, &mut grad);
        Ok(grad)
    }

    /// `Σ_t log softmax(h(s_<t))_{s_t}` over positions `t ≥ 1`.
    pub fn sequence_logprob(&self, theta: &[f64], seq: &[Token]) -> Result<f64> {
        if seq.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "sequence of length {} has no next-token positions",
                seq.len()
            )));
        }
        let mut total = 0.0;
        for t in 1..seq.len() {
            let start = t.saturating_sub(self.context_len);
            let h = self.logits(theta, &seq[start..t])?;
            self.check_token(seq[t])?;
            total += log_softmax(&h)[seq[t] as usize];
        }
        Ok(total)
    }

    /// Gradient of [`Self::sequence_logprob`], accumulated with `scale`.
    pub(crate) fn sequence_logprob_grad(
        &self,
        theta: &[f64],
        seq: &[Token],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        if seq.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "sequence of length {} has no next-token positions",
                seq.len()
            )));
        }
        let mut total = 0.0;
        for t in 1..seq.len() {
            let start = t.saturating_sub(self.context_len);
            let fwd = self.forward(theta, &seq[start..t])?;
            let y = seq[t];
            self.check_token(y)?;
            let logp = log_softmax(&fwd.logits);
            total += logp[y as usize];
            let dl = crate::loss::ll_grad(&fwd.logits, y);
            self.backward(theta, &fwd, &dl, scale, grad);
        }
        Ok(total)
    }

    /// Parameters drawn uniformly from `(−0.1, 0.1)`.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..self.param_count())
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        ParamVector::from_parts(coords, self.layout())
    }
}

struct Forward {
    logits: Vec<f64>,
    hidden: Vec<f64>,
    /// Bigram: the active table row. MLP: active first-layer columns.
    columns: Vec<usize>,
}

/// Flat parameter vector with a named block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    coords: Vec<f64>,
    layout: Arc<[ParamBlock]>,
}

impl ParamVector {
    pub fn new(spec: &ModelSpec, coords: Vec<f64>) -> Result<Self> {
        spec.check_theta(&coords)?;
        Ok(Self::from_parts(coords, spec.layout()))
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self::from_parts(vec![0.0; spec.param_count()], spec.layout())
    }

    fn from_parts(coords: Vec<f64>, layout: Vec<ParamBlock>) -> Self {
        Self {
            coords,
            layout: layout.into(),
        }
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.coords[b.range.clone()])
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.coords
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }
}

/// Sums `f` over `items` in fixed-size chunks, reducing chunk partials in
/// index order. `f` returns a scalar and accumulates a gradient.
pub(crate) fn reduce_chunks<T, F>(items: &[T], dim: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> Result<f64> + Sync,
{
    let run = |chunk: &[T]| -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; dim];
        let mut value = 0.0;
        for item in chunk {
            value += f(item, &mut grad)?;
        }
        Ok((value, grad))
    };
    let partials: Vec<Result<(f64, Vec<f64>)>> = if items.len() > REDUCE_CHUNK {
        items.par_chunks(REDUCE_CHUNK).map(run).collect()
    } else {
        items.chunks(REDUCE_CHUNK).map(run).collect()
    };
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for partial in partials {
        let (v, g) = partial?;
        total += v;
        axpy(1.0, &g, &mut grad);
    }
    Ok((total, grad))
}

/// Batch-mean loss and its exact gradient with respect to `θ`.
///
/// Pair losses average over (context, next) pairs; NPO averages over the
/// batch's sequences.
pub fn loss_and_grad(
    spec: &ModelSpec,
    theta: &[f64],
    batch: &TokenDataset,
    loss: &Loss,
) -> Result<(f64, Vec<f64>)> {
    spec.check_theta(theta)?;
    let dim = spec.param_count();
    if let Loss::Npo { beta, base } = loss {
        let seqs = batch.sequences();
        if seqs.is_empty() {
            return Err(Error::InvalidInput("NPO needs a batch of sequences".into()));
        }
        let beta = *beta;
        let (total, grad) = reduce_chunks(seqs, dim, |seq, grad| {
            let base_lp = spec.sequence_logprob(base, seq)?;
            // The weight depends on logπ_θ(s), so accumulate ∇logπ_θ into a
            // scratch buffer first.
            let mut scratch = vec![0.0; dim];
            let lp = spec.sequence_logprob_grad(theta, seq, 1.0, &mut scratch)?;
            let (value, weight) = crate::loss::npo_value_and_weight(lp, base_lp, beta);
            axpy(2.0 * weight, &scratch, grad);
            Ok(value)
        })?;
        let n = seqs.len() as f64;
        return Ok((total / n, grad.iter().map(|g| g / n).collect()));
    }
    let pairs = batch.pairs();
    if pairs.is_empty() {
        return Err(Error::InvalidInput("batch is empty".into()));
    }
    let (total, grad) = reduce_chunks(pairs, dim, |pair, grad| {
        let fwd = spec.forward(theta, &pair.context)?;
        spec.check_token(pair.next)?;
        let (value, dlogits) = loss.token_value_and_grad(&fwd.logits, pair.next, &pair.context)?;
        spec.backward(theta, &fwd, &dlogits, 1.0, grad);
        Ok(value)
    })?;
    let n = pairs.len() as f64;
    Ok((total / n, grad.iter().map(|g| g / n).collect()))
}

/// Exact gradient of the batch-mean loss.
pub fn grad_loss(
    spec: &ModelSpec,
    theta: &[f64],
    batch: &TokenDataset,
    loss: &Loss,
) -> Result<Vec<f64>> {
    Ok(loss_and_grad(spec, theta, batch, loss)?.1)
}

/// Accumulates `scale · J(x)·dlogits` for every pair, where `dlogits` comes
/// from `f(context, logits)`; used by the divergences.
pub(crate) fn reduce_logit_terms<F>(
    spec: &ModelSpec,
    theta: &[f64],
    pairs: &[Pair],
    f: F,
) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&Pair, &[f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    spec.check_theta(theta)?;
    reduce_chunks(pairs, spec.param_count(), |pair, grad| {
        let fwd = spec.forward(theta, &pair.context)?;
        let (value, dlogits) = f(pair, &fwd.logits)?;
        spec.backward(theta, &fwd, &dlogits, 1.0, grad);
        Ok(value)
    })
}
