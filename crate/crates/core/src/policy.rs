//! Softmax-linear stochastic policies with exact log-probabilities and an
//! analytic score function.
//!
//! `theta` is a `feature_dim x vocab_size` matrix stored row-major by
//! feature, so `logit[a] = sum_f state[f] * theta[f * vocab_size + a]`.
//! All probabilities are handled in log space.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::record::Reader;
use crate::trajectory::{PolicyParams, Role, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLinearPolicy {
    pub params: PolicyParams,
    pub feature_dim: usize,
    pub vocab_size: usize,
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl SoftmaxLinearPolicy {
    pub fn new(params: PolicyParams, feature_dim: usize, vocab_size: usize) -> Result<Self> {
        if params.theta.len() != feature_dim * vocab_size {
            return Err(Error::contract(format!(
                "theta has {} entries, expected {feature_dim} x {vocab_size}",
                params.theta.len()
            )));
        }
        params.validate()?;
        Ok(SoftmaxLinearPolicy {
            params,
            feature_dim,
            vocab_size,
        })
    }

    pub fn zeros(role: Role, feature_dim: usize, vocab_size: usize) -> Self {
        SoftmaxLinearPolicy {
            params: PolicyParams::zeros(role, feature_dim * vocab_size),
            feature_dim,
            vocab_size,
        }
    }

    pub fn role(&self) -> Role {
        self.params.role
    }

    pub fn with_params(&self, params: PolicyParams) -> Result<Self> {
        Self::new(params, self.feature_dim, self.vocab_size)
    }

    fn logits(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.feature_dim {
            return Err(Error::contract(format!(
                "state has {} features, policy expects {}",
                state.len(),
                self.feature_dim
            )));
        }
        let v = self.vocab_size;
        let mut logits = vec![0.0; v];
        for (f, &x) in state.iter().enumerate() {
            // observations are mostly one-hot
            if x == 0.0 {
                continue;
            }
            let row = &self.params.theta[f * v..(f + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += x * w;
            }
        }
        Ok(logits)
    }

    /// Log-probability of every action in `state`.
    pub fn action_logprobs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut logits = self.logits(state)?;
        let z = logsumexp(&logits);
        for l in &mut logits {
            *l -= z;
        }
        Ok(logits)
    }

    /// Draws an action by inverting the cumulative distribution.
    pub fn sample_action(&self, state: &[f64], rng: &mut impl Rng) -> Result<(usize, f64)> {
        let lps = self.action_logprobs(state)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last_live = 0;
        for (a, &lp) in lps.iter().enumerate() {
            let p = lp.exp();
            if p > 0.0 {
                last_live = a;
            }
            acc += p;
            if u < acc {
                return Ok((a, lp));
            }
        }
        // rounding left the total just under 1
        Ok((last_live, lps[last_live]))
    }

    fn check_role(&self, t: &Trajectory) -> Result<()> {
        if t.role != self.params.role {
            return Err(Error::contract(format!(
                "{} trajectory scored by {} policy",
                t.role, self.params.role
            )));
        }
        Ok(())
    }

    fn check_action(&self, a: u32) -> Result<usize> {
        let a = a as usize;
        if a >= self.vocab_size {
            return Err(Error::contract(format!(
                "action {a} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(a)
    }

    /// Log-likelihood of the trajectory's action sequence.
    pub fn sequence_logprob(&self, t: &Trajectory) -> Result<f64> {
        self.check_role(t)?;
        let mut total = 0.0;
        for step in &t.steps {
            let a = self.check_action(step.action)?;
            total += self.action_logprobs(&step.state)?[a];
        }
        Ok(total)
    }

    /// Gradient of [`Self::sequence_logprob`] with respect to `theta`.
    pub fn grad_sequence_logprob(&self, t: &Trajectory) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.theta.len()];
        self.accumulate_grad(t, 1.0, &mut g)?;
        Ok(g)
    }

    /// Adds `scale * grad log pi(t)` into `out` and returns `log pi(t)`.
    pub fn accumulate_grad(&self, t: &Trajectory, scale: f64, out: &mut [f64]) -> Result<f64> {
        self.check_role(t)?;
        if out.len() != self.params.theta.len() {
            return Err(Error::contract("gradient buffer has the wrong length"));
        }
        let v = self.vocab_size;
        let mut total = 0.0;
        let mut coef = vec![0.0; v];
        for step in &t.steps {
            let a = self.check_action(step.action)?;
            let lps = self.action_logprobs(&step.state)?;
            total += lps[a];
            // d log pi(a|s) / d theta[f, b] = s_f * (1[a = b] - pi(b|s))
            for (c, lp) in coef.iter_mut().zip(&lps) {
                *c = -lp.exp();
            }
            coef[a] += 1.0;
            for (f, &x) in step.state.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let row = &mut out[f * v..(f + 1) * v];
                let sx = scale * x;
                for (o, c) in row.iter_mut().zip(&coef) {
                    *o += sx * c;
                }
            }
        }
        Ok(total)
    }

    /// Checkpoint layout, little-endian: role u8, version u64,
    /// feature_dim u32, vocab_size u32, then `theta` as f64.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(17 + 8 * self.params.theta.len());
        buf.push(self.params.role.as_byte());
        buf.extend_from_slice(&self.params.version.to_le_bytes());
        buf.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        for x in &self.params.theta {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let role_byte = r.u8()?;
        let role = Role::from_byte(role_byte)
            .ok_or_else(|| Error::Decode(format!("unknown role byte {role_byte}")))?;
        let version = r.u64()?;
        let feature_dim = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let theta = (0..feature_dim * vocab_size)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::new(
            PolicyParams {
                role,
                theta,
                version,
            },
            feature_dim,
            vocab_size,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&bytes)
    }
}
