//! Densities, the reparameterized sampler and the flow ELBO.
//!
//! Per example the objective is
//!
//! ```text
//! ln p(x | z_T) − β · ( ln q(z_0 | x) − ln p(z_T) − Σ_t ln |det ∂f_t/∂z_{t−1}| )
//! ```
//!
//! with a single noise draw per example. The KL block is a one-sample Monte
//! Carlo estimate for every flow kind, and `β` scales the whole block,
//! log-determinants included.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flows::{apply_flow, FlowParams};
use crate::nn::{Likelihood, Model};
use crate::tensor_ad::{Tape, Tensor, Var};

/// `ln(2π)`
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `z0 = μ + exp(½ logσ²) ⊙ ε`
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    for v in [logvar, eps] {
        if tape.shape(v) != tape.shape(mu) {
            return Err(Error::shape("reparameterize", tape.shape(mu), tape.shape(v)));
        }
    }
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// `Σ_m −½ (ln 2π + z_m²)` per row.
pub fn log_normal_std(tape: &mut Tape, z: Var) -> Result<Var> {
    let sq = tape.square(z)?;
    let t = tape.add_scalar(sq, LN_2PI)?;
    let t = tape.scale(t, -0.5)?;
    tape.sum(t, Some(1))
}

/// `Σ_m −½ (ln 2π + logσ²_m + (z_m − μ_m)² / σ²_m)` per row.
pub fn log_normal_diag(tape: &mut Tape, z: Var, mu: Var, logvar: Var) -> Result<Var> {
    let diff = tape.sub(z, mu)?;
    let sq = tape.square(diff)?;
    let neg = tape.neg(logvar)?;
    let inv_var = tape.exp(neg)?;
    let maha = tape.mul(sq, inv_var)?;
    let t = tape.add(maha, logvar)?;
    let t = tape.add_scalar(t, LN_2PI)?;
    let t = tape.scale(t, -0.5)?;
    tape.sum(t, Some(1))
}

/// `Σ_d x ln p + (1 − x) ln(1 − p)` per row; `x` must be exactly binary.
pub fn log_bernoulli(tape: &mut Tape, x: Var, p: Var) -> Result<Var> {
    if let Some(bad) = tape.value(x).data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("Bernoulli observation {bad} is not 0 or 1")));
    }
    let log_p = tape.log(p)?;
    let one_minus_p = tape.neg(p)?;
    let one_minus_p = tape.add_scalar(one_minus_p, 1.0)?;
    let log_q = tape.log(one_minus_p)?;
    let one_minus_x = tape.neg(x)?;
    let one_minus_x = tape.add_scalar(one_minus_x, 1.0)?;
    let a = tape.mul(x, log_p)?;
    let b = tape.mul(one_minus_x, log_q)?;
    let s = tape.add(a, b)?;
    tape.sum(s, Some(1))
}

/// Diagonal Gaussian observation density over pixels.
pub fn log_gaussian_obs(tape: &mut Tape, x: Var, mean: Var, logvar: Var) -> Result<Var> {
    log_normal_diag(tape, x, mean, logvar)
}

/// Linear warm-up `min(1, epoch / warmup_epochs)`; always 1 without warm-up.
pub fn warmup_beta(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / warmup_epochs as f64).min(1.0)
    }
}

/// Standard-normal noise `[batch, latent]`, row-major draw order.
pub fn sample_noise(rng: &mut impl Rng, batch: usize, latent: usize) -> Tensor {
    let data = (0..batch * latent).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(&[batch, latent], data).expect("positive batch and latent")
}

/// Batch means of the ELBO terms, in nats per example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub recon_ll: f64,
    /// `ln q(z_0|x) − ln p(z_T)`
    pub kl_mc: f64,
    pub log_det_sum: f64,
    pub beta: f64,
    /// `recon_ll − beta · (kl_mc − log_det_sum)`
    pub elbo: f64,
}

impl ElboBreakdown {
    /// The unannealed bound `recon_ll − kl_mc + log_det_sum`.
    pub fn bound(&self) -> f64 {
        self.recon_ll - self.kl_mc + self.log_det_sum
    }
}

/// Handles to the per-example ELBO terms on a tape.
#[derive(Clone, Debug)]
pub struct ElboGraph {
    pub recon: Var,
    pub log_q: Var,
    pub log_p: Var,
    pub log_det: Var,
    /// Annealed per-example objective `[B]`.
    pub objective: Var,
    /// `−mean(objective)`, the scalar to minimize.
    pub loss: Var,
    pub beta: f64,
    pub posterior: crate::nn::PosteriorParams,
}

impl ElboGraph {
    pub fn breakdown(&self, tape: &Tape) -> ElboBreakdown {
        let mean = |v: Var| {
            let d = tape.value(v).data();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let recon_ll = mean(self.recon);
        let kl_mc = mean(self.log_q) - mean(self.log_p);
        let log_det_sum = mean(self.log_det);
        ElboBreakdown {
            recon_ll,
            kl_mc,
            log_det_sum,
            beta: self.beta,
            elbo: -tape.value(self.loss).data()[0],
        }
    }

    /// Per-example bound at β = 1.
    pub fn bound_per_example(&self, tape: &Tape) -> Vec<f64> {
        let r = tape.value(self.recon).data();
        let q = tape.value(self.log_q).data();
        let p = tape.value(self.log_p).data();
        let d = tape.value(self.log_det).data();
        (0..r.len()).map(|i| r[i] - (q[i] - p[i] - d[i])).collect()
    }

    /// Gating weights of a ccLinIAF posterior, `[B, K]` rows.
    pub fn gate_weights(&self, tape: &mut Tape) -> Result<Option<Tensor>> {
        match self.posterior.flow {
            FlowParams::CcLinIaf { logits, .. } => {
                let y = tape.softmax(logits)?;
                Ok(Some(tape.value(y).clone()))
            }
            _ => Ok(None),
        }
    }
}

/// Builds the flow ELBO for the batch `x` with explicit noise `eps`.
pub fn elbo_graph(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    x: &Tensor,
    eps: &Tensor,
    beta: f64,
) -> Result<ElboGraph> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid("elbo", format!("beta {beta} outside [0, 1]")));
    }
    let spec = model.spec();
    let (batch, _) = x.dims2()?;
    if eps.shape() != [batch, spec.latent] {
        return Err(Error::shape("elbo", eps.shape(), &[batch, spec.latent]));
    }
    let xv = tape.constant(x.clone());
    let ev = tape.constant(eps.clone());

    let posterior = model.encode(tape, params, xv)?;
    let z0 = reparameterize(tape, posterior.mu, posterior.logvar, ev)?;
    let flow = apply_flow(tape, spec.flow, z0, &posterior.flow)?;
    let obs = model.decode(tape, params, flow.z)?;

    let recon = match (spec.likelihood, obs.logvar) {
        (Likelihood::Bernoulli, _) => log_bernoulli(tape, xv, obs.mean)?,
        (Likelihood::Gaussian, Some(lv)) => log_gaussian_obs(tape, xv, obs.mean, lv)?,
        (Likelihood::Gaussian, None) => unreachable!("gaussian decoder always has a log-variance head"),
    };
    let log_q = log_normal_diag(tape, z0, posterior.mu, posterior.logvar)?;
    let log_p = log_normal_std(tape, flow.z)?;

    let kl = tape.sub(log_q, log_p)?;
    let block = tape.sub(kl, flow.log_det)?;
    let block = tape.scale(block, beta)?;
    let objective = tape.sub(recon, block)?;
    let mean = tape.mean(objective, None)?;
    let loss = tape.neg(mean)?;

    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Divergence {
            batch: 0,
            detail: format!("non-finite objective {value}"),
        });
    }
    Ok(ElboGraph {
        recon,
        log_q,
        log_p,
        log_det: flow.log_det,
        objective,
        loss,
        beta,
        posterior,
    })
}

/// Forward-only ELBO of a batch with one fresh noise draw per example.
pub fn elbo(x: &Tensor, model: &Model, beta: f64, rng: &mut impl Rng) -> Result<ElboBreakdown> {
    let (batch, _) = x.dims2()?;
    let eps = sample_noise(rng, batch, model.spec().latent);
    let mut tape = Tape::new();
    let params = model.bind_frozen(&mut tape);
    let graph = elbo_graph(&mut tape, model, &params, x, &eps, beta)?;
    Ok(graph.breakdown(&tape))
}

/// Forward-only per-example bound (β = 1).
pub fn elbo_per_example(x: &Tensor, model: &Model, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let (batch, _) = x.dims2()?;
    let eps = sample_noise(rng, batch, model.spec().latent);
    let mut tape = Tape::new();
    let params = model.bind_frozen(&mut tape);
    let graph = elbo_graph(&mut tape, model, &params, x, &eps, 1.0)?;
    Ok(graph.bound_per_example(&tape))
}
