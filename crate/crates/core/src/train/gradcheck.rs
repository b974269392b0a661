use rand::Rng;

use crate::error::Result;
use crate::flows::FlowKind;
use crate::nn::{Likelihood, Model, ModelSpec};
use crate::rng::stream_rng;
use crate::tensor_ad::{grad_check, GradCheckReport, Tensor, DEFAULT_STEP};
use crate::vae::{elbo_graph, sample_noise};

/// Failure threshold on the max relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Toy model dimensions for the full-ELBO gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckDims {
    pub data_dim: usize,
    pub latent: usize,
    pub hidden: usize,
    pub batch: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        GradCheckDims {
            data_dim: 6,
            latent: 4,
            hidden: 8,
            batch: 2,
        }
    }
}

/// One representative of every flow kind.
pub fn all_flow_kinds() -> Vec<FlowKind> {
    vec![
        FlowKind::None,
        FlowKind::Householder { steps: 2 },
        FlowKind::Planar { steps: 2 },
        FlowKind::LinIaf,
        FlowKind::CcLinIaf { components: 2 },
        FlowKind::CcLinIaf { components: 5 },
    ]
}

/// Finite-difference check of the β = 1 ELBO loss with respect to every
/// parameter of a freshly initialized model.
pub fn gradcheck_elbo(flow: FlowKind, dims: GradCheckDims, seed: u64) -> Result<GradCheckReport> {
    let spec = ModelSpec {
        data_dim: dims.data_dim,
        latent: dims.latent,
        hidden: dims.hidden,
        flow,
        likelihood: Likelihood::Bernoulli,
    };
    let model = Model::new(spec, seed)?;
    let mut rng = stream_rng(seed, 0, 0);
    let x: Vec<f64> = (0..dims.batch * dims.data_dim)
        .map(|_| f64::from(u8::from(rng.gen_bool(0.5))))
        .collect();
    let x = Tensor::new(&[dims.batch, dims.data_dim], x)?;
    let eps = sample_noise(&mut rng, dims.batch, dims.latent);
    grad_check(
        |tape, vars| Ok(elbo_graph(tape, &model, vars, &x, &eps, 1.0)?.loss),
        model.params().tensors(),
        DEFAULT_STEP,
    )
}
