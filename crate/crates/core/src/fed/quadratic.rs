//! Heterogeneous quadratic sites: site `s` minimizes `0.5 |theta - a_s|^2`,
//! so the sample-weighted optimum is the weighted mean of the `a_s`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{
    run_round, ClientState, GlobalState, HyperParams, LocalObjective, LocalOptimizer, Named, Result,
};
use crate::model::ParamSet;
use crate::tensor::Tensor;

pub const QUAD_PARAM: &str = "head.theta";

#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub target: Vec<f64>,
    pub samples: usize,
}

impl LocalObjective for QuadraticObjective {
    fn num_samples(&self) -> usize {
        self.samples
    }

    fn minibatch(
        &mut self,
        params: &mut ParamSet,
        _batch: &[usize],
        _rng: &mut dyn RngCore,
    ) -> Result<(f64, Named)> {
        let theta = params.require(QUAD_PARAM)?;
        let g: Vec<f64> = theta
            .data()
            .iter()
            .zip(&self.target)
            .map(|(t, a)| t - a)
            .collect();
        let loss = 0.5 * g.iter().map(|v| v * v).sum::<f64>();
        let mut out = Named::new();
        out.insert(
            QUAD_PARAM.to_string(),
            Tensor::new(theta.shape().to_vec(), g)?,
        );
        Ok((loss, out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticSetup {
    pub samples: Vec<usize>,
    pub dim: usize,
    pub seed: u64,
}

impl Default for QuadraticSetup {
    fn default() -> Self {
        Self {
            samples: vec![16, 48, 112],
            dim: 8,
            seed: 7,
        }
    }
}

impl QuadraticSetup {
    /// SGD settings for the benchmark: `E = 2`, `B = 16`, `lr = 0.1`.
    pub fn hyper_params(&self, control_variates: bool) -> HyperParams {
        HyperParams {
            local_epochs: 2,
            batch_size: 16,
            lr: 0.1,
            mu: 0.01,
            clip: 1.0,
            optimizer: LocalOptimizer::Sgd,
            control_variates,
            clients_per_round: self.samples.len(),
            seed: self.seed,
            ..HyperParams::default()
        }
    }

    pub fn targets(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.samples
            .iter()
            .map(|_| {
                (0..self.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect()
    }

    pub fn optimum(&self) -> Vec<f64> {
        let n: usize = self.samples.iter().sum();
        let mut opt = vec![0.0; self.dim];
        for (a, &w) in self.targets().iter().zip(&self.samples) {
            for (o, v) in opt.iter_mut().zip(a) {
                *o += w as f64 / n as f64 * v;
            }
        }
        opt
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadraticRun {
    /// Distance to the optimum after each round.
    pub distances: Vec<f64>,
    /// First round (1-based) at which the distance fell below the tolerance.
    pub rounds_to_tol: Option<usize>,
}

/// Runs up to `max_rounds` full-participation rounds from `theta = 0`.
pub fn quadratic_benchmark(
    setup: &QuadraticSetup,
    hp: &HyperParams,
    max_rounds: usize,
    tol: f64,
) -> Result<QuadraticRun> {
    let mut theta = ParamSet::new();
    theta.insert(QUAD_PARAM, Tensor::zeros(&[setup.dim]));
    let total: usize = setup.samples.iter().sum();
    let mut state = GlobalState::new(theta.clone(), total as u64)?;
    let mut clients = setup
        .targets()
        .into_iter()
        .zip(&setup.samples)
        .enumerate()
        .map(|(i, (target, &samples))| {
            ClientState::new(i as u32, QuadraticObjective { target, samples }, &theta)
        })
        .collect::<Result<Vec<_>>>()?;
    let opt = setup.optimum();
    let mut distances = Vec::with_capacity(max_rounds);
    let mut rounds_to_tol = None;
    for r in 0..max_rounds {
        run_round(&mut state, &mut clients, hp, false)?;
        let d = state
            .theta
            .require(QUAD_PARAM)?
            .data()
            .iter()
            .zip(&opt)
            .map(|(t, o)| (t - o) * (t - o))
            .sum::<f64>()
            .sqrt();
        distances.push(d);
        if d < tol && rounds_to_tol.is_none() {
            rounds_to_tol = Some(r + 1);
        }
    }
    Ok(QuadraticRun {
        distances,
        rounds_to_tol,
    })
}
