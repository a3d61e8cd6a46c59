//! Monte Carlo gradients of the batch cost and the training loop.

use std::fmt::Write as _;

use crate::dynamics::{accumulate, prepare_batch, sampled_expected_cost, CostEstimate, LoopMode, PreparedPath, ProblemSpec};
use crate::error::{Error, Result};
use crate::noise::{FbmSampler, TimeGrid};
use crate::policy::{DeepOptions, Policy, PolicyKind};

use super::adam::{adam_step, AdamConfig, AdamState};

/// Training paths are drawn from indices at or above this offset, so they
/// never coincide with test paths, which start at 0.
pub const TRAIN_OFFSET: usize = 1 << 32;

/// Batch cost estimate and its exact gradient in the policy parameters.
pub fn grad_batch_cost(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    paths: &[PreparedPath],
    policy: &Policy,
    mode: LoopMode,
) -> Result<(CostEstimate, Vec<f64>)> {
    if paths.is_empty() {
        return Err(Error::Domain("gradient of an empty batch".into()));
    }
    let acc = accumulate(problem, grid.coarse(), paths, policy, mode, true)?;
    let grad = acc.mean_grad();
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "gradient entry {i} is not finite ({})",
            describe_param(policy, i)
        )));
    }
    Ok((acc.estimate(), grad))
}

fn describe_param(policy: &Policy, i: usize) -> String {
    match policy.kind() {
        PolicyKind::Linear => {
            let per = policy.input_len();
            format!("control {}, coefficient {}", i / per + 1, i % per)
        }
        PolicyKind::Deep => format!("network parameter {i}"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hurst: f64,
    pub horizon: f64,
    pub n_steps: usize,
    /// Fine sub-steps per coarse step used for signatures.
    pub refine: usize,
    pub kind: PolicyKind,
    pub level: usize,
    pub mode: LoopMode,
    pub hidden: Option<usize>,
    pub adam: AdamConfig,
    pub iterations: usize,
    pub batch_size: usize,
    /// Fixed training pool size; `None` resamples every iteration.
    pub train_paths: Option<usize>,
    pub test_paths: usize,
    /// Evaluate on the first `eval_paths` test paths every `eval_every` iterations (0 = never).
    pub eval_every: usize,
    pub eval_paths: usize,
    pub seed: u64,
    /// Abort when a batch cost exceeds this multiple of `max(1, |initial cost|)`.
    pub divergence_factor: f64,
}

impl TrainConfig {
    pub fn new(kind: PolicyKind) -> Self {
        let lr = match kind {
            PolicyKind::Linear => 1e-2,
            PolicyKind::Deep => 1e-3,
        };
        Self {
            hurst: 0.5,
            horizon: 1.0,
            n_steps: 100,
            refine: 1,
            kind,
            level: 3,
            mode: LoopMode::Open,
            hidden: None,
            adam: AdamConfig::with_lr(lr),
            iterations: 2000,
            batch_size: 1 << 10,
            train_paths: None,
            test_paths: 1 << 14,
            eval_every: 100,
            eval_paths: 1 << 10,
            seed: 0,
            divergence_factor: 1e6,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.n_steps, self.refine)
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.level == 0 || self.batch_size == 0 || self.test_paths == 0 {
            return Err(Error::Config("level, batch size and test paths must be at least 1".into()));
        }
        if self.train_paths == Some(0) {
            return Err(Error::Config("training pool must hold at least one path".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence factor must exceed 1".into()));
        }
        Ok(())
    }

    /// The policy the training loop starts from.
    pub fn initial_policy(&self, problem: &ProblemSpec) -> Result<Policy> {
        let sys = problem.system();
        let dim = match self.mode {
            LoopMode::Open => sys.driver_dim() + 1,
            LoopMode::Closed => sys.state_dim() + 1,
        };
        match self.kind {
            PolicyKind::Linear => Policy::linear(dim, self.level, sys.control_dim()),
            PolicyKind::Deep => Policy::deep(
                dim,
                self.level,
                sys.control_dim(),
                &DeepOptions {
                    hidden: self.hidden,
                    seed: self.seed,
                    ..DeepOptions::default()
                },
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub batch_cost: f64,
    pub test_cost: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    pub test: CostEstimate,
}

/// Columns `iteration, batch_cost, test_cost` (empty where no checkpoint was taken).
pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("iteration,batch_cost,test_cost\n");
    for p in curve {
        let _ = write!(s, "{},{}", p.iteration, p.batch_cost);
        match p.test_cost {
            Some(t) => {
                let _ = writeln!(s, ",{t}");
            }
            None => s.push_str(",\n"),
        }
    }
    s
}

/// Train `policy` on sampled fBM drivers with Adam and evaluate it on a
/// disjoint test set.
pub fn train(problem: &ProblemSpec, config: &TrainConfig, policy: Policy) -> Result<TrainReport> {
    config.validate()?;
    let grid = config.grid()?;
    let sampler = FbmSampler::new(config.hurst, grid.fine(), config.seed)?;
    let mode = config.mode;
    let mut policy = policy;
    let pool = match config.train_paths {
        Some(n) => {
            let batch = sampler.sample_paths(n, TRAIN_OFFSET)?;
            Some(prepare_batch(problem, &grid, &batch, &policy, mode)?)
        }
        None => None,
    };
    let mut adam = AdamState::new(config.adam, policy.num_params());
    let mut curve = Vec::with_capacity(config.iterations);
    let mut scale: Option<f64> = None;
    let mut params = policy.params().to_vec();
    let mut scratch = Vec::new();
    for it in 0..config.iterations {
        let paths: &[PreparedPath] = match &pool {
            Some(pool) => {
                scratch.clear();
                let n = pool.len();
                let b = config.batch_size.min(n);
                let start = (it * b) % n;
                if start + b <= n {
                    &pool[start..start + b]
                } else {
                    scratch.extend_from_slice(&pool[start..]);
                    scratch.extend_from_slice(&pool[..b - (n - start)]);
                    &scratch
                }
            }
            None => {
                let first = TRAIN_OFFSET + it * config.batch_size;
                let batch = sampler.sample_paths(config.batch_size, first)?;
                scratch = prepare_batch(problem, &grid, &batch, &policy, mode)?;
                &scratch
            }
        };
        let (est, grad) = grad_batch_cost(problem, &grid, paths, &policy, mode)?;
        let limit = config.divergence_factor * *scale.get_or_insert(est.mean.abs().max(1.0));
        if !est.mean.is_finite() || est.mean.abs() > limit {
            return Err(Error::Training(format!(
                "diverged at iteration {it}: batch cost {} (limit {limit:.3e}, parameter norm {:.3e})",
                est.mean,
                params.iter().map(|p| p * p).sum::<f64>().sqrt()
            )));
        }
        adam_step(&mut adam, &mut params, &grad)?;
        policy.set_params(&params)?;
        let checkpoint = config.eval_every > 0 && (it + 1) % config.eval_every == 0;
        let test_cost = if checkpoint {
            let n = config.eval_paths.min(config.test_paths);
            Some(sampled_expected_cost(problem, &grid, &sampler, n, 0, &policy, mode)?.mean)
        } else {
            None
        };
        curve.push(CurvePoint {
            iteration: it,
            batch_cost: est.mean,
            test_cost,
        });
    }
    let test = sampled_expected_cost(problem, &grid, &sampler, config.test_paths, 0, &policy, mode)?;
    Ok(TrainReport { policy, curve, test })
}
