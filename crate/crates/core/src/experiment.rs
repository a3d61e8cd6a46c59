//! Experiment runs producing result tables.

use std::fmt::Write as _;

use crate::benchmark::twap;
use crate::config::{ExperimentConfig, ProblemKind};
use crate::dynamics::{sampled_expected_cost, LoopMode};
use crate::error::{Error, Result};
use crate::linearize::{build_objective, expanded_level, expected_signature, solve_linearized, Interpolation};
use crate::noise::{FbmSampler, TimeGrid};
use crate::optim::{train, CurvePoint, TRAIN_OFFSET};
use crate::policy::Policy;

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub problem: ProblemKind,
    pub method: &'static str,
    pub hurst: f64,
    pub policy: String,
    pub level: usize,
    pub cost_mean: f64,
    pub cost_se: f64,
    /// Relative improvement over TWAP in percent (execution only).
    pub improvement: Option<(f64, f64)>,
    /// Value of the deterministic objective (linearized rows only).
    pub objective: Option<f64>,
    pub seed: u64,
    pub dt: f64,
    pub train_paths: usize,
    pub test_paths: usize,
}

pub const HEADER: &str = "problem,method,hurst,policy,level,cost_mean,cost_se,improvement_pct,improvement_se,objective,seed,dt,train_paths,test_paths";

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        let (imp, imp_se) = match r.improvement {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (String::new(), String::new()),
        };
        let obj = r.objective.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{imp},{imp_se},{obj},{},{},{},{}",
            r.problem, r.method, r.hurst, r.policy, r.level, r.cost_mean, r.cost_se, r.seed, r.dt, r.train_paths, r.test_paths
        );
    }
    s
}

/// Improvement over TWAP in percent, with its standard error, from a cost estimate.
pub fn improvement_over_twap(cfg: &ExperimentConfig, cost_mean: f64, cost_se: f64) -> Result<(f64, f64)> {
    let p = cfg.execution();
    let (_, j) = twap(p.q0, p.x0, p.kappa, p.kappa_terminal, cfg.horizon)?;
    Ok(((-cost_mean - j) / j * 100.0, cost_se / j.abs() * 100.0))
}

/// One trained `(H, N)` cell.
#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub hurst: f64,
    pub level: usize,
    pub curve: Vec<CurvePoint>,
    pub policy: Policy,
}

/// Train every `(H, N)` cell of the config; one result row per cell.
pub fn run(cfg: &ExperimentConfig) -> Result<(Vec<ResultRow>, Vec<TrainedCell>)> {
    cfg.validate()?;
    let problem = cfg.problem_spec()?;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &h in &cfg.hurst {
        for &n in &cfg.level {
            let tc = cfg.train_config(h, n);
            let start = tc.initial_policy(&problem)?;
            let report = train(&problem, &tc, start)?;
            let improvement = match cfg.problem {
                ProblemKind::Execution => Some(improvement_over_twap(cfg, report.test.mean, report.test.std_error)?),
                ProblemKind::Tracking => None,
            };
            rows.push(ResultRow {
                problem: cfg.problem,
                method: "trained",
                hurst: h,
                policy: cfg.policy.to_string(),
                level: n,
                cost_mean: report.test.mean,
                cost_se: report.test.std_error,
                improvement,
                objective: None,
                seed: cfg.seed,
                dt: cfg.dt,
                train_paths: cfg.train_paths,
                test_paths: cfg.test_paths,
            });
            cells.push(TrainedCell {
                hurst: h,
                level: n,
                curve: report.curve,
                policy: report.policy,
            });
        }
    }
    Ok((rows, cells))
}

/// Linearized execution benchmark: the expected signature is estimated from
/// `train_paths` paths and the minimizer is evaluated by simulation on the test set.
pub fn run_linearized(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    if cfg.problem != ProblemKind::Execution {
        return Err(Error::Config("the linearized solver applies to the execution problem".into()));
    }
    let problem = cfg.problem_spec()?;
    let grid = TimeGrid::uniform(cfg.horizon, cfg.n_steps(), cfg.refine)?;
    let mut rows = Vec::new();
    for &h in &cfg.hurst {
        let sampler = FbmSampler::new(h, grid.fine(), cfg.seed)?;
        let batch = sampler.sample_paths(cfg.train_paths, TRAIN_OFFSET)?;
        let top = cfg.level.iter().copied().max().unwrap_or(1);
        let esig = expected_signature(&grid, &batch, expanded_level(top), Interpolation::TimeFirst)?;
        for &n in &cfg.level {
            let obj = build_objective(&cfg.execution(), n, &esig.with_level(expanded_level(n)))?;
            let sol = solve_linearized(&obj)?;
            let policy = sol.policy(n)?;
            let test = sampled_expected_cost(&problem, &grid, &sampler, cfg.test_paths, 0, &policy, LoopMode::Open)?;
            rows.push(ResultRow {
                problem: ProblemKind::Execution,
                method: "linearized",
                hurst: h,
                policy: "linear".into(),
                level: n,
                cost_mean: test.mean,
                cost_se: test.std_error,
                improvement: Some(improvement_over_twap(cfg, test.mean, test.std_error)?),
                objective: Some(sol.value),
                seed: cfg.seed,
                dt: cfg.dt,
                train_paths: cfg.train_paths,
                test_paths: cfg.test_paths,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(problem: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "problem = {problem}\nhurst = 0.5\nlevel = 1\ndt = 0.1\ntrain_paths = 64\ntest_paths = 128\n\
             batch_size = 32\niterations = 5\neval_every = 0\nseed = 7\n"
        ))
        .unwrap()
    }

    #[test]
    fn rows_carry_provenance_and_are_reproducible() {
        let cfg = small("execution");
        let (a, cells) = run(&cfg).unwrap();
        let (b, _) = run(&cfg).unwrap();
        let csv = rows_to_csv(&a);
        assert_eq!(csv, rows_to_csv(&b));
        assert_eq!(cells[0].curve.len(), 5);
        assert_eq!(cells[0].policy.level(), 1);
        let line = csv.lines().nth(1).unwrap();
        assert!(line.starts_with("execution,trained,0.5,linear,1,"));
        assert!(line.ends_with(",7,0.1,64,128"), "{line}");
        assert_eq!(line.split(',').count(), HEADER.split(',').count());
    }

    #[test]
    fn tracking_rows_have_no_improvement() {
        let (rows, _) = run(&small("tracking")).unwrap();
        assert!(rows[0].improvement.is_none());
        assert!(rows_to_csv(&rows).lines().nth(1).unwrap().contains(",,,"));
    }

    #[test]
    fn linearized_rows() {
        let rows = run_linearized(&small("execution")).unwrap();
        assert_eq!(rows[0].method, "linearized");
        assert!(rows[0].objective.is_some());
        assert!(run_linearized(&small("tracking")).is_err());
    }
}
