//! Expected-signature reformulation of the execution problem.
//!
//! With `X = x0 + σ⟨e1, S⟩` and a linear control `U_t = ⟨ℓ, S_t⟩` over the
//! time-augmented driver signature `S` (letter 0 is time), every term of the
//! execution cost is a linear functional of `S_T`:
//!
//! ```text
//! ∫ U dt       = ⟨ℓ·0, S_T⟩
//! ∫ U² dt      = ⟨(ℓ ш ℓ)·0, S_T⟩
//! ∫ X U dt     = x0⟨ℓ·0, S_T⟩ + σ⟨(1 ш ℓ)·0, S_T⟩
//! Q_T X_T      = q0 x0 + q0σ⟨1, S_T⟩ − x0⟨ℓ·0, S_T⟩ − σ⟨(ℓ·0) ш 1, S_T⟩
//! Q_T²         = q0² − 2q0⟨ℓ·0, S_T⟩ + ⟨(ℓ·0) ш (ℓ·0), S_T⟩
//! ```
//!
//! where `·0` appends the time letter. The expected cost is therefore a quadratic
//! form in the coefficients of `ℓ` whose entries are read off `E[S_T]` up to
//! level `2N + 2`, the length of `(ℓ·0) ш (ℓ·0)` for `ℓ` of level `N`.
//!
//! The identities hold path by path for any continuous interpolation of the
//! sampled driver, but only [`Interpolation::TimeFirst`] turns the `dt`
//! integrals into the left-point sums used by the simulator. With straight-line
//! interpolation a rough driver adds a `⅓ ΔX ΔU` term per step to `∫ X U dt`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::dynamics::{ExecutionProblem, CHUNK};
use crate::error::{Error, Result};
use crate::noise::{DriverBatch, TimeGrid};
use crate::policy::Policy;
use crate::signature::stream_signatures;
use crate::tensor::{decode_word, total_len, TruncatedTensor};

/// How the sampled driver is joined up between grid points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// Straight lines in `(t, ξ)`.
    Linear,
    /// Each step first advances time with `ξ` frozen, then moves `ξ`. Integrals
    /// against `dt` then reduce to left-point sums, as in the simulation scheme.
    #[default]
    TimeFirst,
}

/// Sample mean of terminal signatures of the time-augmented driver paths.
pub fn expected_signature(
    grid: &TimeGrid,
    batch: &DriverBatch,
    level: usize,
    interpolation: Interpolation,
) -> Result<TruncatedTensor> {
    if batch.n_paths() == 0 {
        return Err(Error::Domain("expected signature of an empty batch".into()));
    }
    let times = grid.fine();
    if batch.times() != times {
        return Err(Error::Grid("driver batch is not sampled on the fine grid".into()));
    }
    let ends = [times[0], *times.last().expect("grid is nonempty")];
    let terminal = |x: &[f64]| -> Result<TruncatedTensor> {
        match interpolation {
            Interpolation::Linear => Ok(stream_signatures(times, x, 1, &ends, level)?.terminal().clone()),
            Interpolation::TimeFirst => {
                let mut s = TruncatedTensor::one(2, level);
                for k in 1..times.len() {
                    s.mul_exp_increment(&[times[k] - times[k - 1], 0.0]);
                    s.mul_exp_increment(&[0.0, x[k] - x[k - 1]]);
                }
                Ok(s)
            }
        }
    };
    let sums: Vec<Result<Vec<f64>>> = (0..batch.n_paths())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; total_len(2, level)];
            for &i in chunk {
                let s = terminal(batch.path(i))?;
                for (a, b) in acc.iter_mut().zip(s.coeffs()) {
                    *a += b;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; total_len(2, level)];
    for part in sums {
        for (a, b) in total.iter_mut().zip(part?) {
            *a += b;
        }
    }
    let n = batch.n_paths() as f64;
    TruncatedTensor::from_coeffs(2, level, total.into_iter().map(|v| v / n).collect())
}

/// `J(ℓ) = ℓᵀ Q ℓ + cᵀ ℓ + r` over the coefficients of a level-`N` functional.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticObjective {
    pub level: usize,
    pub expanded_level: usize,
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub r: f64,
}

/// Level of `E[S_T]` needed for policies of level `n`.
pub fn expanded_level(n: usize) -> usize {
    2 * n + 2
}

/// `⟨(a ш b)·suffix, s⟩` without materializing the shuffle.
fn shuffle_pair(a: &[usize], b: &[usize], suffix: &[usize], s: &TruncatedTensor) -> f64 {
    fn go(a: &[usize], b: &[usize], prefix: usize, suffix: &[usize], dim: usize, level: &[f64]) -> f64 {
        match (a.split_first(), b.split_first()) {
            (None, None) => level[suffix.iter().fold(prefix, |acc, &l| acc * dim + l)],
            (Some((&x, rest)), None) => go(rest, b, prefix * dim + x, suffix, dim, level),
            (None, Some((&y, rest))) => go(a, rest, prefix * dim + y, suffix, dim, level),
            (Some((&x, ra)), Some((&y, rb))) => {
                go(ra, b, prefix * dim + x, suffix, dim, level) + go(a, rb, prefix * dim + y, suffix, dim, level)
            }
        }
    }
    go(a, b, 0, suffix, s.dim(), s.level_slice(a.len() + b.len() + suffix.len()))
}

fn with_time(w: &[usize]) -> Vec<usize> {
    let mut v = w.to_vec();
    v.push(0);
    v
}

/// Assemble the quadratic objective of the execution cost for level-`level` policies.
pub fn build_objective(problem: &ExecutionProblem, level: usize, esig: &TruncatedTensor) -> Result<QuadraticObjective> {
    let need = expanded_level(level);
    if esig.dim() != 2 || esig.level() < need {
        return Err(Error::Shape(format!(
            "need a dim-2 expected signature of level {need}, got dim {} level {}",
            esig.dim(),
            esig.level()
        )));
    }
    let ExecutionProblem {
        q0,
        x0,
        kappa,
        kappa_terminal: kt,
        sigma,
    } = *problem;
    let n = total_len(2, level);
    let words: Vec<Vec<usize>> = (0..=level)
        .flat_map(|k| (0..1usize << k).map(move |i| decode_word(2, k, i)))
        .collect();
    let one = [1usize];
    let mut c = DVector::zeros(n);
    for (i, w) in words.iter().enumerate() {
        let wt = with_time(w);
        let a = esig.get(&wt)?;
        let b = shuffle_pair(&one, w, &[0], esig);
        let d = shuffle_pair(&wt, &one, &[], esig);
        c[i] = sigma * (d - b) - 2.0 * kt * q0 * a;
    }
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (u, v) = (&words[i], &words[j]);
            let run = shuffle_pair(u, v, &[0], esig);
            let term = shuffle_pair(&with_time(u), &with_time(v), &[], esig);
            let val = kappa * run + kt * term;
            q[(i, j)] = val;
            q[(j, i)] = val;
        }
    }
    let r = -q0 * x0 - q0 * sigma * esig.get(&one)? + kt * q0 * q0;
    Ok(QuadraticObjective {
        level,
        expanded_level: need,
        q,
        c,
        r,
    })
}

impl QuadraticObjective {
    pub fn value(&self, ell: &[f64]) -> Result<f64> {
        if ell.len() != self.c.len() {
            return Err(Error::Shape(format!("expected {} coefficients, got {}", self.c.len(), ell.len())));
        }
        let l = DVector::from_column_slice(ell);
        Ok((l.transpose() * &self.q * &l)[(0, 0)] + self.c.dot(&l) + self.r)
    }

    pub fn gradient(&self, ell: &[f64]) -> DVector<f64> {
        let l = DVector::from_column_slice(ell);
        &self.q * &l * 2.0 + &self.c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedSolution {
    pub coeffs: Vec<f64>,
    pub value: f64,
    pub min_eigenvalue: f64,
}

impl LinearizedSolution {
    /// The minimizer as a single-control linear policy over `(t, ξ)`.
    pub fn policy(&self, level: usize) -> Result<Policy> {
        Policy::from_functionals(&[TruncatedTensor::from_coeffs(2, level, self.coeffs.clone())?])
    }
}

/// Minimize the quadratic by solving `(Q + λI) ℓ = −c/2` with a small ridge
/// `λ = 1e-10 · tr(Q)/n`.
pub fn solve_linearized(obj: &QuadraticObjective) -> Result<LinearizedSolution> {
    let n = obj.c.len();
    let eig = SymmetricEigen::new(obj.q.clone());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max().max(0.0);
    if min < -1e-9 * max.max(1e-300) {
        return Err(Error::Numeric(format!(
            "quadratic objective is indefinite: smallest eigenvalue {min:.3e} (largest {max:.3e})"
        )));
    }
    let lambda = 1e-10 * obj.q.trace() / n as f64;
    let mut a = obj.q.clone();
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let chol = Cholesky::new(a).ok_or_else(|| Error::Numeric("regularized objective is not positive definite".into()))?;
    let ell = chol.solve(&(-&obj.c * 0.5));
    let coeffs: Vec<f64> = ell.iter().copied().collect();
    let value = obj.value(&coeffs)?;
    Ok(LinearizedSolution {
        coeffs,
        value,
        min_eigenvalue: min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::twap;
    use crate::noise::FbmSampler;
    use crate::tensor::shuffle;

    fn batch(h: f64, n: usize, paths: usize) -> (TimeGrid, DriverBatch) {
        let grid = TimeGrid::uniform(1.0, n, 1).unwrap();
        let s = FbmSampler::new(h, grid.fine(), 11).unwrap();
        let b = s.sample_paths(paths, 0).unwrap();
        (grid, b)
    }

    #[test]
    fn expected_signature_time_words() {
        let (grid, b) = batch(0.5, 20, 200);
        let e = expected_signature(&grid, &b, 3, Interpolation::TimeFirst).unwrap();
        assert!((e.get(&[0]).unwrap() - 1.0).abs() < 1e-14);
        assert!((e.get(&[0, 0]).unwrap() - 0.5).abs() < 1e-14);
        assert!((e.get(&[0, 0, 0]).unwrap() - 1.0 / 6.0).abs() < 1e-14);
        let xs: Vec<f64> = b.paths().map(|p| p[20]).collect();
        let sd = (xs.iter().map(|x| x * x).sum::<f64>() / 200.0).sqrt();
        assert!(e.get(&[1]).unwrap().abs() < 3.0 * sd / 200f64.sqrt());
    }

    #[test]
    fn interpolations_agree_on_single_letter_words() {
        let (grid, b) = batch(0.25, 15, 20);
        let lin = expected_signature(&grid, &b, 3, Interpolation::Linear).unwrap();
        let tf = expected_signature(&grid, &b, 3, Interpolation::TimeFirst).unwrap();
        for w in [vec![0], vec![1], vec![0, 0], vec![1, 1], vec![1, 1, 1]] {
            assert!((lin.get(&w).unwrap() - tf.get(&w).unwrap()).abs() < 1e-13, "{w:?}");
        }
        // ∫ t dξ is a right-point sum on the time-first path
        let right: f64 = b
            .paths()
            .map(|p| (1..=15).map(|k| k as f64 / 15.0 * (p[k] - p[k - 1])).sum::<f64>())
            .sum::<f64>()
            / 20.0;
        assert!((tf.get(&[0, 1]).unwrap() - right).abs() < 1e-13);
    }

    #[test]
    fn objective_matches_simulation_on_the_same_batch() {
        use crate::dynamics::{batch_expected_cost, LoopMode, ProblemSpec};
        let p = ExecutionProblem::default();
        let problem = ProblemSpec::execution(p.clone()).unwrap();
        let (grid, b) = batch(0.25, 50, 2000);
        let e = expected_signature(&grid, &b, expanded_level(2), Interpolation::TimeFirst).unwrap();
        let obj = build_objective(&p, 2, &e).unwrap();
        for k in 0..5 {
            let ell: Vec<f64> = (0..7).map(|i| 0.5 * ((k * 7 + i) as f64 * 1.3).sin()).collect();
            let lin = obj.value(&ell).unwrap();
            let pol = Policy::from_functionals(&[TruncatedTensor::from_coeffs(2, 2, ell).unwrap()]).unwrap();
            let mc = batch_expected_cost(&problem, &grid, &b, &pol, LoopMode::Open).unwrap();
            assert!((mc.mean - lin).abs() <= 3.0 * mc.std_error, "{k}: {lin} vs {mc:?}");
        }
    }

    #[test]
    fn shuffle_pair_matches_materialized_shuffle() {
        let (grid, b) = batch(0.3, 10, 5);
        let e = expected_signature(&grid, &b, 5, Interpolation::TimeFirst).unwrap();
        let u = TruncatedTensor::from_word(2, 5, &[0, 1], 1.0).unwrap();
        let v = TruncatedTensor::from_word(2, 5, &[1, 1, 0], 1.0).unwrap();
        let direct = crate::tensor::pair(&shuffle(&u, &v, 5).unwrap(), &e).unwrap();
        assert!((shuffle_pair(&[0, 1], &[1, 1, 0], &[], &e) - direct).abs() < 1e-14);
    }

    #[test]
    fn null_and_constant_controls() {
        let p = ExecutionProblem::default();
        let (grid, b) = batch(0.5, 20, 400);
        let e = expected_signature(&grid, &b, expanded_level(2), Interpolation::TimeFirst).unwrap();
        let obj = build_objective(&p, 2, &e).unwrap();
        let n = obj.c.len();
        assert_eq!(n, 7);
        let e1 = e.get(&[1]).unwrap();
        assert!((obj.value(&vec![0.0; n]).unwrap() - (-p.q0 * (p.x0 + p.sigma * e1) + p.kappa_terminal)).abs() < 1e-14);
        let u = 0.8;
        let mut ell = vec![0.0; n];
        ell[0] = u;
        // −W − Q X_T + κu² + κ_T(q0 − u)² with W = u∫X dt
        let int_x = p.x0 + p.sigma * e.get(&[1, 0]).unwrap();
        let x_t = p.x0 + p.sigma * e1;
        let closed = -u * int_x - (p.q0 - u) * x_t + p.kappa * u * u + p.kappa_terminal * (p.q0 - u).powi(2);
        assert!((obj.value(&ell).unwrap() - closed).abs() < 1e-13);
        assert!((&obj.q - obj.q.transpose()).amax() < 1e-12);
    }

    #[test]
    fn deterministic_problem_recovers_twap() {
        let p = ExecutionProblem {
            sigma: 0.0,
            ..ExecutionProblem::default()
        };
        let (grid, b) = batch(0.5, 10, 4);
        let e = expected_signature(&grid, &b, expanded_level(2), Interpolation::TimeFirst).unwrap();
        let sol = solve_linearized(&build_objective(&p, 2, &e).unwrap()).unwrap();
        let (u, j) = twap(p.q0, p.x0, p.kappa, p.kappa_terminal, 1.0).unwrap();
        assert!((sol.coeffs[0] - u).abs() < 1e-6, "{:?}", sol.coeffs);
        assert!((-sol.value - j).abs() < 1e-9);
    }

    #[test]
    fn solver_stationarity_and_shape_errors() {
        let p = ExecutionProblem::default();
        let (grid, b) = batch(0.25, 20, 300);
        let e = expected_signature(&grid, &b, expanded_level(2), Interpolation::TimeFirst).unwrap();
        let obj = build_objective(&p, 2, &e).unwrap();
        let sol = solve_linearized(&obj).unwrap();
        assert!(obj.gradient(&sol.coeffs).norm() <= 1e-8 * (1.0 + obj.c.norm()));
        assert!(sol.min_eigenvalue >= -1e-12);
        assert!(matches!(build_objective(&p, 3, &e), Err(Error::Shape(_))));
    }

    #[test]
    fn indefinite_objective_is_rejected() {
        let obj = QuadraticObjective {
            level: 0,
            expanded_level: 2,
            q: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            c: DVector::zeros(2),
            r: 0.0,
        };
        assert!(matches!(solve_linearized(&obj), Err(Error::Numeric(_))));
    }
}
