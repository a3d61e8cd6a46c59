//! Exact sampling of fractional Brownian motion on a fixed grid.
//!
//! Paths are `ξ = L·Z` with `L` the Cholesky factor of the fBM covariance on the
//! positive grid points and `Z` drawn from a ChaCha stream keyed by
//! `(seed, path index)`, so a path depends only on its index.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Coarse control grid with a uniform refinement used for driver sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    coarse: Vec<f64>,
    fine: Vec<f64>,
    refine: usize,
}

impl TimeGrid {
    /// `n_steps` equal coarse steps on `[0, horizon]`, each split into `refine` fine steps.
    pub fn uniform(horizon: f64, n_steps: usize, refine: usize) -> Result<Self> {
        if !(horizon > 0.0) || n_steps == 0 || refine == 0 {
            return Err(Error::Grid(format!(
                "need horizon > 0, steps >= 1, refine >= 1 (got {horizon}, {n_steps}, {refine})"
            )));
        }
        let fine_steps = n_steps * refine;
        let fine: Vec<f64> = (0..=fine_steps)
            .map(|i| horizon * i as f64 / fine_steps as f64)
            .collect();
        let coarse = (0..=n_steps).map(|j| fine[j * refine]).collect();
        Ok(Self {
            coarse,
            fine,
            refine,
        })
    }

    /// Uniform grid from a step size that must divide the horizon.
    pub fn with_step(horizon: f64, dt: f64, refine: usize) -> Result<Self> {
        let n = (horizon / dt).round();
        if !(dt > 0.0) || n < 1.0 || (n * dt - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return Err(Error::Grid(format!("Δt = {dt} does not divide T = {horizon}")));
        }
        Self::uniform(horizon, n as usize, refine)
    }

    pub fn coarse(&self) -> &[f64] {
        &self.coarse
    }

    pub fn fine(&self) -> &[f64] {
        &self.fine
    }

    pub fn refine(&self) -> usize {
        self.refine
    }

    pub fn n_steps(&self) -> usize {
        self.coarse.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.coarse.last().unwrap()
    }
}

/// Sampled scalar driver paths on a common grid (including `t = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct DriverBatch {
    times: Arc<Vec<f64>>,
    values: Vec<f64>,
    first_index: usize,
}

impl DriverBatch {
    pub fn new(times: Arc<Vec<f64>>, values: Vec<f64>, first_index: usize) -> Result<Self> {
        if times.is_empty() || values.len() % times.len() != 0 {
            return Err(Error::Shape(format!(
                "{} values do not tile {} grid points",
                values.len(),
                times.len()
            )));
        }
        Ok(Self {
            times,
            values,
            first_index,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_paths(&self) -> usize {
        self.values.len() / self.times.len()
    }

    pub fn first_index(&self) -> usize {
        self.first_index
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.times.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.times.len())
    }

    /// `X = x0 + σ ξ` path-wise.
    pub fn scale_shift(&self, sigma: f64, x0: f64) -> DriverBatch {
        DriverBatch {
            times: Arc::clone(&self.times),
            values: self.values.iter().map(|v| x0 + sigma * v).collect(),
            first_index: self.first_index,
        }
    }

    /// CSV with columns `path,t,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,t,value\n");
        for (p, path) in self.paths().enumerate() {
            for (t, v) in self.times.iter().zip(path) {
                s.push_str(&format!("{},{t},{v}\n", self.first_index + p));
            }
        }
        s
    }
}

/// fBM covariance `R(s,t) = ½(s^{2H} + t^{2H} - |t-s|^{2H})`.
pub fn fbm_covariance(hurst: f64, s: f64, t: f64) -> f64 {
    let h2 = 2.0 * hurst;
    0.5 * (s.abs().powf(h2) + t.abs().powf(h2) - (t - s).abs().powf(h2))
}

#[derive(Clone, Debug)]
pub struct FbmSampler {
    hurst: f64,
    times: Arc<Vec<f64>>,
    /// Packed lower-triangular Cholesky factor over `times[1..]`, row-major.
    chol: Vec<f64>,
    seed: u64,
}

impl FbmSampler {
    /// Factorise the covariance on `times` (which must start at 0 and increase strictly).
    pub fn new(hurst: f64, times: &[f64], seed: u64) -> Result<Self> {
        Self::with_jitter(hurst, times, seed, 0.0)
    }

    pub fn with_jitter(hurst: f64, times: &[f64], seed: u64, jitter: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst <= 1.0) {
            return Err(Error::Domain(format!("Hurst parameter {hurst} outside (0, 1]")));
        }
        if times.first() != Some(&0.0) || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Grid(
                "sampling grid must start at 0 and increase strictly".into(),
            ));
        }
        let pos = &times[1..];
        let chol = if hurst == 1.0 {
            // rank one: ξ_t = t Z
            let mut l = vec![0.0; pos.len() * (pos.len() + 1) / 2];
            for (i, &t) in pos.iter().enumerate() {
                l[i * (i + 1) / 2] = t;
            }
            l
        } else {
            cholesky_packed(pos.len(), |i, j| {
                fbm_covariance(hurst, pos[i], pos[j]) + if i == j { jitter } else { 0.0 }
            })?
        };
        Ok(Self {
            hurst,
            times: Arc::new(times.to_vec()),
            chol,
            seed,
        })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Lower-triangular factor entry `L[i][j]` over the positive grid points.
    pub fn factor(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.chol[i * (i + 1) / 2 + j]
        }
    }

    /// The path with global index `index`, written into `out` (length = grid size).
    pub fn sample_into(&self, index: u64, out: &mut [f64]) {
        let n = self.times.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        out[0] = 0.0;
        for i in 0..n {
            let row = &self.chol[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
            out[i + 1] = row.iter().zip(&z).map(|(l, z)| l * z).sum();
        }
    }

    pub fn sample_paths(&self, n_paths: usize, first_index: usize) -> Result<DriverBatch> {
        if n_paths == 0 {
            return Err(Error::Domain("need at least one path".into()));
        }
        let m = self.times.len();
        let mut values = vec![0.0; n_paths * m];
        values
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, out)| self.sample_into((first_index + i) as u64, out));
        DriverBatch::new(Arc::clone(&self.times), values, first_index)
    }
}

fn cholesky_packed(n: usize, a: impl Fn(usize, usize) -> f64) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * (n + 1) / 2];
    let idx = |i: usize, j: usize| i * (i + 1) / 2 + j;
    for i in 0..n {
        for j in 0..=i {
            let mut s = a(i, j);
            let (ri, rj) = (idx(i, 0), idx(j, 0));
            for k in 0..j {
                s -= l[ri + k] * l[rj + k];
            }
            if i == j {
                if !(s > 0.0) {
                    let scale = a(i, i).abs().max(f64::MIN_POSITIVE);
                    return Err(Error::Factorization {
                        pivot: i,
                        suggested_jitter: (scale * 1e-12).max(-s * 2.0),
                    });
                }
                l[idx(i, i)] = s.sqrt();
            } else {
                l[idx(i, j)] = s / l[idx(j, j)];
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_construction() {
        let g = TimeGrid::uniform(1.0, 4, 3).unwrap();
        assert_eq!(g.fine().len(), 13);
        assert_eq!(g.coarse(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(TimeGrid::with_step(1.0, 0.3, 1).is_err());
        assert_eq!(TimeGrid::with_step(1.0, 0.01, 1).unwrap().n_steps(), 100);
    }

    #[test]
    fn factor_reproduces_covariance() {
        let times: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for h in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let s = FbmSampler::new(h, &times, 1).unwrap();
            for i in 0..20 {
                for j in 0..20 {
                    let llt: f64 = (0..20).map(|k| s.factor(i, k) * s.factor(j, k)).sum();
                    let r = fbm_covariance(h, times[i + 1], times[j + 1]);
                    assert!((llt - r).abs() < 1e-10, "H={h} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn brownian_covariance_is_min() {
        assert_eq!(fbm_covariance(0.5, 0.5, 1.0), 0.5);
    }

    #[test]
    fn straight_lines_at_h_one() {
        let times = [0.0, 0.25, 0.5, 1.0];
        let b = FbmSampler::new(1.0, &times, 3).unwrap().sample_paths(5, 0).unwrap();
        for p in b.paths() {
            let slope = p[3];
            assert!((p[1] / 0.25 - slope).abs() < 1e-14);
            assert!((p[2] / 0.5 - slope).abs() < 1e-14);
        }
    }

    #[test]
    fn bad_parameters() {
        assert!(FbmSampler::new(0.0, &[0.0, 1.0], 0).is_err());
        assert!(FbmSampler::new(1.2, &[0.0, 1.0], 0).is_err());
        assert!(matches!(FbmSampler::new(0.5, &[0.1, 1.0], 0), Err(Error::Grid(_))));
        assert!(FbmSampler::new(0.5, &[0.0, 1.0], 0).unwrap().sample_paths(0, 0).is_err());
    }

    #[test]
    fn singular_covariance_reports_pivot() {
        // duplicated information: H close to 1 on a fine grid is numerically rank deficient
        let times: Vec<f64> = (0..=400).map(|i| i as f64 / 400.0).collect();
        match FbmSampler::new(0.9999999, &times, 0) {
            Err(Error::Factorization { suggested_jitter, .. }) => assert!(suggested_jitter > 0.0),
            Ok(_) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn paths_depend_only_on_index() {
        let times: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let s = FbmSampler::new(0.3, &times, 42).unwrap();
        let big = s.sample_paths(8, 100).unwrap();
        let small = s.sample_paths(2, 105).unwrap();
        assert_eq!(big.path(5), small.path(0));
        assert_eq!(big.path(6), small.path(1));
        assert_eq!(big.path(0)[0], 0.0);
    }

    #[test]
    fn scale_shift_cases() {
        let times = [0.0, 0.5, 1.0];
        let b = FbmSampler::new(0.5, &times, 1).unwrap().sample_paths(3, 0).unwrap();
        assert_eq!(b.scale_shift(1.0, 0.0), b);
        assert!(b.scale_shift(0.0, 2.5).paths().all(|p| p.iter().all(|&v| v == 2.5)));
    }
}
