//! Signatures of time-augmented piecewise-linear paths.
//!
//! Letter 0 of the augmented alphabet is running time; letters `1..=d` are the
//! driver coordinates.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{word_string, TruncatedTensor};

const GRID_TOL: f64 = 1e-12;

/// Increment `(Δt, Δx_1, ..., Δx_d)` of one linear piece of an augmented path.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSegment {
    delta: Vec<f64>,
}

impl AugmentedSegment {
    pub fn new(dt: f64, dx: &[f64]) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("segment needs Δt > 0, got {dt}")));
        }
        let mut delta = Vec::with_capacity(dx.len() + 1);
        delta.push(dt);
        delta.extend_from_slice(dx);
        Ok(Self { delta })
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn dt(&self) -> f64 {
        self.delta[0]
    }
}

/// Exact signature of a linear segment: `exp` of its increment.
pub fn segment_signature(seg: &AugmentedSegment, level: usize) -> TruncatedTensor {
    let mut s = TruncatedTensor::one(seg.delta.len(), level);
    s.mul_exp_increment(&seg.delta);
    s
}

/// Signature of the concatenation of linear segments (Chen).
pub fn path_signature(segments: &[AugmentedSegment], level: usize) -> Result<TruncatedTensor> {
    let first = segments
        .first()
        .ok_or_else(|| Error::Domain("path signature of an empty segment list".into()))?;
    let dim = first.delta.len();
    let mut s = TruncatedTensor::one(dim, level);
    for seg in segments {
        if seg.delta.len() != dim {
            return Err(Error::Shape("segments of differing dimension".into()));
        }
        s.mul_exp_increment(&seg.delta);
    }
    Ok(s)
}

/// Running signatures `S_j = Sig(x̂)_{0,t_j}` on a coarse grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureStream {
    level: usize,
    times: Vec<f64>,
    sigs: Vec<TruncatedTensor>,
}

impl SignatureStream {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn sigs(&self) -> &[TruncatedTensor] {
        &self.sigs
    }

    pub fn len(&self) -> usize {
        self.sigs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigs.is_empty()
    }

    pub fn terminal(&self) -> &TruncatedTensor {
        self.sigs.last().expect("streams hold at least S_0")
    }

    /// Increment `δS_j = S_{j-1}^{-1} ⊗ S_j` for `j >= 1`.
    pub fn increment(&self, j: usize) -> Result<TruncatedTensor> {
        self.sigs[j - 1].inverse()?.mul(&self.sigs[j])
    }

    /// CSV with a time column followed by one column per word (`e`, `e1`, `e2`, `e11`, ...).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        if let Some(first) = self.sigs.first() {
            for (w, _) in first.iter_words() {
                let _ = write!(s, ",e{}", word_string(&w));
            }
        }
        s.push('\n');
        for (t, sig) in self.times.iter().zip(&self.sigs) {
            let _ = write!(s, "{t}");
            for c in sig.coeffs() {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(dim: usize, level: usize, text: &str) -> Result<Self> {
        let mut times = Vec::new();
        let mut sigs = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|_| Error::Shape(format!("line {}: bad number", ln + 1)))?;
            let (t, coeffs) = vals
                .split_first()
                .ok_or_else(|| Error::Shape(format!("line {}: empty row", ln + 1)))?;
            times.push(*t);
            sigs.push(TruncatedTensor::from_coeffs(dim, level, coeffs.to_vec())?);
        }
        Ok(Self { level, times, sigs })
    }
}

/// Indices of the coarse grid points inside the fine grid, or a grid error.
pub fn nest_indices(fine: &[f64], coarse: &[f64]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(coarse.len());
    let mut i = 0;
    for &c in coarse {
        while i < fine.len() && fine[i] < c - GRID_TOL * (1.0 + c.abs()) {
            i += 1;
        }
        if i == fine.len() || (fine[i] - c).abs() > GRID_TOL * (1.0 + c.abs()) {
            return Err(Error::Grid(format!("coarse time {c} is not a fine grid point")));
        }
        out.push(i);
    }
    if out.first() != Some(&0) || out.last() != Some(&(fine.len() - 1)) {
        return Err(Error::Grid("coarse and fine grids must share endpoints".into()));
    }
    Ok(out)
}

/// Stream the signature of the time-augmented, linearly interpolated driver.
///
/// `values` holds the driver on `fine_times` row-major (`fine_times.len() × driver_dim`).
/// Each coarse increment `δS_j` is built from the fine points inside `[t_{j-1}, t_j]`.
pub fn stream_signatures(
    fine_times: &[f64],
    values: &[f64],
    driver_dim: usize,
    coarse_times: &[f64],
    level: usize,
) -> Result<SignatureStream> {
    if values.len() != fine_times.len() * driver_dim {
        return Err(Error::Shape(format!(
            "{} driver values for {} times × dim {driver_dim}",
            values.len(),
            fine_times.len()
        )));
    }
    let idx = nest_indices(fine_times, coarse_times)?;
    let dim = driver_dim + 1;
    let mut sigs = Vec::with_capacity(coarse_times.len());
    let mut s = TruncatedTensor::one(dim, level);
    sigs.push(s.clone());
    let mut delta = vec![0.0; dim];
    for w in idx.windows(2) {
        for i in w[0] + 1..=w[1] {
            delta[0] = fine_times[i] - fine_times[i - 1];
            for k in 0..driver_dim {
                delta[k + 1] = values[i * driver_dim + k] - values[(i - 1) * driver_dim + k];
            }
            s.mul_exp_increment(&delta);
        }
        sigs.push(s.clone());
    }
    Ok(SignatureStream {
        level,
        times: coarse_times.to_vec(),
        sigs,
    })
}
