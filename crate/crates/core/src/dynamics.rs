//! Controlled state simulation and Monte Carlo costs.
//!
//! On the coarse grid `t_0 < ... < t_n` the state follows
//!
//! ```text
//! Y_j = Y_{j-1} + b(Y_{j-1}, U_{j-1}) Δt_j + E_σ(Y_{j-1}, δS_j),   U_{j-1} = θ(S_{j-1})
//! cost = Σ_{j=1..n} f(t_j, Y_j, U_j) Δt_j + g(Y_n)
//! ```
//!
//! Controls are read at the left end of each step, while the running cost is the
//! right-endpoint Riemann sum, so `U_n` enters the cost but not the dynamics.
//! All arithmetic that touches the state is recorded on a [`Tape`], which gives
//! the adjoint of every control for the gradient of the cost.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::{DriverBatch, FbmSampler, TimeGrid};
use crate::optim::tape::{Tape, Var};
use crate::policy::{ForwardCache, Policy};
use crate::signature::{nest_indices, stream_signatures, SignatureStream};
use crate::tensor::{level_offset, total_len, TruncatedTensor};

/// Paths per work unit of the ordered parallel reduction.
pub const CHUNK: usize = 32;
/// Paths sampled at a time when streaming large evaluation sets.
pub const BLOCK: usize = 1024;

/// A controlled system `dY = b(Y, U) dt + σ(Y) dX` with costs `f`, `g`.
pub trait ControlledSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn driver_dim(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;
    fn drift<'t>(&self, t: f64, y: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>>;
    /// Noise contribution `E_σ` over one step from the coarse driver increment
    /// `dx` and, when [`ControlledSystem::increment_level`] asks for it, the
    /// driver signature increment `δS_j`.
    fn noise<'t>(&self, y: &[Var<'t>], dx: &[f64], ds: Option<&TruncatedTensor>) -> Vec<Var<'t>>;
    /// Truncation level of `δS_j` needed by [`ControlledSystem::noise`], if any.
    fn increment_level(&self) -> Option<usize> {
        None
    }
    fn running_cost<'t>(&self, t: f64, y: &[Var<'t>], u: &[Var<'t>]) -> Var<'t>;
    fn terminal_cost<'t>(&self, y: &[Var<'t>]) -> Var<'t>;

    #[allow(clippy::too_many_arguments)]
    fn step<'t>(
        &self,
        t: f64,
        y: &[Var<'t>],
        u: &[Var<'t>],
        dt: f64,
        dx: &[f64],
        ds: Option<&TruncatedTensor>,
    ) -> Vec<Var<'t>> {
        let b = self.drift(t, y, u);
        let e = self.noise(y, dx, ds);
        y.iter()
            .zip(b)
            .zip(e)
            .map(|((&yi, bi), ei)| yi + bi * dt + ei)
            .collect()
    }
}

/// Tracking of a driver: `dY = U dt − dξ`, `f = ½(Y² + κU²)`, `g = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingProblem {
    pub y0: f64,
    pub kappa: f64,
}

impl ControlledSystem for TrackingProblem {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn driver_dim(&self) -> usize {
        1
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![self.y0]
    }
    fn drift<'t>(&self, _t: f64, _y: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
        vec![u[0]]
    }
    fn noise<'t>(&self, y: &[Var<'t>], dx: &[f64], _ds: Option<&TruncatedTensor>) -> Vec<Var<'t>> {
        vec![y[0].constant(-dx[0])]
    }
    fn running_cost<'t>(&self, _t: f64, y: &[Var<'t>], u: &[Var<'t>]) -> Var<'t> {
        let (yv, uv) = (y[0].value(), u[0].value());
        y[0].tape().custom(
            0.5 * (yv * yv + self.kappa * uv * uv),
            &[(y[0], yv), (u[0], self.kappa * uv)],
        )
    }
    fn terminal_cost<'t>(&self, y: &[Var<'t>]) -> Var<'t> {
        y[0].constant(0.0)
    }
    fn step<'t>(
        &self,
        _t: f64,
        y: &[Var<'t>],
        u: &[Var<'t>],
        dt: f64,
        dx: &[f64],
        _ds: Option<&TruncatedTensor>,
    ) -> Vec<Var<'t>> {
        vec![y[0].tape().linear_combination(&[(y[0], 1.0), (u[0], dt)], -dx[0])]
    }
}

/// Optimal execution with state `(W, Q, X)`: `dW = X U dt`, `dQ = −U dt`,
/// `dX = σ dξ`; cost `L = −W_T − Q_T X_T + κ∫U² dt + κ_T Q_T²`.
///
/// The driver is the normalized noise `ξ`, so `X = x0 + σ ξ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionProblem {
    pub q0: f64,
    pub x0: f64,
    pub kappa: f64,
    pub kappa_terminal: f64,
    pub sigma: f64,
}

impl Default for ExecutionProblem {
    fn default() -> Self {
        Self {
            q0: 1.0,
            x0: 1.0,
            kappa: 0.001,
            kappa_terminal: 0.1,
            sigma: 0.02,
        }
    }
}

impl ControlledSystem for ExecutionProblem {
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn driver_dim(&self) -> usize {
        1
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![0.0, self.q0, self.x0]
    }
    fn drift<'t>(&self, _t: f64, y: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
        vec![y[2] * u[0], -u[0], y[0].constant(0.0)]
    }
    fn noise<'t>(&self, y: &[Var<'t>], dx: &[f64], _ds: Option<&TruncatedTensor>) -> Vec<Var<'t>> {
        vec![y[0].constant(0.0), y[0].constant(0.0), y[0].constant(self.sigma * dx[0])]
    }
    fn running_cost<'t>(&self, _t: f64, _y: &[Var<'t>], u: &[Var<'t>]) -> Var<'t> {
        let uv = u[0].value();
        u[0].tape().custom(self.kappa * uv * uv, &[(u[0], 2.0 * self.kappa * uv)])
    }
    fn terminal_cost<'t>(&self, y: &[Var<'t>]) -> Var<'t> {
        let (w, q, x) = (y[0].value(), y[1].value(), y[2].value());
        y[0].tape().custom(
            -w - q * x + self.kappa_terminal * q * q,
            &[(y[0], -1.0), (y[1], -x + 2.0 * self.kappa_terminal * q), (y[2], -q)],
        )
    }
    fn step<'t>(
        &self,
        _t: f64,
        y: &[Var<'t>],
        u: &[Var<'t>],
        dt: f64,
        dx: &[f64],
        _ds: Option<&TruncatedTensor>,
    ) -> Vec<Var<'t>> {
        let tape = y[0].tape();
        let (x, uv) = (y[2].value(), u[0].value());
        vec![
            tape.custom(y[0].value() + x * uv * dt, &[(y[0], 1.0), (y[2], uv * dt), (u[0], x * dt)]),
            tape.linear_combination(&[(y[1], 1.0), (u[0], -dt)], 0.0),
            tape.linear_combination(&[(y[2], 1.0)], self.sigma * dx[0]),
        ]
    }
}

type DriftFn = Box<dyn for<'t> Fn(f64, &[Var<'t>], &[Var<'t>]) -> Vec<Var<'t>> + Send + Sync>;
type FieldFn = Box<dyn for<'t> Fn(&[Var<'t>]) -> Vec<Var<'t>> + Send + Sync>;
type CostFn = Box<dyn for<'t> Fn(f64, &[Var<'t>], &[Var<'t>]) -> Var<'t> + Send + Sync>;
type TerminalFn = Box<dyn for<'t> Fn(&[Var<'t>]) -> Var<'t> + Send + Sync>;

/// A user-supplied system given by callbacks.
///
/// `sigma(y)` returns the `m × d` diffusion matrix row-major (state index
/// first). The optional second-order oracle returns, for every pair of driver
/// letters `(a, b)`, the field `Dσ_b(y) σ_a(y)` as `m` entries at offset
/// `(a·d + b)·m`; it is paired with the `δS` coordinate of the word `(a, b)`.
pub struct CustomSystem {
    y0: Vec<f64>,
    control_dim: usize,
    driver_dim: usize,
    drift: DriftFn,
    sigma: FieldFn,
    second: Option<FieldFn>,
    running: CostFn,
    terminal: TerminalFn,
}

impl std::fmt::Debug for CustomSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CustomSystem")
            .field("y0", &self.y0)
            .field("control_dim", &self.control_dim)
            .field("driver_dim", &self.driver_dim)
            .field("second_order", &self.second.is_some())
            .finish()
    }
}

impl CustomSystem {
    pub fn new<B, S, F, G>(
        y0: Vec<f64>,
        control_dim: usize,
        driver_dim: usize,
        drift: B,
        sigma: S,
        running: F,
        terminal: G,
    ) -> Self
    where
        B: for<'t> Fn(f64, &[Var<'t>], &[Var<'t>]) -> Vec<Var<'t>> + Send + Sync + 'static,
        S: for<'t> Fn(&[Var<'t>]) -> Vec<Var<'t>> + Send + Sync + 'static,
        F: for<'t> Fn(f64, &[Var<'t>], &[Var<'t>]) -> Var<'t> + Send + Sync + 'static,
        G: for<'t> Fn(&[Var<'t>]) -> Var<'t> + Send + Sync + 'static,
    {
        Self {
            y0,
            control_dim,
            driver_dim,
            drift: Box::new(drift),
            sigma: Box::new(sigma),
            second: None,
            running: Box::new(running),
            terminal: Box::new(terminal),
        }
    }

    pub fn with_second_order<V>(mut self, oracle: V) -> Self
    where
        V: for<'t> Fn(&[Var<'t>]) -> Vec<Var<'t>> + Send + Sync + 'static,
    {
        self.second = Some(Box::new(oracle));
        self
    }
}

impl ControlledSystem for CustomSystem {
    fn state_dim(&self) -> usize {
        self.y0.len()
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn driver_dim(&self) -> usize {
        self.driver_dim
    }
    fn initial_state(&self) -> Vec<f64> {
        self.y0.clone()
    }
    fn drift<'t>(&self, t: f64, y: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
        (self.drift)(t, y, u)
    }
    fn noise<'t>(&self, y: &[Var<'t>], dx: &[f64], ds: Option<&TruncatedTensor>) -> Vec<Var<'t>> {
        let (m, d) = (y.len(), self.driver_dim);
        let tape = y[0].tape();
        let sig = (self.sigma)(y);
        let second = match (&self.second, ds) {
            (Some(f), Some(_)) => f(y),
            _ => Vec::new(),
        };
        (0..m)
            .map(|i| {
                let mut terms: Vec<(Var<'t>, f64)> = (0..d).map(|a| (sig[i * d + a], dx[a])).collect();
                if let Some(ds) = ds.filter(|_| !second.is_empty()) {
                    for a in 0..d {
                        for b in 0..d {
                            let w = ds.get(&[a + 1, b + 1]).unwrap_or(0.0);
                            terms.push((second[(a * d + b) * m + i], w));
                        }
                    }
                }
                tape.linear_combination(&terms, 0.0)
            })
            .collect()
    }
    fn increment_level(&self) -> Option<usize> {
        self.second.as_ref().map(|_| 2)
    }
    fn running_cost<'t>(&self, t: f64, y: &[Var<'t>], u: &[Var<'t>]) -> Var<'t> {
        (self.running)(t, y, u)
    }
    fn terminal_cost<'t>(&self, y: &[Var<'t>]) -> Var<'t> {
        (self.terminal)(y)
    }
}

#[derive(Clone, Debug)]
pub enum ProblemSpec {
    Tracking(TrackingProblem),
    Execution(ExecutionProblem),
    Custom(Arc<CustomSystem>),
}

impl ProblemSpec {
    pub fn tracking(y0: f64, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::Config(format!("κ must be positive, got {kappa}")));
        }
        Ok(ProblemSpec::Tracking(TrackingProblem { y0, kappa }))
    }

    pub fn execution(p: ExecutionProblem) -> Result<Self> {
        if !(p.kappa > 0.0) || !(p.kappa_terminal >= 0.0) {
            return Err(Error::Config(format!(
                "need κ > 0 and κ_T >= 0, got {} and {}",
                p.kappa, p.kappa_terminal
            )));
        }
        Ok(ProblemSpec::Execution(p))
    }

    pub fn system(&self) -> &dyn ControlledSystem {
        match self {
            ProblemSpec::Tracking(p) => p,
            ProblemSpec::Execution(p) => p,
            ProblemSpec::Custom(p) => p.as_ref(),
        }
    }
}

/// Whether the policy reads the driver's signature or the controlled state's.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopMode {
    Open,
    Closed,
}

/// One simulated path on the coarse grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub state_dim: usize,
    pub control_dim: usize,
    /// `(n + 1) × m`, row-major.
    pub y: Vec<f64>,
    /// `(n + 1) × k`, row-major.
    pub u: Vec<f64>,
    /// Accumulated running cost at each grid point.
    pub running: Vec<f64>,
    /// Running plus terminal cost.
    pub cost: f64,
}

impl Trajectory {
    pub fn state(&self, j: usize) -> &[f64] {
        &self.y[j * self.state_dim..(j + 1) * self.state_dim]
    }

    pub fn control(&self, j: usize) -> &[f64] {
        &self.u[j * self.control_dim..(j + 1) * self.control_dim]
    }

    /// Columns `t, y1.., u1.., running_cost`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for i in 0..self.state_dim {
            let _ = write!(s, ",y{}", i + 1);
        }
        for i in 0..self.control_dim {
            let _ = write!(s, ",u{}", i + 1);
        }
        s.push_str(",running_cost\n");
        for (j, t) in self.times.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in self.state(j).iter().chain(self.control(j)) {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", self.running[j]);
        }
        s
    }
}

/// Per-path simulation inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPath {
    pub index: usize,
    /// Driver on the coarse grid, `(n + 1) × d` row-major.
    pub driver: Vec<f64>,
    /// Open-loop policy features, `(n + 1) × input_len` (empty in closed loop).
    pub features: Vec<f64>,
    /// `δS_1 .. δS_n` when the system's noise term needs them.
    pub increments: Vec<TruncatedTensor>,
}

fn stream_level(sys: &dyn ControlledSystem, policy: &Policy, mode: LoopMode) -> usize {
    let p = if mode == LoopMode::Open { policy.level() } else { 0 };
    p.max(sys.increment_level().unwrap_or(0))
}

fn check_policy(sys: &dyn ControlledSystem, policy: &Policy, mode: LoopMode) -> Result<()> {
    let want = match mode {
        LoopMode::Open => sys.driver_dim() + 1,
        LoopMode::Closed => sys.state_dim() + 1,
    };
    if policy.dim() != want || policy.controls() != sys.control_dim() {
        return Err(Error::Shape(format!(
            "policy (dim={}, controls={}) does not fit the system (needs dim={want}, controls={})",
            policy.dim(),
            policy.controls(),
            sys.control_dim()
        )));
    }
    Ok(())
}

fn features_and_increments(
    stream: &SignatureStream,
    policy: &Policy,
    mode: LoopMode,
    want_increments: bool,
) -> Result<(Vec<f64>, Vec<TruncatedTensor>)> {
    let mut features = Vec::new();
    if mode == LoopMode::Open {
        features.reserve(stream.len() * policy.input_len());
        for s in stream.sigs() {
            features.extend(policy.features(s)?);
        }
    }
    let increments = if want_increments {
        (1..stream.len())
            .map(|j| stream.increment(j))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok((features, increments))
}

/// Build the simulation inputs of one scalar driver path given on the fine grid.
pub fn prepare_path(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    fine_values: &[f64],
    index: usize,
    policy: &Policy,
    mode: LoopMode,
) -> Result<PreparedPath> {
    let sys = problem.system();
    if sys.driver_dim() != 1 {
        return Err(Error::Shape("sampled drivers are one-dimensional".into()));
    }
    let idx = nest_indices(grid.fine(), grid.coarse())?;
    let driver: Vec<f64> = idx.iter().map(|&i| fine_values[i]).collect();
    let level = stream_level(sys, policy, mode);
    if level == 0 {
        return Ok(PreparedPath {
            index,
            driver,
            features: Vec::new(),
            increments: Vec::new(),
        });
    }
    let stream = stream_signatures(grid.fine(), fine_values, 1, grid.coarse(), level)?;
    let (features, increments) =
        features_and_increments(&stream, policy, mode, sys.increment_level().is_some())?;
    Ok(PreparedPath {
        index,
        driver,
        features,
        increments,
    })
}

/// [`prepare_path`] for every path of a batch, in parallel.
pub fn prepare_batch(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    batch: &DriverBatch,
    policy: &Policy,
    mode: LoopMode,
) -> Result<Vec<PreparedPath>> {
    check_policy(problem.system(), policy, mode)?;
    if batch.times() != grid.fine() {
        return Err(Error::Grid("driver batch is not sampled on the fine grid".into()));
    }
    (0..batch.n_paths())
        .into_par_iter()
        .map(|i| prepare_path(problem, grid, batch.path(i), batch.first_index() + i, policy, mode))
        .collect()
}

/// Outcome of one path.
#[derive(Clone, Debug)]
pub struct PathOutcome {
    pub cost: f64,
    pub grad: Option<Vec<f64>>,
    pub trajectory: Option<Trajectory>,
}

thread_local! {
    static TAPE: Tape = Tape::new();
}

/// Signature of the time-augmented state, kept on the tape.
struct StateSignature<'t> {
    dim: usize,
    level: usize,
    coeffs: Vec<Var<'t>>,
    /// Lyndon coordinate map `η × total_len` (deep policies only).
    lie: Option<Vec<Vec<(usize, f64)>>>,
}

impl<'t> StateSignature<'t> {
    fn new(tape: &'t Tape, policy: &Policy) -> Result<Self> {
        let (dim, level) = (policy.dim(), policy.level());
        let n = total_len(dim, level);
        let mut coeffs = Vec::with_capacity(n);
        coeffs.push(tape.var(1.0));
        for _ in 1..n {
            coeffs.push(tape.var(0.0));
        }
        let lie = match policy.basis() {
            Some(basis) => {
                let mut rows = vec![Vec::new(); basis.size()];
                for idx in 1..n {
                    let mut unit = TruncatedTensor::zeros(dim, level);
                    unit.coeffs_mut()[idx] = 1.0;
                    for (r, c) in basis.coords_of_lie(&unit)?.into_iter().enumerate() {
                        if c != 0.0 {
                            rows[r].push((idx, c));
                        }
                    }
                }
                Some(rows)
            }
            None => None,
        };
        Ok(Self {
            dim,
            level,
            coeffs,
            lie,
        })
    }

    fn slice(&self, k: usize) -> std::ops::Range<usize> {
        let off = level_offset(self.dim, k);
        off..off + self.dim.pow(k as u32)
    }

    /// `S <- S ⊗ exp(x)`.
    fn mul_exp(&mut self, x: &[Var<'t>]) {
        let tape = x[0].tape();
        let d = self.dim;
        // powers P_i = x^{⊗i}/i! by level
        let mut powers: Vec<Vec<Var<'t>>> = vec![vec![tape.var(1.0)], x.to_vec()];
        for i in 2..=self.level {
            let prev = &powers[i - 1];
            let mut p = Vec::with_capacity(prev.len() * d);
            for &a in prev {
                for &b in x {
                    let (av, bv) = (a.value(), b.value());
                    let inv = 1.0 / i as f64;
                    p.push(tape.custom(av * bv * inv, &[(a, bv * inv), (b, av * inv)]));
                }
            }
            powers.push(p);
        }
        let old = self.coeffs.clone();
        for k in 1..=self.level {
            for (pos, slot) in self.slice(k).enumerate() {
                let mut value = 0.0;
                let mut edges: Vec<(Var<'t>, f64)> = Vec::with_capacity(2 * (k + 1));
                for i in 0..=k {
                    let width = d.pow(i as u32);
                    let (u_idx, v_idx) = (pos / width, pos % width);
                    let s = old[self.slice(k - i).start + u_idx];
                    let p = powers[i][v_idx];
                    let (sv, pv) = (s.value(), p.value());
                    value += sv * pv;
                    edges.push((s, pv));
                    if i > 0 {
                        edges.push((p, sv));
                    }
                }
                self.coeffs[slot] = tape.custom(value, &edges);
            }
        }
    }

    /// Product of two tensors with vanishing level 0.
    fn mul_nil(&self, a: &[Var<'t>], b: &[Var<'t>]) -> Vec<Var<'t>> {
        let tape = a[0].tape();
        let d = self.dim;
        let mut out = vec![tape.var(0.0); a.len()];
        for k in 2..=self.level {
            let range = self.slice(k);
            for (pos, slot) in range.enumerate() {
                let mut value = 0.0;
                let mut edges = Vec::new();
                for i in 1..k {
                    let width = d.pow((k - i) as u32);
                    let x = a[self.slice(i).start + pos / width];
                    let y = b[self.slice(k - i).start + pos % width];
                    let (xv, yv) = (x.value(), y.value());
                    value += xv * yv;
                    edges.push((x, yv));
                    edges.push((y, xv));
                }
                out[slot] = tape.custom(value, &edges);
            }
        }
        out
    }

    fn features(&self) -> Vec<Var<'t>> {
        let Some(lie) = &self.lie else {
            return self.coeffs.clone();
        };
        let tape = self.coeffs[0].tape();
        let mut x = self.coeffs.clone();
        x[0] = tape.var(0.0);
        // log(1 + x) = Σ (−1)^{n+1} x^n / n
        let mut log: Vec<(Vec<Var<'t>>, f64)> = vec![(x.clone(), 1.0)];
        let mut power = x.clone();
        for n in 2..=self.level {
            power = self.mul_nil(&power, &x);
            let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
            log.push((power.clone(), sign / n as f64));
        }
        let log: Vec<Var<'t>> = (0..x.len())
            .map(|i| {
                let terms: Vec<(Var<'t>, f64)> = log.iter().map(|(p, c)| (p[i], *c)).collect();
                tape.linear_combination(&terms, 0.0)
            })
            .collect();
        lie.iter()
            .map(|row| {
                let terms: Vec<(Var<'t>, f64)> = row.iter().map(|&(i, c)| (log[i], c)).collect();
                tape.linear_combination(&terms, 0.0)
            })
            .collect()
    }
}

enum Controller<'a, 't> {
    Open {
        /// Projected controls `(n + 1) × k`.
        controls: Vec<f64>,
    },
    Closed {
        policy: &'a Policy,
        sig: StateSignature<'t>,
        prev: Vec<Var<'t>>,
        prev_t: f64,
        /// Per step: features, cache, mask.
        steps: Vec<(Vec<f64>, ForwardCache, Vec<f64>)>,
    },
}

impl<'a, 't> Controller<'a, 't> {
    fn control(&mut self, tape: &'t Tape, j: usize, t: f64, y: &[Var<'t>], k: usize) -> Vec<Var<'t>> {
        match self {
            Controller::Open { controls } => tape.vars(&controls[j * k..(j + 1) * k]),
            Controller::Closed {
                policy,
                sig,
                prev,
                prev_t,
                steps,
            } => {
                if j > 0 {
                    let mut inc = Vec::with_capacity(y.len() + 1);
                    inc.push(tape.var(t - *prev_t));
                    for (yi, p) in y.iter().zip(prev.iter()) {
                        inc.push(*yi - *p);
                    }
                    sig.mul_exp(&inc);
                }
                *prev = y.to_vec();
                *prev_t = t;
                let fvars = sig.features();
                let x: Vec<f64> = fvars.iter().map(|v| v.value()).collect();
                let mut cache = ForwardCache::default();
                let mut u = policy.forward(&x, 1, &mut cache);
                let mask = policy.projection().apply(&mut u);
                let mut out = Vec::with_capacity(k);
                for i in 0..k {
                    let mut e = vec![0.0; k];
                    e[i] = mask[i];
                    let jac = policy.backward_input(&cache, &e);
                    let edges: Vec<(Var<'t>, f64)> = fvars
                        .iter()
                        .zip(&jac)
                        .filter(|(_, &g)| g != 0.0)
                        .map(|(&v, &g)| (v, g))
                        .collect();
                    out.push(tape.custom(u[i], &edges));
                }
                steps.push((x, cache, mask));
                out
            }
        }
    }
}

/// Simulate one prepared path, optionally returning the cost gradient with
/// respect to the policy parameters and the full trajectory.
pub fn run_path(
    problem: &ProblemSpec,
    times: &[f64],
    path: &PreparedPath,
    policy: &Policy,
    mode: LoopMode,
    want_grad: bool,
    want_trajectory: bool,
) -> Result<PathOutcome> {
    let sys = problem.system();
    let (m, k, d) = (sys.state_dim(), sys.control_dim(), sys.driver_dim());
    let n = times.len() - 1;
    if path.driver.len() != (n + 1) * d {
        return Err(Error::Shape(format!(
            "driver has {} values for {} grid points × dim {d}",
            path.driver.len(),
            n + 1
        )));
    }
    let mut open_cache = ForwardCache::default();
    let mut open_mask = Vec::new();
    TAPE.with(|tape| {
        tape.clear();
        let mut controller = match mode {
            LoopMode::Open => {
                let nin = policy.input_len();
                if path.features.len() != (n + 1) * nin {
                    return Err(Error::Shape("feature block does not match grid and policy".into()));
                }
                let mut u = policy.forward(&path.features, n + 1, &mut open_cache);
                open_mask = policy.projection().apply(&mut u);
                Controller::Open { controls: u }
            }
            LoopMode::Closed => Controller::Closed {
                policy,
                sig: StateSignature::new(tape, policy)?,
                prev: Vec::new(),
                prev_t: times[0],
                steps: Vec::with_capacity(n + 1),
            },
        };
        let mut traj = want_trajectory.then(|| Trajectory {
            times: times.to_vec(),
            state_dim: m,
            control_dim: k,
            y: Vec::with_capacity((n + 1) * m),
            u: Vec::with_capacity((n + 1) * k),
            running: Vec::with_capacity(n + 1),
            cost: 0.0,
        });
        let mut y = tape.vars(&sys.initial_state());
        let mut u = controller.control(tape, 0, times[0], &y, k);
        let mut u_vars: Vec<Var<'_>> = Vec::with_capacity((n + 1) * k);
        u_vars.extend(&u);
        let mut terms = Vec::with_capacity(n + 1);
        let mut running = 0.0;
        let record = |traj: &mut Option<Trajectory>, y: &[Var<'_>], u: &[Var<'_>], running: f64| {
            if let Some(tr) = traj.as_mut() {
                tr.y.extend(y.iter().map(|v| v.value()));
                tr.u.extend(u.iter().map(|v| v.value()));
                tr.running.push(running);
            }
        };
        record(&mut traj, &y, &u, 0.0);
        let mut dx = vec![0.0; d];
        for j in 1..=n {
            let dt = times[j] - times[j - 1];
            for (a, slot) in dx.iter_mut().enumerate() {
                *slot = path.driver[j * d + a] - path.driver[(j - 1) * d + a];
            }
            y = sys.step(times[j - 1], &y, &u, dt, &dx, path.increments.get(j - 1));
            if let Some(bad) = y.iter().position(|v| !v.value().is_finite()) {
                return Err(Error::Simulation {
                    path: path.index,
                    step: j,
                    reason: format!("state coordinate {} is not finite", bad + 1),
                });
            }
            u = controller.control(tape, j, times[j], &y, k);
            u_vars.extend(&u);
            let f = sys.running_cost(times[j], &y, &u) * dt;
            running += f.value();
            terms.push(f);
            record(&mut traj, &y, &u, running);
        }
        terms.push(sys.terminal_cost(&y));
        let total = tape.sum(&terms);
        let cost = total.value();
        if !cost.is_finite() {
            return Err(Error::Simulation {
                path: path.index,
                step: n,
                reason: "cost is not finite".into(),
            });
        }
        if let Some(tr) = traj.as_mut() {
            tr.cost = cost;
        }
        let grad = if want_grad {
            let adj = tape.gradient(total);
            let mut g = vec![0.0; policy.num_params()];
            match &controller {
                Controller::Open { .. } => {
                    let dout: Vec<f64> = u_vars
                        .iter()
                        .zip(&open_mask)
                        .map(|(v, mk)| adj[v.index()] * mk)
                        .collect();
                    policy.backward_params(&path.features, &open_cache, &dout, &mut g);
                }
                Controller::Closed { steps, .. } => {
                    for (j, (x, cache, mask)) in steps.iter().enumerate() {
                        let dout: Vec<f64> = (0..k)
                            .map(|i| adj[u_vars[j * k + i].index()] * mask[i])
                            .collect();
                        policy.backward_params(x, cache, &dout, &mut g);
                    }
                }
            }
            Some(g)
        } else {
            None
        };
        Ok(PathOutcome {
            cost,
            grad,
            trajectory: traj,
        })
    })
}

/// Open-loop simulation from an explicit driver and its signature stream.
pub fn simulate(
    problem: &ProblemSpec,
    driver: &[f64],
    stream: &SignatureStream,
    policy: &Policy,
) -> Result<Trajectory> {
    let sys = problem.system();
    check_policy(sys, policy, LoopMode::Open)?;
    if policy.level() > stream.level() {
        return Err(Error::Shape(format!(
            "policy level {} exceeds stream level {}",
            policy.level(),
            stream.level()
        )));
    }
    if let Some(l) = sys.increment_level() {
        if stream.level() < l {
            return Err(Error::Shape(format!("the noise term needs a level-{l} stream")));
        }
    }
    let (features, increments) =
        features_and_increments(stream, policy, LoopMode::Open, sys.increment_level().is_some())?;
    let path = PreparedPath {
        index: 0,
        driver: driver.to_vec(),
        features,
        increments,
    };
    let out = run_path(problem, stream.times(), &path, policy, LoopMode::Open, false, true)?;
    Ok(out.trajectory.expect("trajectory requested"))
}

/// Closed-loop simulation: the policy reads the signature of `(t, Y_t)` built on-line.
pub fn simulate_closed_loop(
    problem: &ProblemSpec,
    times: &[f64],
    driver: &[f64],
    policy: &Policy,
) -> Result<Trajectory> {
    let sys = problem.system();
    check_policy(sys, policy, LoopMode::Closed)?;
    if sys.increment_level().is_some() {
        return Err(Error::Shape(
            "closed-loop simulation from a bare driver needs a first-order noise term".into(),
        ));
    }
    let path = PreparedPath {
        index: 0,
        driver: driver.to_vec(),
        features: Vec::new(),
        increments: Vec::new(),
    };
    let out = run_path(problem, times, &path, policy, LoopMode::Closed, false, true)?;
    Ok(out.trajectory.expect("trajectory requested"))
}

/// Monte Carlo mean and standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// Running sums for the ordered reduction (Chan's parallel variance update).
#[derive(Clone, Debug, Default)]
pub(crate) struct Accumulator {
    n: usize,
    mean: f64,
    m2: f64,
    grad: Vec<f64>,
}

impl Accumulator {
    fn push(&mut self, cost: f64, grad: Option<&[f64]>) {
        self.n += 1;
        let delta = cost - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (cost - self.mean);
        if let Some(g) = grad {
            if self.grad.is_empty() {
                self.grad = vec![0.0; g.len()];
            }
            for (a, b) in self.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub(crate) fn merge(&mut self, other: Accumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other;
            return;
        }
        let n = (self.n + other.n) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n;
        self.m2 += other.m2 + delta * delta * self.n as f64 * other.n as f64 / n;
        self.n += other.n;
        if self.grad.is_empty() {
            self.grad = other.grad;
        } else {
            for (a, b) in self.grad.iter_mut().zip(&other.grad) {
                *a += b;
            }
        }
    }

    pub(crate) fn estimate(&self) -> CostEstimate {
        let se = if self.n > 1 {
            (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
        } else {
            0.0
        };
        CostEstimate {
            mean: self.mean,
            std_error: se,
            n_paths: self.n,
        }
    }

    /// Mean gradient.
    pub(crate) fn mean_grad(&self) -> Vec<f64> {
        self.grad.iter().map(|g| g / self.n as f64).collect()
    }
}

/// Evaluate prepared paths in fixed chunks and merge the chunk results in order,
/// so the result does not depend on the number of worker threads.
pub(crate) fn accumulate(
    problem: &ProblemSpec,
    times: &[f64],
    paths: &[PreparedPath],
    policy: &Policy,
    mode: LoopMode,
    want_grad: bool,
) -> Result<Accumulator> {
    let parts: Vec<Result<Accumulator>> = paths
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Accumulator::default();
            for p in chunk {
                let out = run_path(problem, times, p, policy, mode, want_grad, false)?;
                acc.push(out.cost, out.grad.as_deref());
            }
            Ok(acc)
        })
        .collect();
    let mut total = Accumulator::default();
    for part in parts {
        total.merge(part?);
    }
    Ok(total)
}

/// Sample mean and standard error of the cost over prepared paths.
pub fn expected_cost(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    paths: &[PreparedPath],
    policy: &Policy,
    mode: LoopMode,
) -> Result<CostEstimate> {
    if paths.is_empty() {
        return Err(Error::Domain("expected cost of an empty batch".into()));
    }
    check_policy(problem.system(), policy, mode)?;
    Ok(accumulate(problem, grid.coarse(), paths, policy, mode, false)?.estimate())
}

/// Sample mean and standard error of the cost over a driver batch.
pub fn batch_expected_cost(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    batch: &DriverBatch,
    policy: &Policy,
    mode: LoopMode,
) -> Result<CostEstimate> {
    let paths = prepare_batch(problem, grid, batch, policy, mode)?;
    expected_cost(problem, grid, &paths, policy, mode)
}

/// Expected cost over `n_paths` freshly sampled paths starting at `first_index`,
/// sampled and simulated in blocks to bound memory.
pub fn sampled_expected_cost(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    sampler: &FbmSampler,
    n_paths: usize,
    first_index: usize,
    policy: &Policy,
    mode: LoopMode,
) -> Result<CostEstimate> {
    if n_paths == 0 {
        return Err(Error::Domain("expected cost of an empty batch".into()));
    }
    let mut total = Accumulator::default();
    let mut done = 0;
    while done < n_paths {
        let size = BLOCK.min(n_paths - done);
        let batch = sampler.sample_paths(size, first_index + done)?;
        let paths = prepare_batch(problem, grid, &batch, policy, mode)?;
        total.merge(accumulate(problem, grid.coarse(), &paths, policy, mode, false)?);
        done += size;
    }
    Ok(total.estimate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init, DeepOptions, PolicyKind};

    fn brownian_grid(n: usize) -> (TimeGrid, FbmSampler) {
        let grid = TimeGrid::uniform(1.0, n, 1).unwrap();
        let s = FbmSampler::new(0.5, grid.fine(), 42).unwrap();
        (grid, s)
    }

    #[test]
    fn zero_policy_tracking_is_minus_driver() {
        let (grid, sampler) = brownian_grid(20);
        let batch = sampler.sample_paths(1, 0).unwrap();
        let problem = ProblemSpec::tracking(0.3, 0.1).unwrap();
        let policy = Policy::linear(2, 2, 1).unwrap();
        let stream = stream_signatures(grid.fine(), batch.path(0), 1, grid.coarse(), 2).unwrap();
        let tr = simulate(&problem, batch.path(0), &stream, &policy).unwrap();
        let mut cost = 0.0;
        for j in 0..=20 {
            assert!((tr.state(j)[0] - (0.3 - batch.path(0)[j])).abs() < 1e-15);
            if j > 0 {
                cost += 0.5 * tr.state(j)[0].powi(2) * 0.05;
            }
        }
        assert!((tr.cost - cost).abs() < 1e-14);
        assert!(tr.to_csv().starts_with("t,y1,u1,running_cost\n0,"));
    }

    #[test]
    fn constant_rate_execution() {
        let (grid, sampler) = brownian_grid(10);
        let batch = sampler.sample_paths(1, 3).unwrap();
        let ex = ExecutionProblem::default();
        let problem = ProblemSpec::execution(ex.clone()).unwrap();
        let mut policy = Policy::linear(2, 1, 1).unwrap();
        policy.params_mut()[0] = 0.8;
        let stream = stream_signatures(grid.fine(), batch.path(0), 1, grid.coarse(), 1).unwrap();
        let tr = simulate(&problem, batch.path(0), &stream, &policy).unwrap();
        let last = tr.state(10);
        assert!((last[1] - (1.0 - 0.8)).abs() < 1e-14);
        let x: Vec<f64> = batch.path(0).iter().map(|v| ex.x0 + ex.sigma * v).collect();
        let w: f64 = (0..10).map(|j| 0.8 * x[j] * 0.1).sum();
        assert!((last[0] - w).abs() < 1e-14);
        assert!((last[2] - x[10]).abs() < 1e-14);
    }

    #[test]
    fn deterministic_execution_optimum() {
        let grid = TimeGrid::uniform(1.0, 50, 1).unwrap();
        let ex = ExecutionProblem {
            sigma: 0.0,
            ..ExecutionProblem::default()
        };
        let problem = ProblemSpec::execution(ex.clone()).unwrap();
        let (u, value) = crate::benchmark::twap(ex.q0, ex.x0, ex.kappa, ex.kappa_terminal, 1.0).unwrap();
        let mut policy = Policy::linear(2, 1, 1).unwrap();
        policy.params_mut()[0] = u;
        let zero = vec![0.0; 51];
        let stream = stream_signatures(grid.fine(), &zero, 1, grid.coarse(), 1).unwrap();
        let tr = simulate(&problem, &zero, &stream, &policy).unwrap();
        assert!((-tr.cost - value).abs() < 1e-12);
    }

    #[test]
    fn non_finite_state_reports_path_and_step() {
        let grid = TimeGrid::uniform(1.0, 10, 1).unwrap();
        let problem = ProblemSpec::tracking(0.0, 0.1).unwrap();
        let mut policy = Policy::linear(2, 1, 1).unwrap();
        policy.params_mut()[0] = f64::INFINITY;
        let path = PreparedPath {
            index: 17,
            driver: vec![0.0; 11],
            features: (0..11).flat_map(|j| [1.0, j as f64 * 0.1, 0.0]).collect(),
            increments: Vec::new(),
        };
        let err = run_path(&problem, grid.coarse(), &path, &policy, LoopMode::Open, false, false).unwrap_err();
        assert!(matches!(err, Error::Simulation { path: 17, step: 1, .. }));
    }

    #[test]
    fn closed_loop_zero_policy_matches_open_loop() {
        let (grid, sampler) = brownian_grid(16);
        let batch = sampler.sample_paths(1, 5).unwrap();
        let problem = ProblemSpec::tracking(0.2, 0.1).unwrap();
        let stream = stream_signatures(grid.fine(), batch.path(0), 1, grid.coarse(), 2).unwrap();
        let open = simulate(&problem, batch.path(0), &stream, &Policy::linear(2, 2, 1).unwrap()).unwrap();
        let closed =
            simulate_closed_loop(&problem, grid.coarse(), batch.path(0), &Policy::linear(2, 2, 1).unwrap()).unwrap();
        assert_eq!(open.y, closed.y);
        assert_eq!(open.cost, closed.cost);
    }

    #[test]
    fn closed_loop_level_one_reads_the_state() {
        // u = ⟨e_2, S^Y⟩ = Y_t − y0; compare with the recursion done by hand
        let (grid, sampler) = brownian_grid(12);
        let batch = sampler.sample_paths(1, 9).unwrap();
        let problem = ProblemSpec::tracking(0.5, 0.1).unwrap();
        let mut policy = Policy::linear(2, 3, 1).unwrap();
        policy.params_mut()[2] = -2.0;
        let tr = simulate_closed_loop(&problem, grid.coarse(), batch.path(0), &policy).unwrap();
        let dt = 1.0 / 12.0;
        let mut y = 0.5;
        for j in 0..12 {
            let u = -2.0 * (y - 0.5);
            assert!((tr.control(j)[0] - u).abs() < 1e-13);
            y += u * dt - (batch.path(0)[j + 1] - batch.path(0)[j]);
            assert!((tr.state(j + 1)[0] - y).abs() < 1e-13);
        }
    }

    #[test]
    fn closed_loop_deep_features_are_log_signature_coordinates() {
        let grid = TimeGrid::uniform(1.0, 6, 1).unwrap();
        let driver: Vec<f64> = (0..=6).map(|j| (j as f64 * 0.9).sin() * 0.3).collect();
        let problem = ProblemSpec::tracking(0.1, 0.1).unwrap();
        let opts = DeepOptions {
            hidden: Some(4),
            seed: 1,
            ..DeepOptions::default()
        };
        let policy = Policy::deep(2, 3, 1, &opts).unwrap();
        let tr = simulate_closed_loop(&problem, grid.coarse(), &driver, &policy).unwrap();
        // rebuild the state signature with f64 tensors and evaluate the policy directly
        let mut s = TruncatedTensor::one(2, 3);
        for j in 0..=6 {
            if j > 0 {
                s.mul_exp_increment(&[1.0 / 6.0, tr.state(j)[0] - tr.state(j - 1)[0]]);
            }
            let u = policy.eval(&s).unwrap()[0];
            assert!((tr.control(j)[0] - u).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_policy_cost_matches_discrete_expectation() {
        let (grid, sampler) = brownian_grid(50);
        let batch = sampler.sample_paths(4096, 0).unwrap();
        let problem = ProblemSpec::tracking(0.0, 0.1).unwrap();
        let est = batch_expected_cost(&problem, &grid, &batch, &init(PolicyKind::Linear, 2, 1, 1, 0).unwrap(), LoopMode::Open)
            .unwrap();
        // E[½ Σ ξ_{t_j}² Δt] = ½ Σ t_j Δt
        let exact: f64 = (1..=50).map(|j| 0.5 * j as f64 * 0.02 * 0.02).sum();
        assert!((est.mean - exact).abs() < 3.0 * est.std_error, "{est:?} vs {exact}");
    }

    #[test]
    fn constant_batch_has_zero_error() {
        let grid = TimeGrid::uniform(1.0, 10, 1).unwrap();
        let sampler = FbmSampler::new(0.5, grid.fine(), 1).unwrap();
        let batch = sampler.sample_paths(8, 0).unwrap().scale_shift(0.0, 0.0);
        let problem = ProblemSpec::tracking(1.0, 0.1).unwrap();
        let est = batch_expected_cost(&problem, &grid, &batch, &Policy::linear(2, 2, 1).unwrap(), LoopMode::Open).unwrap();
        assert_eq!(est.std_error, 0.0);
        assert!((est.mean - 1.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let (grid, sampler) = brownian_grid(20);
        let batch = sampler.sample_paths(200, 0).unwrap();
        let problem = ProblemSpec::tracking(0.0, 0.1).unwrap();
        let mut policy = Policy::linear(2, 2, 1).unwrap();
        policy.params_mut()[1] = 0.3;
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| batch_expected_cost(&problem, &grid, &batch, &policy, LoopMode::Open).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn milstein_oracle_improves_geometric_noise() {
        // dY = Y dX for a smooth driver: the exact solution is y0·exp(X_T − X_0)
        let sys = CustomSystem::new(
            vec![1.0],
            1,
            1,
            |_t, y, _u| vec![y[0].constant(0.0)],
            |y| vec![y[0]],
            |_t, y, _u| y[0].constant(0.0),
            |y| y[0],
        );
        let fine: Vec<f64> = (0..=40).map(|i| i as f64 / 40.0).collect();
        let values: Vec<f64> = fine.iter().map(|t| (3.0 * t).sin()).collect();
        let coarse: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).collect();
        let driver: Vec<f64> = (0..=8).map(|i| values[i * 5]).collect();
        let stream = stream_signatures(&fine, &values, 1, &coarse, 2).unwrap();
        let exact = (values[40] - values[0]).exp();
        let policy = Policy::linear(2, 1, 1).unwrap();
        let euler = simulate(&ProblemSpec::Custom(Arc::new(sys)), &driver, &stream, &policy).unwrap();
        let sys2 = CustomSystem::new(
            vec![1.0],
            1,
            1,
            |_t, y, _u| vec![y[0].constant(0.0)],
            |y| vec![y[0]],
            |_t, y, _u| y[0].constant(0.0),
            |y| y[0],
        )
        .with_second_order(|y| vec![y[0]]);
        let milstein = simulate(&ProblemSpec::Custom(Arc::new(sys2)), &driver, &stream, &policy).unwrap();
        let e1 = (euler.cost - exact).abs();
        let e2 = (milstein.cost - exact).abs();
        assert!(e2 < 0.2 * e1, "euler {e1}, milstein {e2}");
    }

    #[test]
    fn rejects_mismatched_policy() {
        let grid = TimeGrid::uniform(1.0, 4, 1).unwrap();
        let sampler = FbmSampler::new(0.5, grid.fine(), 1).unwrap();
        let batch = sampler.sample_paths(2, 0).unwrap();
        let problem = ProblemSpec::execution(ExecutionProblem::default()).unwrap();
        let policy = Policy::linear(2, 2, 1).unwrap();
        assert!(matches!(
            batch_expected_cost(&problem, &grid, &batch, &policy, LoopMode::Closed),
            Err(Error::Shape(_))
        ));
        assert!(ProblemSpec::tracking(0.0, 0.0).is_err());
    }
}
