//! Experiment configuration files.
//!
//! One `key = value` per line; `#` starts a comment. Lists are comma separated.
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::dynamics::{ExecutionProblem, LoopMode, ProblemSpec};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, TrainConfig};
use crate::policy::PolicyKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    Tracking,
    Execution,
}

impl FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tracking" => Ok(ProblemKind::Tracking),
            "execution" => Ok(ProblemKind::Execution),
            other => Err(Error::Config(format!("unknown problem '{other}' (tracking, execution)"))),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::Tracking => "tracking",
            ProblemKind::Execution => "execution",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataMode {
    /// A fixed pool of `train_paths` paths, cycled in minibatches.
    Fixed,
    /// New paths every iteration.
    Fresh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub hurst: Vec<f64>,
    pub policy: PolicyKind,
    pub level: Vec<usize>,
    pub loop_mode: LoopMode,
    pub horizon: f64,
    pub dt: f64,
    pub refine: usize,
    pub data: DataMode,
    pub train_paths: usize,
    pub test_paths: usize,
    pub batch_size: usize,
    pub iterations: usize,
    /// Defaults to 1e-2 for linear and 1e-3 for deep policies.
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub hidden: Option<usize>,
    pub eval_every: usize,
    pub eval_paths: usize,
    pub seed: u64,
    pub y0: f64,
    /// Defaults to 0.1 for tracking and 0.001 for execution.
    pub kappa: Option<f64>,
    pub kappa_terminal: f64,
    pub q0: f64,
    pub x0: f64,
    pub sigma: f64,
    pub output: Option<String>,
    pub curve: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKind::Tracking,
            hurst: vec![0.5],
            policy: PolicyKind::Linear,
            level: vec![3],
            loop_mode: LoopMode::Open,
            horizon: 1.0,
            dt: 0.01,
            refine: 1,
            data: DataMode::Fixed,
            train_paths: 1 << 13,
            test_paths: 1 << 14,
            batch_size: 1 << 10,
            iterations: 2000,
            lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            hidden: None,
            eval_every: 100,
            eval_paths: 1 << 10,
            seed: 0,
            y0: 0.0,
            kappa: None,
            kappa_terminal: 0.1,
            q0: 1.0,
            x0: 1.0,
            sigma: 0.02,
            output: None,
            curve: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "problem",
    "hurst",
    "policy",
    "level",
    "loop",
    "horizon",
    "dt",
    "refine",
    "data",
    "train_paths",
    "test_paths",
    "batch_size",
    "iterations",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "hidden",
    "eval_every",
    "eval_paths",
    "seed",
    "y0",
    "kappa",
    "kappa_terminal",
    "q0",
    "x0",
    "sigma",
    "output",
    "curve",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let v: Vec<T> = value.split(',').map(|s| num(key, s)).collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(v)
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "default" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply the settings in `text` on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                    other => other,
                })?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "problem" => self.problem = value.parse()?,
            "hurst" => self.hurst = list(key, value)?,
            "policy" => self.policy = value.parse()?,
            "level" => self.level = list(key, value)?,
            "loop" => {
                self.loop_mode = match value {
                    "open" => LoopMode::Open,
                    "closed" => LoopMode::Closed,
                    _ => return Err(Error::Config(format!("loop: expected open or closed, got '{value}'"))),
                }
            }
            "horizon" => self.horizon = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "refine" => self.refine = num(key, value)?,
            "data" => {
                self.data = match value {
                    "fixed" => DataMode::Fixed,
                    "fresh" => DataMode::Fresh,
                    _ => return Err(Error::Config(format!("data: expected fixed or fresh, got '{value}'"))),
                }
            }
            "train_paths" => self.train_paths = num(key, value)?,
            "test_paths" => self.test_paths = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "lr" => self.lr = optional(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "hidden" => self.hidden = optional(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "eval_paths" => self.eval_paths = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "y0" => self.y0 = num(key, value)?,
            "kappa" => self.kappa = optional(key, value)?,
            "kappa_terminal" => self.kappa_terminal = num(key, value)?,
            "q0" => self.q0 = num(key, value)?,
            "x0" => self.x0 = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "output" => self.output = (!value.is_empty()).then(|| value.to_string()),
            "curve" => self.curve = (!value.is_empty()).then(|| value.to_string()),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.horizon > 0.0) || !(self.dt > 0.0) {
            return bad(format!("horizon and dt must be positive (got {}, {})", self.horizon, self.dt));
        }
        let steps = (self.horizon / self.dt).round();
        if (steps * self.dt - self.horizon).abs() > 1e-12 || steps < 1.0 {
            return bad(format!("dt = {} does not divide the horizon {}", self.dt, self.horizon));
        }
        if self.hurst.iter().any(|h| !(*h > 0.0 && *h < 1.0)) {
            return bad(format!("hurst values must lie in (0, 1), got {:?}", self.hurst));
        }
        if self.level.iter().any(|&n| n == 0) {
            return bad("level must be at least 1".into());
        }
        if self.refine == 0 || self.train_paths == 0 || self.test_paths == 0 || self.batch_size == 0 {
            return bad("refine, train_paths, test_paths and batch_size must be at least 1".into());
        }
        if self.kappa.is_some_and(|k| !(k > 0.0)) || !(self.kappa_terminal >= 0.0) {
            return bad("kappa must be positive and kappa_terminal non-negative".into());
        }
        self.adam(self.policy).validate()
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(match self.problem {
            ProblemKind::Tracking => 0.1,
            ProblemKind::Execution => 0.001,
        })
    }

    pub fn execution(&self) -> ExecutionProblem {
        ExecutionProblem {
            q0: self.q0,
            x0: self.x0,
            kappa: self.kappa(),
            kappa_terminal: self.kappa_terminal,
            sigma: self.sigma,
        }
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        match self.problem {
            ProblemKind::Tracking => ProblemSpec::tracking(self.y0, self.kappa()),
            ProblemKind::Execution => ProblemSpec::execution(self.execution()),
        }
    }

    fn adam(&self, kind: PolicyKind) -> AdamConfig {
        let lr = self.lr.unwrap_or(match kind {
            PolicyKind::Linear => 1e-2,
            PolicyKind::Deep => 1e-3,
        });
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Training settings for one `(H, N)` cell.
    pub fn train_config(&self, hurst: f64, level: usize) -> TrainConfig {
        let mut t = TrainConfig::new(self.policy);
        t.hurst = hurst;
        t.horizon = self.horizon;
        t.n_steps = self.n_steps();
        t.refine = self.refine;
        t.level = level;
        t.mode = self.loop_mode;
        t.hidden = self.hidden;
        t.adam = self.adam(self.policy);
        t.iterations = self.iterations;
        t.batch_size = self.batch_size;
        t.train_paths = match self.data {
            DataMode::Fixed => Some(self.train_paths),
            DataMode::Fresh => None,
        };
        t.test_paths = self.test_paths;
        t.eval_every = self.eval_every;
        t.eval_paths = self.eval_paths;
        t.seed = self.seed;
        t
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "default".into());
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("problem", self.problem.to_string());
        kv("hurst", join(&self.hurst));
        kv("policy", self.policy.to_string());
        kv("level", join(&self.level));
        kv(
            "loop",
            match self.loop_mode {
                LoopMode::Open => "open",
                LoopMode::Closed => "closed",
            }
            .into(),
        );
        kv("horizon", self.horizon.to_string());
        kv("dt", self.dt.to_string());
        kv("refine", self.refine.to_string());
        kv(
            "data",
            match self.data {
                DataMode::Fixed => "fixed",
                DataMode::Fresh => "fresh",
            }
            .into(),
        );
        kv("train_paths", self.train_paths.to_string());
        kv("test_paths", self.test_paths.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("iterations", self.iterations.to_string());
        kv("lr", opt(self.lr.map(|v| v.to_string())));
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("hidden", opt(self.hidden.map(|v| v.to_string())));
        kv("eval_every", self.eval_every.to_string());
        kv("eval_paths", self.eval_paths.to_string());
        kv("seed", self.seed.to_string());
        kv("y0", self.y0.to_string());
        kv("kappa", opt(self.kappa.map(|v| v.to_string())));
        kv("kappa_terminal", self.kappa_terminal.to_string());
        kv("q0", self.q0.to_string());
        kv("x0", self.x0.to_string());
        kv("sigma", self.sigma.to_string());
        kv("output", self.output.clone().unwrap_or_default());
        kv("curve", self.curve.clone().unwrap_or_default());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let cfg = ExperimentConfig::parse(
            "# execution table\nproblem = execution\nhurst = 0.0625, 0.5  # two columns\nlevel=1,2\n\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.problem, ProblemKind::Execution);
        assert_eq!(cfg.hurst, vec![0.0625, 0.5]);
        assert_eq!(cfg.level, vec![1, 2]);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.kappa(), 0.001);
        assert_eq!(cfg.n_steps(), 100);
    }

    #[test]
    fn round_trip_is_idempotent() {
        let mut cfg = ExperimentConfig::parse("policy = deep\nhidden = 12\nlr = 0.003\ndt = 0.02\noutput = out.csv\n").unwrap();
        cfg.hurst = vec![0.1, 0.3];
        let text = cfg.to_text();
        let again = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), text);
        for key in KEYS {
            assert!(text.contains(&format!("{key} =")), "{key}");
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = ExperimentConfig::parse("hurst = 0.5\nlearning_rate = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("learning_rate"), "{e}");
        assert!(ExperimentConfig::parse("dt = 0.03").is_err());
        assert!(ExperimentConfig::parse("level = 0").is_err());
        assert!(ExperimentConfig::parse("hurst = 1.0").is_err());
        assert!(ExperimentConfig::parse("test_paths = 0").is_err());
        assert!(ExperimentConfig::parse("just words").is_err());
        assert!(ExperimentConfig::parse("problem = tracking\ndt = 0.001").is_ok());
    }
}
