//! Signature-parameterized controls.
//!
//! A [`Policy`] maps the truncated signature `S` of a time-augmented path to a
//! control in `U`: either `(⟨ℓ_i, S⟩)_i` (linear) or an MLP applied to the
//! Lyndon log-signature coordinates of `S` (deep), followed by the projection
//! onto `U`.
//!
//! Evaluation is batched: a block of feature rows (one per time step, possibly
//! many paths) is pushed through the policy at once, and the matching
//! vector–Jacobian products give parameter and input gradients.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{log_sig_coords, parse_word, total_len, word_string, LyndonBasis, TruncatedTensor};

/// Closed convex control set.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Unbounded,
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Projection {
    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Config("box bounds of different length".into()));
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i])) {
            return Err(Error::Config(format!(
                "box bound {i}: lo {} exceeds hi {}",
                lo[i], hi[i]
            )));
        }
        Ok(Projection::Box { lo, hi })
    }

    /// Clamp `v` in place; returns the derivative mask (1 inside, 0 where clamped).
    pub fn apply(&self, v: &mut [f64]) -> Vec<f64> {
        match self {
            Projection::Unbounded => vec![1.0; v.len()],
            Projection::Box { lo, hi } => v
                .iter_mut()
                .enumerate()
                .map(|(i, x)| {
                    let j = i % lo.len();
                    if *x < lo[j] {
                        *x = lo[j];
                        0.0
                    } else if *x > hi[j] {
                        *x = hi[j];
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect(),
        }
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.apply(&mut out);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Linear,
    Deep,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "lin" => Ok(PolicyKind::Linear),
            "deep" | "dnn" => Ok(PolicyKind::Deep),
            other => Err(Error::Config(format!("unknown policy kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyKind::Linear => "linear",
            PolicyKind::Deep => "deep",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepOptions {
    /// Hidden width `q`; `None` means `30 + η`.
    pub hidden: Option<usize>,
    /// Number of hidden layers `I`.
    pub depth: usize,
    pub seed: u64,
    /// Start from all-zero weights (the output is then `P_U(bias) = P_U(0)`).
    pub zero_weights: bool,
    /// Per-coordinate multiplier applied to the log-signature input.
    pub input_scale: Option<Vec<f64>>,
}

impl Default for DeepOptions {
    fn default() -> Self {
        Self {
            hidden: None,
            depth: 2,
            seed: 0,
            zero_weights: false,
            input_scale: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    /// Row `i` of `coeffs` is `ℓ_i`, length `total_len(dim, level)`.
    Linear { coeffs: Vec<f64> },
    Deep {
        basis: LyndonBasis,
        /// `[η, q, ..., q, k]`
        widths: Vec<usize>,
        scale: Vec<f64>,
        /// Per layer: weights (out × in, row-major) followed by biases.
        params: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    dim: usize,
    level: usize,
    controls: usize,
    body: Body,
    projection: Projection,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    rows: usize,
    /// Inputs to each layer (deep only).
    acts: Vec<Vec<f64>>,
}

/// Build a policy of the given kind with default options.
pub fn init(kind: PolicyKind, dim: usize, level: usize, controls: usize, seed: u64) -> Result<Policy> {
    match kind {
        PolicyKind::Linear => Policy::linear(dim, level, controls),
        PolicyKind::Deep => Policy::deep(
            dim,
            level,
            controls,
            &DeepOptions {
                seed,
                ..DeepOptions::default()
            },
        ),
    }
}

impl Policy {
    /// Linear policy with all coefficients zero.
    pub fn linear(dim: usize, level: usize, controls: usize) -> Result<Self> {
        check_dims(dim, level, controls)?;
        Ok(Self {
            dim,
            level,
            controls,
            body: Body::Linear {
                coeffs: vec![0.0; controls * total_len(dim, level)],
            },
            projection: Projection::Unbounded,
        })
    }

    /// MLP on log-signature coordinates, `η → q → ... → q → k` with ReLU.
    ///
    /// Weights are uniform on `±1/sqrt(fan_in)`, biases zero.
    pub fn deep(dim: usize, level: usize, controls: usize, opts: &DeepOptions) -> Result<Self> {
        check_dims(dim, level, controls)?;
        let basis = LyndonBasis::new(dim, level)?;
        let eta = basis.size();
        let q = opts.hidden.unwrap_or(30 + eta);
        if q == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        let mut widths = vec![eta];
        widths.extend(std::iter::repeat(q).take(opts.depth));
        widths.push(controls);
        let scale = match &opts.input_scale {
            Some(s) if s.len() != eta => {
                return Err(Error::Config(format!("input scale needs {eta} entries, got {}", s.len())))
            }
            Some(s) => s.clone(),
            None => vec![1.0; eta],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut params = Vec::new();
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(if opts.zero_weights {
                    0.0
                } else {
                    rng.gen_range(-bound..bound)
                });
            }
            params.extend(std::iter::repeat(0.0).take(w[1]));
        }
        Ok(Self {
            dim,
            level,
            controls,
            body: Body::Deep {
                basis,
                widths,
                scale,
                params,
            },
            projection: Projection::Unbounded,
        })
    }

    pub fn with_projection(mut self, projection: Projection) -> Result<Self> {
        if let Projection::Box { lo, .. } = &projection {
            if lo.len() != self.controls {
                return Err(Error::Config(format!(
                    "projection has {} bounds for {} controls",
                    lo.len(),
                    self.controls
                )));
            }
        }
        self.projection = projection;
        Ok(self)
    }

    pub fn kind(&self) -> PolicyKind {
        match self.body {
            Body::Linear { .. } => PolicyKind::Linear,
            Body::Deep { .. } => PolicyKind::Deep,
        }
    }

    /// Alphabet size of the signatures consumed (time plus path coordinates).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn controls(&self) -> usize {
        self.controls
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    /// Layer widths of a deep policy.
    pub fn widths(&self) -> Option<&[usize]> {
        match &self.body {
            Body::Deep { widths, .. } => Some(widths),
            Body::Linear { .. } => None,
        }
    }

    /// Lyndon basis of a deep policy's inputs.
    pub fn basis(&self) -> Option<&LyndonBasis> {
        match &self.body {
            Body::Deep { basis, .. } => Some(basis),
            Body::Linear { .. } => None,
        }
    }

    /// Length of a feature row.
    pub fn input_len(&self) -> usize {
        match &self.body {
            Body::Linear { .. } => total_len(self.dim, self.level),
            Body::Deep { basis, .. } => basis.size(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match &self.body {
            Body::Linear { coeffs } => coeffs,
            Body::Deep { params, .. } => params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match &mut self.body {
            Body::Linear { coeffs } => coeffs,
            Body::Deep { params, .. } => params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let p = self.params_mut();
        if p.len() != values.len() {
            return Err(Error::Shape(format!("{} parameters, got {}", p.len(), values.len())));
        }
        p.copy_from_slice(values);
        Ok(())
    }

    /// Coefficient tensor `ℓ_i` of a linear policy.
    pub fn functional(&self, control: usize) -> Option<TruncatedTensor> {
        match &self.body {
            Body::Linear { coeffs } => {
                let n = total_len(self.dim, self.level);
                TruncatedTensor::from_coeffs(self.dim, self.level, coeffs[control * n..(control + 1) * n].to_vec())
                    .ok()
            }
            Body::Deep { .. } => None,
        }
    }

    /// Feature row of a signature: its truncated coefficients (linear) or Lyndon
    /// log-signature coordinates (deep).
    pub fn features(&self, sig: &TruncatedTensor) -> Result<Vec<f64>> {
        if sig.dim() != self.dim || sig.level() < self.level {
            return Err(Error::Shape(format!(
                "policy (dim={}, level={}) cannot read a signature with dim={}, level={}",
                self.dim,
                self.level,
                sig.dim(),
                sig.level()
            )));
        }
        match &self.body {
            Body::Linear { .. } => Ok(sig.coeffs()[..total_len(self.dim, self.level)].to_vec()),
            Body::Deep { basis, .. } => log_sig_coords(sig, basis),
        }
    }

    /// Raw (pre-projection) outputs for `rows` feature rows, row-major `rows × k`.
    pub fn forward(&self, x: &[f64], rows: usize, cache: &mut ForwardCache) -> Vec<f64> {
        let nin = self.input_len();
        assert_eq!(x.len(), rows * nin, "feature block shape");
        cache.rows = rows;
        cache.acts.clear();
        match &self.body {
            Body::Linear { coeffs } => {
                let mut out = vec![0.0; rows * self.controls];
                gemm(rows, nin, self.controls, x, (nin, 1), coeffs, (1, nin), &mut out, 0.0);
                out
            }
            Body::Deep {
                widths,
                scale,
                params,
                ..
            } => {
                let mut a: Vec<f64> = x
                    .chunks(nin)
                    .flat_map(|r| r.iter().zip(scale).map(|(v, s)| v * s))
                    .collect();
                let mut off = 0;
                let last = widths.len() - 2;
                for (l, w) in widths.windows(2).enumerate() {
                    let (wi, wo) = (w[0], w[1]);
                    let weights = &params[off..off + wi * wo];
                    let bias = &params[off + wi * wo..off + wi * wo + wo];
                    off += wi * wo + wo;
                    let mut z: Vec<f64> = bias.iter().copied().cycle().take(rows * wo).collect();
                    gemm(rows, wi, wo, &a, (wi, 1), weights, (1, wi), &mut z, 1.0);
                    if l < last {
                        for v in z.iter_mut() {
                            *v = v.max(0.0);
                        }
                    }
                    cache.acts.push(std::mem::replace(&mut a, z));
                }
                a
            }
        }
    }

    /// Accumulate `grad += (∂ out / ∂ params)ᵀ dout` for the rows of the last forward pass.
    pub fn backward_params(&self, x: &[f64], cache: &ForwardCache, dout: &[f64], grad: &mut [f64]) {
        let rows = cache.rows;
        assert_eq!(dout.len(), rows * self.controls, "output adjoint shape");
        assert_eq!(grad.len(), self.num_params(), "gradient shape");
        match &self.body {
            Body::Linear { .. } => {
                let nin = self.input_len();
                // dL = doutᵀ X
                gemm(self.controls, rows, nin, dout, (1, self.controls), x, (nin, 1), grad, 1.0);
            }
            Body::Deep { .. } => {
                self.deep_backward(cache, dout, Some(grad));
            }
        }
    }

    /// Input adjoint `(∂ out / ∂ x)ᵀ dout`, row-major `rows × input_len`.
    pub fn backward_input(&self, cache: &ForwardCache, dout: &[f64]) -> Vec<f64> {
        let rows = cache.rows;
        match &self.body {
            Body::Linear { coeffs } => {
                let nin = self.input_len();
                let mut dx = vec![0.0; rows * nin];
                gemm(rows, self.controls, nin, dout, (self.controls, 1), coeffs, (nin, 1), &mut dx, 0.0);
                dx
            }
            Body::Deep { scale, .. } => {
                let mut dx = self.deep_backward(cache, dout, None);
                let n = scale.len();
                for (i, v) in dx.iter_mut().enumerate() {
                    *v *= scale[i % n];
                }
                dx
            }
        }
    }

    /// Backward sweep through the MLP; returns the adjoint of the scaled input.
    fn deep_backward(&self, cache: &ForwardCache, dout: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let Body::Deep { widths, params, .. } = &self.body else {
            unreachable!()
        };
        let rows = cache.rows;
        let mut offsets = Vec::with_capacity(widths.len());
        let mut off = 0;
        for w in widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = dout.to_vec();
        for l in (0..widths.len() - 1).rev() {
            let (wi, wo) = (widths[l], widths[l + 1]);
            let a = &cache.acts[l];
            let off = offsets[l];
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g[off..off + wi * wo + wo].split_at_mut(wi * wo);
                gemm(wo, rows, wi, &delta, (1, wo), a, (wi, 1), gw, 1.0);
                for r in delta.chunks(wo) {
                    for (b, d) in gb.iter_mut().zip(r) {
                        *b += d;
                    }
                }
            }
            let weights = &params[off..off + wi * wo];
            let mut prev = vec![0.0; rows * wi];
            gemm(rows, wo, wi, &delta, (wo, 1), weights, (wi, 1), &mut prev, 0.0);
            if l > 0 {
                for (p, &av) in prev.iter_mut().zip(a) {
                    if av <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// Projected control for one signature.
    pub fn eval(&self, sig: &TruncatedTensor) -> Result<Vec<f64>> {
        let x = self.features(sig)?;
        let mut cache = ForwardCache::default();
        let mut u = self.forward(&x, 1, &mut cache);
        self.projection.apply(&mut u);
        Ok(u)
    }

    /// Flat key–value text form (see [`Policy::from_text`]).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind = {}", self.kind());
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "level = {}", self.level);
        let _ = writeln!(s, "controls = {}", self.controls);
        match &self.projection {
            Projection::Unbounded => {
                let _ = writeln!(s, "projection = unbounded");
            }
            Projection::Box { lo, hi } => {
                let _ = writeln!(s, "projection = box");
                let _ = writeln!(s, "lo = {}", join(lo));
                let _ = writeln!(s, "hi = {}", join(hi));
            }
        }
        match &self.body {
            Body::Linear { coeffs } => {
                let n = total_len(self.dim, self.level);
                let words = TruncatedTensor::zeros(self.dim, self.level);
                for i in 0..self.controls {
                    for (j, (w, _)) in words.iter_words().enumerate() {
                        let _ = writeln!(s, "coef.{}.e{} = {:?}", i + 1, word_string(&w), coeffs[i * n + j]);
                    }
                }
            }
            Body::Deep {
                widths,
                scale,
                params,
                ..
            } => {
                let _ = writeln!(s, "widths = {}", join(widths));
                let _ = writeln!(s, "scale = {}", join(scale));
                let mut off = 0;
                for (l, w) in widths.windows(2).enumerate() {
                    for r in 0..w[1] {
                        for c in 0..w[0] {
                            let _ = writeln!(s, "layer.{l}.weight.{r}.{c} = {:?}", params[off + r * w[0] + c]);
                        }
                    }
                    off += w[0] * w[1];
                    for r in 0..w[1] {
                        let _ = writeln!(s, "layer.{l}.bias.{r} = {:?}", params[off + r]);
                    }
                    off += w[1];
                }
            }
        }
        s
    }

    /// Parse the output of [`Policy::to_text`]; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("policy line {}: expected key = value", ln + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| -> Result<String> {
            kv.remove(k)
                .ok_or_else(|| Error::Config(format!("policy file lacks '{k}'")))
        };
        let kind: PolicyKind = take("kind")?.parse()?;
        let dim = parse_num::<usize>(&take("dim")?, "dim")?;
        let level = parse_num::<usize>(&take("level")?, "level")?;
        let controls = parse_num::<usize>(&take("controls")?, "controls")?;
        let projection = match take("projection")?.as_str() {
            "unbounded" => Projection::Unbounded,
            "box" => Projection::boxed(parse_list(&take("lo")?)?, parse_list(&take("hi")?)?)?,
            other => return Err(Error::Config(format!("unknown projection '{other}'"))),
        };
        let mut policy = match kind {
            PolicyKind::Linear => {
                let mut p = Policy::linear(dim, level, controls)?;
                let n = total_len(dim, level);
                let probe = TruncatedTensor::zeros(dim, level);
                let mut values = vec![0.0; controls * n];
                for i in 0..controls {
                    for (j, (w, _)) in probe.iter_words().enumerate() {
                        let key = format!("coef.{}.e{}", i + 1, word_string(&w));
                        values[i * n + j] = parse_num(&take(&key)?, &key)?;
                    }
                }
                p.set_params(&values)?;
                p
            }
            PolicyKind::Deep => {
                let widths: Vec<usize> = take("widths")?
                    .split(',')
                    .map(|v| parse_num::<usize>(v, "widths"))
                    .collect::<Result<_>>()?;
                if widths.len() < 2 || widths[widths.len() - 1] != controls {
                    return Err(Error::Config("widths must end with the control count".into()));
                }
                let opts = DeepOptions {
                    hidden: widths.get(1).copied().filter(|_| widths.len() > 2),
                    depth: widths.len() - 2,
                    seed: 0,
                    zero_weights: true,
                    input_scale: Some(parse_list(&take("scale")?)?),
                };
                let mut p = Policy::deep(dim, level, controls, &opts)?;
                if p.widths() != Some(widths.as_slice()) {
                    return Err(Error::Config(format!(
                        "widths {:?} do not match dim {dim}, level {level}",
                        widths
                    )));
                }
                let mut values = Vec::with_capacity(p.num_params());
                for (l, w) in widths.windows(2).enumerate() {
                    for r in 0..w[1] {
                        for c in 0..w[0] {
                            let key = format!("layer.{l}.weight.{r}.{c}");
                            values.push(parse_num(&take(&key)?, &key)?);
                        }
                    }
                    for r in 0..w[1] {
                        let key = format!("layer.{l}.bias.{r}");
                        values.push(parse_num(&take(&key)?, &key)?);
                    }
                }
                p.set_params(&values)?;
                p
            }
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown policy key '{k}'")));
        }
        policy = policy.with_projection(projection)?;
        Ok(policy)
    }

    /// Linear policy from explicit coefficient tensors, one per control.
    pub fn from_functionals(ells: &[TruncatedTensor]) -> Result<Self> {
        let first = ells
            .first()
            .ok_or_else(|| Error::Config("need at least one functional".into()))?;
        let mut p = Policy::linear(first.dim(), first.level(), ells.len())?;
        let mut values = Vec::with_capacity(p.num_params());
        for l in ells {
            if l.dim() != first.dim() || l.level() != first.level() {
                return Err(Error::Shape("functionals of differing shape".into()));
            }
            values.extend_from_slice(l.coeffs());
        }
        p.set_params(&values)?;
        Ok(p)
    }
}

fn check_dims(dim: usize, level: usize, controls: usize) -> Result<()> {
    if dim < 1 || level < 1 || controls < 1 {
        return Err(Error::Config(format!(
            "policy needs dim, level, controls >= 1 (got {dim}, {level}, {controls})"
        )));
    }
    Ok(())
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{s}' for '{key}'")))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| parse_num(v, "list")).collect()
}

/// Parse a word label such as `e12` (the empty word is `e`).
pub fn parse_word_label(label: &str) -> Result<Vec<usize>> {
    let rest = label
        .strip_prefix('e')
        .ok_or_else(|| Error::Config(format!("word label '{label}' must start with 'e'")))?;
    parse_word(rest)
}

/// `c = beta·c + A·B` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: usize, cl: usize, rs: usize, cs: usize| (r - 1) * rs + (cl - 1) * cs + 1;
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    // SAFETY: the asserts above keep every strided access inside the slices, and `c`
    // is a distinct mutable borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
