//! Truncated tensor algebra `T^N(R^dim)`.
//!
//! Coefficients are stored densely, level by level. Within level `k` the word
//! `(i_1, ..., i_k)` (letters `0..dim`) lives at the base-`dim` index whose most
//! significant digit is `i_1`. Level 0 holds a single scalar.

mod lyndon;
mod shuffle;

pub use lyndon::{log_sig_coords, lyndon_basis, lyndon_words, LyndonBasis};
pub use shuffle::{shuffle, shuffle_words, MAX_ENTRIES};

use std::fmt::Write as _;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Tolerance on the level-0 entry for `exp` / `log` preconditions.
const UNIT_TOL: f64 = 1e-9;

/// Number of entries of `T^level(R^dim)`, i.e. `sum_{k=0..level} dim^k`.
pub fn total_len(dim: usize, level: usize) -> usize {
    (0..=level).map(|k| dim.pow(k as u32)).sum()
}

/// Offset of level `k` inside the flat coefficient vector.
pub fn level_offset(dim: usize, k: usize) -> usize {
    total_len(dim, k) - dim.pow(k as u32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedTensor {
    dim: usize,
    level: usize,
    coeffs: Vec<f64>,
}

impl TruncatedTensor {
    pub fn zeros(dim: usize, level: usize) -> Self {
        assert!(dim >= 1, "alphabet size must be positive");
        Self {
            dim,
            level,
            coeffs: vec![0.0; total_len(dim, level)],
        }
    }

    /// The unit `1 = (1, 0, 0, ...)`.
    pub fn one(dim: usize, level: usize) -> Self {
        let mut t = Self::zeros(dim, level);
        t.coeffs[0] = 1.0;
        t
    }

    pub fn from_coeffs(dim: usize, level: usize, coeffs: Vec<f64>) -> Result<Self> {
        if dim == 0 || coeffs.len() != total_len(dim, level) {
            return Err(Error::Shape(format!(
                "expected {} coefficients for dim={dim}, level={level}, got {}",
                total_len(dim, level),
                coeffs.len()
            )));
        }
        Ok(Self { dim, level, coeffs })
    }

    /// Pure level-1 element `sum_i x_i e_i`.
    pub fn from_level1(level: usize, x: &[f64]) -> Self {
        let mut t = Self::zeros(x.len(), level);
        if level >= 1 {
            t.level_mut(1).copy_from_slice(x);
        }
        t
    }

    /// Basis element `e_w` for a word of letters in `0..dim`.
    pub fn from_word(dim: usize, level: usize, word: &[usize], coeff: f64) -> Result<Self> {
        let mut t = Self::zeros(dim, level);
        t.set(word, coeff)?;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn scalar(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn level_slice(&self, k: usize) -> &[f64] {
        let off = level_offset(self.dim, k);
        &self.coeffs[off..off + self.dim.pow(k as u32)]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        let off = level_offset(self.dim, k);
        let n = self.dim.pow(k as u32);
        &mut self.coeffs[off..off + n]
    }

    /// Flat index of a word, or a shape error if a letter or the length is out of range.
    pub fn word_index(&self, word: &[usize]) -> Result<usize> {
        if word.len() > self.level {
            return Err(Error::Shape(format!(
                "word of length {} exceeds truncation level {}",
                word.len(),
                self.level
            )));
        }
        let mut idx = 0;
        for &letter in word {
            if letter >= self.dim {
                return Err(Error::Shape(format!(
                    "letter {letter} outside alphabet of size {}",
                    self.dim
                )));
            }
            idx = idx * self.dim + letter;
        }
        Ok(level_offset(self.dim, word.len()) + idx)
    }

    pub fn get(&self, word: &[usize]) -> Result<f64> {
        Ok(self.coeffs[self.word_index(word)?])
    }

    pub fn set(&mut self, word: &[usize], value: f64) -> Result<()> {
        let i = self.word_index(word)?;
        self.coeffs[i] = value;
        Ok(())
    }

    /// Copy with a different truncation level: higher levels are dropped or zero padded.
    pub fn with_level(&self, level: usize) -> Self {
        let mut out = Self::zeros(self.dim, level);
        let n = out.coeffs.len().min(self.coeffs.len());
        out.coeffs[..n].copy_from_slice(&self.coeffs[..n]);
        out
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.level != other.level {
            return Err(Error::Shape(format!(
                "(dim={}, level={}) vs (dim={}, level={})",
                self.dim, self.level, other.dim, other.level
            )));
        }
        Ok(())
    }

    /// Truncated tensor product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        let mut out = Self::zeros(self.dim, self.level);
        self.mul_into(other, &mut out)?;
        Ok(out)
    }

    /// Truncated tensor product written into `out` (which must not alias the inputs).
    pub fn mul_into(&self, other: &Self, out: &mut Self) -> Result<()> {
        self.check_same_shape(other)?;
        self.check_same_shape(out)?;
        let d = self.dim;
        out.coeffs.fill(0.0);
        for k in 0..=self.level {
            let off_k = level_offset(d, k);
            for j in 0..=k {
                let a = self.level_slice(j);
                let b = other.level_slice(k - j);
                let nb = b.len();
                for (ia, &av) in a.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let base = off_k + ia * nb;
                    for (o, &bv) in out.coeffs[base..base + nb].iter_mut().zip(b) {
                        *o += av * bv;
                    }
                }
            }
        }
        Ok(())
    }

    /// In-place Chen step `self <- self ⊗ exp(x)` for a level-1 increment `x`.
    ///
    /// Uses a Horner scheme per level so no powers of `x` are materialised.
    pub fn mul_exp_increment(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        let d = self.dim;
        let mut acc: Vec<f64> = Vec::with_capacity(d.pow(self.level as u32));
        let mut next: Vec<f64> = Vec::with_capacity(acc.capacity());
        for k in (1..=self.level).rev() {
            // acc <- ((S_0 x / k + S_1) x / (k-1) + ...) x / 1, then S_k += acc
            acc.clear();
            acc.push(self.coeffs[0]);
            for m in 1..=k {
                let scale = 1.0 / (k - m + 1) as f64;
                next.clear();
                for &a in &acc {
                    let a = a * scale;
                    next.extend(x.iter().map(|&xi| a * xi));
                }
                if m < k {
                    for (n, &s) in next.iter_mut().zip(self.level_slice(m)) {
                        *n += s;
                    }
                }
                std::mem::swap(&mut acc, &mut next);
            }
            for (s, a) in self.level_mut(k).iter_mut().zip(&acc) {
                *s += a;
            }
        }
    }

    /// Truncated exponential; requires a vanishing level-0 entry.
    pub fn exp(&self) -> Result<Self> {
        if self.coeffs[0].abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "exp needs level-0 entry 0, got {}",
                self.coeffs[0]
            )));
        }
        let mut r = Self::one(self.dim, self.level);
        let mut tmp = Self::zeros(self.dim, self.level);
        for n in (1..=self.level).rev() {
            self.mul_into(&r, &mut tmp)?;
            let inv = 1.0 / n as f64;
            for c in tmp.coeffs.iter_mut() {
                *c *= inv;
            }
            tmp.coeffs[0] += 1.0;
            std::mem::swap(&mut r, &mut tmp);
        }
        Ok(r)
    }

    /// Truncated logarithm; requires level-0 entry 1.
    pub fn log(&self) -> Result<Self> {
        if (self.coeffs[0] - 1.0).abs() > UNIT_TOL {
            return Err(Error::Domain(format!(
                "log needs level-0 entry 1, got {}",
                self.coeffs[0]
            )));
        }
        let mut x = self.clone();
        x.coeffs[0] = 0.0;
        if self.level == 0 {
            return Ok(x);
        }
        let coef = |n: usize| if n % 2 == 1 { 1.0 } else { -1.0 } / n as f64;
        let mut r = Self::zeros(self.dim, self.level);
        r.coeffs[0] = coef(self.level);
        let mut tmp = Self::zeros(self.dim, self.level);
        for n in (1..self.level).rev() {
            x.mul_into(&r, &mut tmp)?;
            tmp.coeffs[0] += coef(n);
            std::mem::swap(&mut r, &mut tmp);
        }
        x.mul_into(&r, &mut tmp)?;
        Ok(tmp)
    }

    /// Group inverse of a group-like element (`exp(-log g)`).
    pub fn inverse(&self) -> Result<Self> {
        (-&self.log()?).exp()
    }

    /// Largest absolute coefficient difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dim, other.dim);
        let n = self.coeffs.len().max(other.coeffs.len());
        (0..n)
            .map(|i| {
                let a = self.coeffs.get(i).copied().unwrap_or(0.0);
                let b = other.coeffs.get(i).copied().unwrap_or(0.0);
                (a - b).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn norm_inf(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Right concatenation of every word with `letter`: `w -> w·letter`, one level up.
    pub fn append_letter(&self, letter: usize) -> Result<Self> {
        if letter >= self.dim {
            return Err(Error::Shape(format!("letter {letter} outside alphabet")));
        }
        let mut out = Self::zeros(self.dim, self.level + 1);
        for k in 0..=self.level {
            let src = self.level_slice(k);
            let dst = out.level_mut(k + 1);
            for (i, &c) in src.iter().enumerate() {
                dst[i * self.dim + letter] = c;
            }
        }
        Ok(out)
    }

    /// Iterate `(word, coefficient)` in storage order.
    pub fn iter_words(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        (0..=self.level).flat_map(move |k| {
            self.level_slice(k)
                .iter()
                .enumerate()
                .map(move |(i, &c)| (decode_word(self.dim, k, i), c))
        })
    }

    /// CSV dump with columns `level,word,coefficient`.
    ///
    /// Words are written as 1-based letter digits (`e_1` is the first letter);
    /// the empty word is written as an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,word,coefficient\n");
        for (word, c) in self.iter_words() {
            let _ = writeln!(s, "{},{},{}", word.len(), word_string(&word), c);
        }
        s
    }

    /// Inverse of [`TruncatedTensor::to_csv`].
    pub fn from_csv(dim: usize, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut level = 0;
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Shape(format!("line {}: expected 3 fields", ln + 1)));
            }
            let word = parse_word(parts[1])?;
            let c: f64 = parts[2]
                .trim()
                .parse()
                .map_err(|_| Error::Shape(format!("line {}: bad coefficient", ln + 1)))?;
            level = level.max(word.len());
            entries.push((word, c));
        }
        let mut t = Self::zeros(dim, level);
        for (w, c) in entries {
            t.set(&w, c)?;
        }
        Ok(t)
    }
}

/// Letters of the word stored at `index` within level `k`.
pub fn decode_word(dim: usize, k: usize, mut index: usize) -> Vec<usize> {
    let mut w = vec![0; k];
    for slot in w.iter_mut().rev() {
        *slot = index % dim;
        index /= dim;
    }
    w
}

/// 1-based digit string of a word (dot separated when the alphabet exceeds 9 letters).
pub fn word_string(word: &[usize]) -> String {
    if word.iter().all(|&l| l < 9) {
        word.iter().map(|&l| char::from(b'1' + l as u8)).collect()
    } else {
        word.iter()
            .map(|l| (l + 1).to_string())
            .collect::<Vec<_>>()
            .join(".")
    }
}

pub fn parse_word(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let parse = |p: &str| -> Result<usize> {
        p.parse::<usize>()
            .ok()
            .filter(|&v| v >= 1)
            .map(|v| v - 1)
            .ok_or_else(|| Error::Shape(format!("bad word '{s}'")))
    };
    if s.contains('.') {
        s.split('.').map(parse).collect()
    } else {
        s.chars().map(|c| parse(&c.to_string())).collect()
    }
}

/// Pairing `<ell, g> = sum_k dot(ell_k, g_k)`; `ell` may be truncated lower than `g`.
pub fn pair(ell: &TruncatedTensor, g: &TruncatedTensor) -> Result<f64> {
    if ell.dim != g.dim {
        return Err(Error::Shape(format!("pairing dim {} vs {}", ell.dim, g.dim)));
    }
    if ell.level > g.level {
        return Err(Error::Shape(format!(
            "functional level {} exceeds element level {}",
            ell.level, g.level
        )));
    }
    Ok(ell
        .coeffs
        .iter()
        .zip(&g.coeffs)
        .map(|(a, b)| a * b)
        .sum())
}

impl Add for &TruncatedTensor {
    type Output = TruncatedTensor;
    fn add(self, rhs: Self) -> TruncatedTensor {
        self.check_same_shape(rhs).expect("tensor add");
        let coeffs = self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a + b).collect();
        TruncatedTensor { coeffs, ..*self }
    }
}

impl Sub for &TruncatedTensor {
    type Output = TruncatedTensor;
    fn sub(self, rhs: Self) -> TruncatedTensor {
        self.check_same_shape(rhs).expect("tensor sub");
        let coeffs = self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a - b).collect();
        TruncatedTensor { coeffs, ..*self }
    }
}

impl Add<&TruncatedTensor> for TruncatedTensor {
    type Output = TruncatedTensor;
    fn add(self, rhs: &TruncatedTensor) -> TruncatedTensor {
        &self + rhs
    }
}

impl Sub<&TruncatedTensor> for TruncatedTensor {
    type Output = TruncatedTensor;
    fn sub(self, rhs: &TruncatedTensor) -> TruncatedTensor {
        &self - rhs
    }
}

impl Neg for &TruncatedTensor {
    type Output = TruncatedTensor;
    fn neg(self) -> TruncatedTensor {
        TruncatedTensor {
            coeffs: self.coeffs.iter().map(|c| -c).collect(),
            ..*self
        }
    }
}

impl Mul<f64> for &TruncatedTensor {
    type Output = TruncatedTensor;
    fn mul(self, rhs: f64) -> TruncatedTensor {
        TruncatedTensor {
            coeffs: self.coeffs.iter().map(|c| c * rhs).collect(),
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(dim: usize, level: usize, word: &[usize]) -> TruncatedTensor {
        TruncatedTensor::from_word(dim, level, word, 1.0).unwrap()
    }

    #[test]
    fn layout_counts() {
        assert_eq!(total_len(2, 3), 15);
        assert_eq!(level_offset(2, 2), 3);
        assert_eq!(total_len(1, 4), 5);
        let t = TruncatedTensor::zeros(3, 2);
        assert_eq!(t.word_index(&[2, 1]).unwrap(), 4 + 2 * 3 + 1);
        assert_eq!(decode_word(3, 2, 7), vec![2, 1]);
    }

    #[test]
    fn product_of_unit_plus_letters() {
        let a = &TruncatedTensor::one(2, 2) + &e(2, 2, &[0]);
        let b = &TruncatedTensor::one(2, 2) + &e(2, 2, &[1]);
        let c = a.mul(&b).unwrap();
        let expected = &(&(&TruncatedTensor::one(2, 2) + &e(2, 2, &[0])) + &e(2, 2, &[1]))
            + &e(2, 2, &[0, 1]);
        assert_eq!(c, expected);
    }

    #[test]
    fn unit_is_identity() {
        let a = TruncatedTensor::from_coeffs(2, 2, (0..7).map(|i| i as f64 * 0.3 - 1.0).collect())
            .unwrap();
        assert_eq!(TruncatedTensor::one(2, 2).mul(&a).unwrap(), a);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = TruncatedTensor::zeros(2, 2);
        let b = TruncatedTensor::zeros(3, 2);
        assert!(matches!(a.mul(&b), Err(Error::Shape(_))));
        assert!(matches!(pair(&a, &b), Err(Error::Shape(_))));
        let c = TruncatedTensor::zeros(2, 3);
        assert!(matches!(pair(&c, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn exp_of_letter_by_hand() {
        let x = e(2, 2, &[0]).exp().unwrap();
        assert_eq!(x.coeffs(), &[1.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(TruncatedTensor::zeros(2, 3).exp().unwrap(), TruncatedTensor::one(2, 3));
        assert!(matches!(TruncatedTensor::one(2, 2).exp(), Err(Error::Domain(_))));
    }

    #[test]
    fn exp_additivity_along_a_line() {
        let a = e(2, 4, &[0]);
        let lhs = a.exp().unwrap().mul(&a.exp().unwrap()).unwrap();
        let rhs = (&a * 2.0).exp().unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-14);
        // exp(2 e1) level k = 2^k / k!
        assert!((rhs.get(&[0, 0, 0, 0]).unwrap() - 16.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn exp_matches_symmetrised_powers() {
        // exp(e1+e2) at level 3: each word of length k has coefficient 1/k!
        let x = (&e(2, 3, &[0]) + &e(2, 3, &[1])).exp().unwrap();
        for (w, c) in x.iter_words() {
            let fact: f64 = (1..=w.len()).map(|i| i as f64).product();
            assert!((c - 1.0 / fact).abs() < 1e-15, "{w:?}");
        }
    }

    #[test]
    fn log_by_hand() {
        let g = &TruncatedTensor::one(2, 2) + &e(2, 2, &[0]);
        let l = g.log().unwrap();
        assert_eq!(l.coeffs(), &[0.0, 1.0, 0.0, -0.5, 0.0, 0.0, 0.0]);
        assert_eq!(
            TruncatedTensor::one(3, 3).log().unwrap(),
            TruncatedTensor::zeros(3, 3)
        );
        assert!(matches!(TruncatedTensor::zeros(2, 2).log(), Err(Error::Domain(_))));
    }

    #[test]
    fn pairing_examples() {
        let g = (&e(2, 3, &[0]) + &e(2, 3, &[1])).exp().unwrap();
        assert_eq!(pair(&TruncatedTensor::one(2, 3), &g).unwrap(), 1.0);
        assert!((pair(&e(2, 2, &[0, 1]), &g).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chen_step_matches_full_product() {
        let mut s = (&e(3, 4, &[0]) * 0.3 + &(&e(3, 4, &[2, 1]) * -0.7))
            .exp()
            .unwrap();
        let x = [0.1, -0.4, 0.25];
        let full = s.mul(&TruncatedTensor::from_level1(4, &x).exp().unwrap()).unwrap();
        s.mul_exp_increment(&x);
        assert!(s.max_abs_diff(&full) < 1e-15);
    }

    #[test]
    fn append_letter_shifts_words() {
        let t = &TruncatedTensor::one(2, 1) + &(&e(2, 1, &[1]) * 3.0);
        let u = t.append_letter(0).unwrap();
        assert_eq!(u.level(), 2);
        assert_eq!(u.get(&[0]).unwrap(), 1.0);
        assert_eq!(u.get(&[1, 0]).unwrap(), 3.0);
        assert_eq!(u.scalar(), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let g = (&e(2, 3, &[0]) * 0.5 + &(&e(2, 3, &[1]) * -1.25)).exp().unwrap();
        let csv = g.to_csv();
        assert!(csv.starts_with("level,word,coefficient\n0,,1\n1,1,0.5\n1,2,-1.25\n"));
        assert_eq!(TruncatedTensor::from_csv(2, &csv).unwrap(), g);
    }
}
