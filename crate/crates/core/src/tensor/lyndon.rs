//! Lyndon words and coordinates of the free nilpotent Lie algebra.
//!
//! Each Lyndon word `w` of length > 1 is bracketed along its standard
//! factorisation `w = uv` (`v` the longest proper Lyndon suffix):
//! `P_w = [P_u, P_v] = P_u P_v - P_v P_u`. The expansion of `P_w` is `w` plus
//! lexicographically larger words of the same length, so log-signature
//! coordinates follow from a triangular sweep over each level.

use super::TruncatedTensor;
use crate::error::{Error, Result};

/// Lyndon words of length `1..=level` over `0..dim`, in lexicographic order (Duval).
pub fn lyndon_words(dim: usize, level: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if dim == 0 || level == 0 {
        return out;
    }
    let mut w: Vec<usize> = vec![0];
    loop {
        out.push(w.clone());
        let m = w.len();
        while w.len() < level {
            w.push(w[w.len() - m]);
        }
        while w.last() == Some(&(dim - 1)) {
            w.pop();
        }
        match w.last_mut() {
            Some(last) => *last += 1,
            None => break,
        }
    }
    out
}

/// Index of the right factor in the standard factorisation of a Lyndon word.
fn standard_split(word: &[usize]) -> usize {
    // the longest proper suffix that is Lyndon is the lexicographically smallest one
    (1..word.len())
        .min_by(|&i, &j| word[i..].cmp(&word[j..]))
        .expect("word of length >= 2")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LyndonBasis {
    dim: usize,
    level: usize,
    words: Vec<Vec<usize>>,
    /// Sparse expansion of each bracket `P_w` as `(index within level |w|, coefficient)`.
    expansions: Vec<Vec<(usize, f64)>>,
}

pub fn lyndon_basis(dim: usize, level: usize) -> Result<LyndonBasis> {
    LyndonBasis::new(dim, level)
}

impl LyndonBasis {
    pub fn new(dim: usize, level: usize) -> Result<Self> {
        if dim < 2 || level < 1 {
            return Err(Error::Domain(format!(
                "Lyndon basis needs dim >= 2 and level >= 1 (got {dim}, {level})"
            )));
        }
        let words = lyndon_words(dim, level);
        // factors are shorter than the word, so build bracket expansions by increasing length
        let mut order: Vec<usize> = (0..words.len()).collect();
        order.sort_by_key(|&i| words[i].len());
        let mut dense: Vec<Vec<f64>> = vec![Vec::new(); words.len()];
        for i in order {
            let w = &words[i];
            let k = w.len();
            let mut coeffs = vec![0.0; dim.pow(k as u32)];
            if k == 1 {
                coeffs[w[0]] = 1.0;
            } else {
                let split = standard_split(w);
                let left = &dense[position(&words, &w[..split])];
                let right = &dense[position(&words, &w[split..])];
                let nr = right.len();
                let nl = left.len();
                for (a_idx, &a) in left.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (b_idx, &b) in right.iter().enumerate() {
                        coeffs[a_idx * nr + b_idx] += a * b;
                        coeffs[b_idx * nl + a_idx] -= a * b;
                    }
                }
            }
            dense[i] = coeffs;
        }
        let expansions = dense
            .into_iter()
            .map(|c| {
                c.into_iter()
                    .enumerate()
                    .filter(|(_, v)| *v != 0.0)
                    .collect()
            })
            .collect();
        Ok(Self {
            dim,
            level,
            words,
            expansions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn words(&self) -> &[Vec<usize>] {
        &self.words
    }

    /// Dimension of the step-`level` free nilpotent Lie algebra.
    pub fn size(&self) -> usize {
        self.words.len()
    }

    /// Expand `sum_w c_w P_w` into the tensor algebra (level 0 is zero).
    pub fn lie_element(&self, coords: &[f64]) -> Result<TruncatedTensor> {
        if coords.len() != self.size() {
            return Err(Error::Shape(format!(
                "expected {} Lie coordinates, got {}",
                self.size(),
                coords.len()
            )));
        }
        let mut t = TruncatedTensor::zeros(self.dim, self.level);
        for ((w, exp), &c) in self.words.iter().zip(&self.expansions).zip(coords) {
            let lvl = t.level_mut(w.len());
            for &(i, v) in exp {
                lvl[i] += c * v;
            }
        }
        Ok(t)
    }

    /// Coordinates of a Lie element (level-0 entry ignored) in this basis.
    pub fn coords_of_lie(&self, lie: &TruncatedTensor) -> Result<Vec<f64>> {
        if lie.dim() != self.dim || lie.level() < self.level {
            return Err(Error::Shape(format!(
                "Lie element (dim={}, level={}) incompatible with basis (dim={}, level={})",
                lie.dim(),
                lie.level(),
                self.dim,
                self.level
            )));
        }
        let mut coords = vec![0.0; self.size()];
        for k in 1..=self.level {
            let mut residual = lie.level_slice(k).to_vec();
            // words are sorted lexicographically, so same-length words appear in increasing order
            for (idx, (w, exp)) in self.words.iter().zip(&self.expansions).enumerate() {
                if w.len() != k {
                    continue;
                }
                let leading = w.iter().fold(0, |acc, &l| acc * self.dim + l);
                let c = residual[leading];
                coords[idx] = c;
                if c != 0.0 {
                    for &(i, v) in exp {
                        residual[i] -= c * v;
                    }
                }
            }
        }
        Ok(coords)
    }
}

fn position(words: &[Vec<usize>], w: &[usize]) -> usize {
    words
        .iter()
        .position(|x| x.as_slice() == w)
        .expect("factors of Lyndon words are Lyndon words")
}

/// Log-signature coordinates of a group-like element in the bracketed Lyndon basis.
pub fn log_sig_coords(g: &TruncatedTensor, basis: &LyndonBasis) -> Result<Vec<f64>> {
    if (g.scalar() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "log-signature needs a group-like element (level-0 entry {})",
            g.scalar()
        )));
    }
    if g.level() < basis.level() {
        return Err(Error::Shape(format!(
            "element level {} below basis level {}",
            g.level(),
            basis.level()
        )));
    }
    let l = g.with_level(basis.level()).log()?;
    basis.coords_of_lie(&l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_lyndon(w: &[usize]) -> bool {
        (1..w.len()).all(|i| {
            let mut rot = w[i..].to_vec();
            rot.extend_from_slice(&w[..i]);
            w < rot.as_slice()
        })
    }

    #[test]
    fn words_are_lyndon_and_sorted() {
        for (dim, level) in [(2, 5), (3, 4), (4, 3)] {
            let ws = lyndon_words(dim, level);
            assert!(ws.iter().all(|w| is_lyndon(w)));
            assert!(ws.windows(2).all(|p| p[0] < p[1]));
        }
        assert_eq!(
            lyndon_words(2, 3),
            vec![vec![0], vec![0, 0, 1], vec![0, 1], vec![0, 1, 1], vec![1]]
        );
    }

    #[test]
    fn basis_sizes() {
        let sizes: Vec<usize> = (1..=5).map(|n| lyndon_basis(2, n).unwrap().size()).collect();
        assert_eq!(sizes, vec![2, 3, 5, 8, 14]);
        assert_eq!(lyndon_basis(3, 3).unwrap().size(), 14);
        assert!(lyndon_basis(1, 3).is_err());
        assert!(lyndon_basis(2, 0).is_err());
    }

    #[test]
    fn bracket_expansions() {
        let b = lyndon_basis(2, 3).unwrap();
        // P_001 = [e0, [e0, e1]] = 001 - 2·010 + 100
        let idx = b.words().iter().position(|w| w == &vec![0, 0, 1]).unwrap();
        let coords: Vec<f64> = (0..b.size()).map(|i| if i == idx { 1.0 } else { 0.0 }).collect();
        let t = b.lie_element(&coords).unwrap();
        assert_eq!(t.get(&[0, 0, 1]).unwrap(), 1.0);
        assert_eq!(t.get(&[0, 1, 0]).unwrap(), -2.0);
        assert_eq!(t.get(&[1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn coordinates_of_exp_letter() {
        let b = lyndon_basis(2, 3).unwrap();
        let g = TruncatedTensor::from_word(2, 3, &[0], 1.0).unwrap().exp().unwrap();
        let c = log_sig_coords(&g, &b).unwrap();
        assert_eq!(c, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bch_bracket_coefficient() {
        // log(exp(e1) exp(e2)) = e1 + e2 + 1/2 [e1, e2]
        let b = lyndon_basis(2, 2).unwrap();
        let x = TruncatedTensor::from_word(2, 2, &[0], 1.0).unwrap().exp().unwrap();
        let y = TruncatedTensor::from_word(2, 2, &[1], 1.0).unwrap().exp().unwrap();
        let c = log_sig_coords(&x.mul(&y).unwrap(), &b).unwrap();
        assert_eq!(b.words(), &[vec![0], vec![0, 1], vec![1]]);
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!((c[1] - 0.5).abs() < 1e-15);
        assert!((c[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_group_like() {
        let b = lyndon_basis(2, 2).unwrap();
        assert!(matches!(
            log_sig_coords(&TruncatedTensor::zeros(2, 2), &b),
            Err(Error::Domain(_))
        ));
    }
}
