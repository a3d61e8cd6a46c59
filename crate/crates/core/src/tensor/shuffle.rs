use super::{decode_word, level_offset, total_len, TruncatedTensor};
use crate::error::{Error, Result};

/// Largest number of coefficients a shuffle result may hold.
pub const MAX_ENTRIES: usize = 1 << 24;

/// Shuffle product of two words, accumulated into `out` with weight `coeff`.
///
/// Interleavings whose length exceeds `out.level()` are dropped.
pub fn shuffle_words(a: &[usize], b: &[usize], coeff: f64, out: &mut TruncatedTensor) {
    let k = a.len() + b.len();
    if k > out.level() {
        return;
    }
    let dim = out.dim();
    let off = level_offset(dim, k);
    let slice = &mut out.coeffs_mut()[off..off + dim.pow(k as u32)];
    interleave(a, b, 0, dim, coeff, slice);
}

fn interleave(a: &[usize], b: &[usize], prefix: usize, dim: usize, coeff: f64, out: &mut [f64]) {
    match (a.split_first(), b.split_first()) {
        (None, None) => out[prefix] += coeff,
        (Some((&x, rest)), None) => interleave(rest, b, prefix * dim + x, dim, coeff, out),
        (None, Some((&y, rest))) => interleave(a, rest, prefix * dim + y, dim, coeff, out),
        (Some((&x, ra)), Some((&y, rb))) => {
            interleave(ra, b, prefix * dim + x, dim, coeff, out);
            interleave(a, rb, prefix * dim + y, dim, coeff, out);
        }
    }
}

/// Bilinear shuffle `u ш v` truncated at `out_level`.
pub fn shuffle(u: &TruncatedTensor, v: &TruncatedTensor, out_level: usize) -> Result<TruncatedTensor> {
    if u.dim() != v.dim() {
        return Err(Error::Shape(format!("shuffle dim {} vs {}", u.dim(), v.dim())));
    }
    let dim = u.dim();
    let fits = dim
        .checked_pow(out_level as u32)
        .is_some_and(|top| top <= MAX_ENTRIES && total_len(dim, out_level) <= MAX_ENTRIES);
    if !fits {
        return Err(Error::Capacity(format!(
            "shuffle output level {out_level} over alphabet {dim} exceeds {MAX_ENTRIES} entries"
        )));
    }
    let mut out = TruncatedTensor::zeros(dim, out_level);
    for ku in 0..=u.level().min(out_level) {
        for (iu, &cu) in u.level_slice(ku).iter().enumerate() {
            if cu == 0.0 {
                continue;
            }
            let wu = decode_word(dim, ku, iu);
            for kv in 0..=v.level().min(out_level - ku) {
                for (iv, &cv) in v.level_slice(kv).iter().enumerate() {
                    if cv == 0.0 {
                        continue;
                    }
                    let wv = decode_word(dim, kv, iv);
                    shuffle_words(&wu, &wv, cu * cv, &mut out);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::pair;

    #[test]
    fn letters_shuffle_to_both_orders() {
        let e1 = TruncatedTensor::from_word(2, 1, &[0], 1.0).unwrap();
        let e2 = TruncatedTensor::from_word(2, 1, &[1], 1.0).unwrap();
        let s = shuffle(&e1, &e2, 2).unwrap();
        assert_eq!(s.get(&[0, 1]).unwrap(), 1.0);
        assert_eq!(s.get(&[1, 0]).unwrap(), 1.0);
        assert_eq!(s.get(&[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_word_is_neutral() {
        let one = TruncatedTensor::one(2, 0);
        let v = TruncatedTensor::from_coeffs(2, 2, vec![0.5, 1.0, -2.0, 0.25, 3.0, 0.0, 1.5])
            .unwrap();
        assert_eq!(shuffle(&one, &v, 2).unwrap(), v);
    }

    #[test]
    fn counts_interleavings() {
        // 12 ш 12 = 4·1122 + 2·1212, total weight C(4,2) = 6
        let w = TruncatedTensor::from_word(2, 2, &[0, 1], 1.0).unwrap();
        let s = shuffle(&w, &w, 4).unwrap();
        let total: f64 = s.level_slice(4).iter().sum();
        assert_eq!(total, 6.0);
        assert_eq!(s.get(&[0, 1, 0, 1]).unwrap(), 2.0);
        assert_eq!(s.get(&[0, 0, 1, 1]).unwrap(), 4.0);
    }

    #[test]
    fn identity_on_exp_of_a_vector() {
        let g = TruncatedTensor::from_level1(4, &[0.7, -1.3]).exp().unwrap();
        let e1 = TruncatedTensor::from_word(2, 1, &[0], 1.0).unwrap();
        let s = shuffle(&e1, &e1, 4).unwrap();
        let lhs = pair(&s, &g).unwrap();
        let rhs = pair(&e1, &g).unwrap().powi(2);
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn capacity_is_enforced() {
        let e1 = TruncatedTensor::from_word(4, 1, &[0], 1.0).unwrap();
        assert!(matches!(shuffle(&e1, &e1, 40), Err(Error::Capacity(_))));
    }
}
