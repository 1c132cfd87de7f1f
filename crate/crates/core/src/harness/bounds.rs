//! Analytic attack-probability calculators, exact in integer arithmetic.

use serde::Serialize;

use crate::error::{Error, Result};

/// Exact rational probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Probability {
    pub numerator: u128,
    pub denominator: u128,
}

impl Probability {
    fn reduced(numerator: u128, denominator: u128) -> Self {
        let g = gcd(numerator, denominator);
        Probability {
            numerator: numerator / g,
            denominator: denominator / g,
        }
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// C(n, k) by the multiplicative formula; each intermediate division is
/// exact. Desk ranges (n <= 520, k <= 8) stay far inside u128.
pub fn binomial(n: u64, k: u64) -> Result<u128> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k {
        acc = acc
            .checked_mul((n - k + i) as u128)
            .ok_or_else(|| Error::Numeric(format!("binomial({n},{k}) overflows u128")))?
            / i as u128;
    }
    Ok(acc)
}

/// Which §-style bound to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundKind {
    /// Guessing the sentinel sequence among |C| cache entries.
    CacheGuess { cache_size: u64 },
    /// Guessing the K sentinel slots among N+K.
    PositionGuess { n: u64, k: u64 },
    /// Dropping `drop` slots and surviving iff none was a sentinel.
    SubsetDrop { n: u64, k: u64, drop: u64 },
    /// Guessing one injected noise id.
    NoisePerPosition { noise_set: u64 },
}

pub fn analytic_attack_probability(kind: BoundKind) -> Result<Probability> {
    match kind {
        BoundKind::CacheGuess { cache_size } => {
            if cache_size == 0 {
                return Err(Error::InvalidArgument("cache size must be >= 1".into()));
            }
            Ok(Probability::reduced(1, cache_size as u128))
        }
        BoundKind::PositionGuess { n, k } => {
            if n == 0 || k == 0 {
                return Err(Error::InvalidArgument("need N, K >= 1".into()));
            }
            Ok(Probability::reduced(1, binomial(n + k, k)?))
        }
        BoundKind::SubsetDrop { n, k, drop } => {
            if n == 0 || k == 0 || drop == 0 || drop > n + k {
                return Err(Error::InvalidArgument(
                    "need N, K, drop >= 1 and drop <= N+K".into(),
                ));
            }
            Ok(Probability::reduced(
                binomial(n, drop)?,
                binomial(n + k, drop)?,
            ))
        }
        BoundKind::NoisePerPosition { noise_set } => {
            if noise_set < 2 {
                return Err(Error::InvalidArgument("noise set must be >= 2".into()));
            }
            Ok(Probability::reduced(1, noise_set as u128))
        }
    }
}

/// Total communication footprint in bytes for an augmented sequence of
/// length L at datatype size b: the linear prompt and position-id vectors
/// plus the quadratic attention mask, b * (L^2 + 8L + 15).
pub fn comm_overhead_bytes(l: u64, b: u64) -> Result<u128> {
    if l == 0 || b == 0 {
        return Err(Error::InvalidArgument("need L >= 1 and b >= 1".into()));
    }
    let l = l as u128;
    Ok(b as u128 * (l * l + 8 * l + 15))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_guess_desk_values() {
        let p = analytic_attack_probability(BoundKind::PositionGuess { n: 14, k: 3 }).unwrap();
        assert_eq!(p.denominator, 680);
        assert_eq!(p.numerator, 1);
        assert!((p.value() - 1.470588e-3).abs() < 1e-8);

        let p = analytic_attack_probability(BoundKind::PositionGuess { n: 100, k: 3 }).unwrap();
        assert_eq!(p.denominator, 176_851);
        assert!((p.value() - 5.6545e-6).abs() < 1e-9);
    }

    #[test]
    fn subset_drop_values() {
        let p = analytic_attack_probability(BoundKind::SubsetDrop { n: 128, k: 3, drop: 1 })
            .unwrap();
        assert_eq!((p.numerator, p.denominator), (128, 131));
        assert!((p.value() - 0.977099).abs() < 1e-6);
        let p = analytic_attack_probability(BoundKind::SubsetDrop { n: 14, k: 3, drop: 1 })
            .unwrap();
        assert_eq!((p.numerator, p.denominator), (14, 17));
    }

    #[test]
    fn cache_and_noise_bounds() {
        let p = analytic_attack_probability(BoundKind::CacheGuess { cache_size: 100 }).unwrap();
        assert_eq!(p.value(), 0.01);
        let p =
            analytic_attack_probability(BoundKind::NoisePerPosition { noise_set: 16 }).unwrap();
        assert_eq!(p.value(), 0.0625);
    }

    #[test]
    fn binomial_matches_bigint_pascal_oracle() {
        use num_bigint::BigUint;
        // Pascal's triangle in big integers, an independent route.
        let max_n = 520usize;
        let max_k = 8usize;
        let mut row: Vec<BigUint> = vec![BigUint::from(1u8)];
        for n in 1..=max_n {
            let mut next = vec![BigUint::from(1u8)];
            for j in 1..row.len() {
                next.push(&row[j - 1] + &row[j]);
            }
            next.push(BigUint::from(1u8));
            row = next;
            if n % 130 == 0 || n == 17 || n == 103 || n == max_n {
                for k in 0..=max_k.min(n) {
                    let ours = binomial(n as u64, k as u64).unwrap();
                    assert_eq!(BigUint::from(ours), row[k], "C({n},{k})");
                }
            }
        }
    }

    #[test]
    fn comm_overhead_values_and_second_difference() {
        assert_eq!(comm_overhead_bytes(131, 4).unwrap(), 72_896);
        assert_eq!(comm_overhead_bytes(1, 1).unwrap(), 24);
        assert_eq!(
            comm_overhead_bytes(10, 8).unwrap(),
            2 * comm_overhead_bytes(10, 4).unwrap()
        );
        // Strictly increasing with constant second difference 2b.
        let b = 4u64;
        let f = |l: u64| comm_overhead_bytes(l, b).unwrap();
        for l in 1..200 {
            assert!(f(l + 1) > f(l));
            assert_eq!(f(l + 2) + f(l) - 2 * f(l + 1), 2 * b as u128);
        }
    }
}
