//! NAT connectivity model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NatProfile {
    Public,
    /// Hole-punchable mapping.
    Cone,
    /// Per-destination port mapping; defeats hole punching.
    Symmetric,
}

impl NatProfile {
    pub const ALL: [NatProfile; 3] = [NatProfile::Public, NatProfile::Cone, NatProfile::Symmetric];
}

/// Fractions of hosts per profile, in `Public, Cone, Symmetric` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NatFractions(pub [f64; 3]);

impl NatFractions {
    pub fn new(public: f64, cone: f64, symmetric: f64) -> Result<Self> {
        let f = [public, cone, symmetric];
        let sum: f64 = f.iter().sum();
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidNatFractions(f));
        }
        Ok(Self(f))
    }

    pub fn all_public() -> Self {
        Self([1.0, 0.0, 0.0])
    }
}

impl Default for NatFractions {
    /// 35% of hosts behind NATs, 82% of those hole-punchable.
    fn default() -> Self {
        Self([0.65, 0.29, 0.06])
    }
}

/// Whether two hosts can exchange packets without a relay.
pub fn can_connect_directly(a: NatProfile, b: NatProfile) -> bool {
    use NatProfile::*;
    matches!((a, b), (Public, _) | (_, Public) | (Cone, Cone))
}

/// Seeded independent draw of one profile per host.
pub fn assign_nat_profiles(count: usize, fractions: NatFractions, seed: u64) -> Result<Vec<NatProfile>> {
    let f = NatFractions::new(fractions.0[0], fractions.0[1], fractions.0[2])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e41_5400);
    Ok((0..count)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < f.0[0] {
                NatProfile::Public
            } else if u < f.0[0] + f.0[1] {
                NatProfile::Cone
            } else {
                NatProfile::Symmetric
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use NatProfile::*;

    #[test]
    fn rule_examples() {
        assert!(can_connect_directly(Public, Symmetric));
        assert!(can_connect_directly(Cone, Cone));
        assert!(!can_connect_directly(Symmetric, Cone));
        assert!(!can_connect_directly(Symmetric, Symmetric));
    }

    #[test]
    fn rule_is_total_and_symmetric() {
        for a in NatProfile::ALL {
            for b in NatProfile::ALL {
                assert_eq!(can_connect_directly(a, b), can_connect_directly(b, a));
                let expected = a == Public || b == Public || (a == Cone && b == Cone);
                assert_eq!(can_connect_directly(a, b), expected, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn all_public_connects_everyone() {
        let p = assign_nat_profiles(50, NatFractions::all_public(), 3).unwrap();
        assert!(p.iter().all(|x| *x == Public));
    }

    #[test]
    fn all_symmetric_connects_no_one() {
        let p = assign_nat_profiles(20, NatFractions::new(0.0, 0.0, 1.0).unwrap(), 3).unwrap();
        for a in &p {
            for b in &p {
                assert!(!can_connect_directly(*a, *b));
            }
        }
    }

    #[test]
    fn default_counts_within_three_percent() {
        let p = assign_nat_profiles(1000, NatFractions::default(), 2024).unwrap();
        let count = |k| p.iter().filter(|x| **x == k).count() as i64;
        assert!((count(Public) - 650).abs() <= 30, "{}", count(Public));
        assert!((count(Cone) - 290).abs() <= 30, "{}", count(Cone));
        assert!((count(Symmetric) - 60).abs() <= 30, "{}", count(Symmetric));
    }

    #[test]
    fn invalid_fractions_rejected() {
        assert!(NatFractions::new(0.5, 0.5, 0.5).is_err());
        assert!(NatFractions::new(-0.1, 1.1, 0.0).is_err());
        assert!(assign_nat_profiles(3, NatFractions([0.2, 0.2, 0.2]), 0).is_err());
    }
}
