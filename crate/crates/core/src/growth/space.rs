use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ArchSpec, GrowthFactor};

/// Every architecture reachable from `base` in one growth step.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthSpace {
    pub base: ArchSpec,
    /// Factors that may grow, in canonical order.
    pub growable: Vec<GrowthFactor>,
    /// All choices, lexicographic over `growable` with "current" before "grown".
    pub candidates: Vec<ArchSpec>,
    pub supernet_spec: ArchSpec,
}

pub fn enumerate_growth_space(base: &ArchSpec, frozen: &[GrowthFactor]) -> Result<GrowthSpace> {
    base.validate()?;
    let growable: Vec<GrowthFactor> = GrowthFactor::ALL.into_iter().filter(|f| !frozen.contains(f)).collect();
    let k = growable.len();
    let candidates: Vec<ArchSpec> = (0..1usize << k)
        .map(|i| {
            let mut spec = base.clone();
            for (j, &f) in growable.iter().enumerate() {
                if (i >> (k - 1 - j)) & 1 == 1 {
                    spec.set_factor(f, base.factor(f) + f.increment());
                }
            }
            spec
        })
        .collect();
    let supernet_spec = candidates.last().expect("at least the base").clone();
    Ok(GrowthSpace { base: base.clone(), growable, candidates, supernet_spec })
}

impl GrowthSpace {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn index_of(&self, spec: &ArchSpec) -> Option<usize> {
        self.candidates.iter().position(|c| c == spec)
    }
}

/// `n` seeded uniform candidate indices in `0..count`.
pub fn sample_candidates(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..count)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinalities() {
        let base = ArchSpec::base(40);
        let s = enumerate_growth_space(&base, &[]).unwrap();
        assert_eq!(s.len(), 64);
        assert_eq!(s.candidates[0], base);
        assert_eq!(s.supernet_spec.factors(), [3, 10, 10, 10, 8, 4]);
        let one = enumerate_growth_space(&base, &GrowthFactor::ALL).unwrap();
        assert_eq!(one.candidates, vec![base.clone()]);
        let shared: Vec<_> = GrowthFactor::ALL[..5].to_vec();
        let two = enumerate_growth_space(&base, &shared).unwrap();
        assert_eq!(two.candidates.iter().map(|c| c.blocks_shared).collect::<Vec<_>>(), vec![0, 4]);
    }

    #[test]
    fn order_is_lexicographic() {
        let s = enumerate_growth_space(&ArchSpec::base(40), &[]).unwrap();
        for w in s.candidates.windows(2) {
            assert!(w[0].factors() < w[1].factors());
        }
    }
}
