use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEDULE_FORMAT_VERSION: u32 = 1;

/// Nested training manifests `D¹ ⊆ D² ⊆ …` over the ids `0..total_pairs`,
/// plus two held-out id ranges above them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthSchedule {
    pub format_version: u32,
    pub total_pairs: usize,
    /// Seed of the master corpus; pair contents depend on it.
    pub corpus_seed: u64,
    /// Seed of the id permutation the prefixes are cut from.
    pub permutation_seed: u64,
    /// Cumulative manifest sizes, one per step.
    pub counts: Vec<usize>,
    /// Ids used for growth architecture selection.
    pub selection_ids: Range<u64>,
    /// Ids used for final reporting.
    pub test_ids: Range<u64>,
    /// SHA-256 of each step's manifest.
    pub hashes: Vec<String>,
}

/// The ids of one growth step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub step: usize,
    pub corpus_seed: u64,
    pub ids: Vec<u64>,
    pub hash: String,
}

fn permutation(total: usize, seed: u64) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..total as u64).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

fn manifest_hash(corpus_seed: u64, ids: &[u64]) -> String {
    let mut h = Sha256::new();
    h.update(corpus_seed.to_le_bytes());
    for id in ids {
        h.update(id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Splits `total` pairs into `steps` cumulative prefixes of a seeded
/// permutation. Step `k` (1-based) holds `floor(total·k/steps)` ids.
pub fn build_schedule(
    total: usize,
    steps: usize,
    corpus_seed: u64,
    permutation_seed: u64,
    selection_size: usize,
    test_size: usize,
) -> Result<GrowthSchedule> {
    if steps == 0 {
        return Err(Error::Config("a schedule needs at least one step".into()));
    }
    if total < steps {
        return Err(Error::Config(format!("{total} pairs cannot fill {steps} steps")));
    }
    let counts: Vec<usize> = (1..=steps).map(|k| total * k / steps).collect();
    let perm = permutation(total, permutation_seed);
    let hashes = counts.iter().map(|&c| manifest_hash(corpus_seed, &perm[..c])).collect();
    let t = total as u64;
    let s = selection_size as u64;
    Ok(GrowthSchedule {
        format_version: SCHEDULE_FORMAT_VERSION,
        total_pairs: total,
        corpus_seed,
        permutation_seed,
        counts,
        selection_ids: t..t + s,
        test_ids: t + s..t + s + test_size as u64,
        hashes,
    })
}

impl GrowthSchedule {
    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    /// Manifest of 1-based `step`.
    pub fn manifest(&self, step: usize) -> Result<Manifest> {
        if step == 0 || step > self.steps() {
            return Err(Error::Input(format!("step {step} is outside 1..={}", self.steps())));
        }
        let perm = permutation(self.total_pairs, self.permutation_seed);
        let ids = perm[..self.counts[step - 1]].to_vec();
        let hash = manifest_hash(self.corpus_seed, &ids);
        if hash != self.hashes[step - 1] {
            return Err(Error::Config(format!(
                "manifest {step} hashes to {hash}, schedule records {}",
                self.hashes[step - 1]
            )));
        }
        Ok(Manifest { step, corpus_seed: self.corpus_seed, ids, hash })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: GrowthSchedule =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad schedule file: {e}")))?;
        if s.format_version != SCHEDULE_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported schedule version {}", s.format_version)));
        }
        if s.counts.len() != s.hashes.len() || s.counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("schedule counts must strictly increase, one hash per step".into()));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::checkpoint::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn prefixes_nest() {
        let s = build_schedule(8000, 4, 1, 2, 100, 100).unwrap();
        assert_eq!(s.counts, vec![2000, 4000, 6000, 8000]);
        let m2: HashSet<u64> = s.manifest(2).unwrap().ids.into_iter().collect();
        let m3: HashSet<u64> = s.manifest(3).unwrap().ids.into_iter().collect();
        assert!(m2.is_subset(&m3) && m2.len() < m3.len());
        assert!(m3.iter().all(|id| !s.selection_ids.contains(id) && !s.test_ids.contains(id)));
    }

    #[test]
    fn single_step_and_errors() {
        let s = build_schedule(10, 1, 0, 0, 0, 0).unwrap();
        assert_eq!(s.manifest(1).unwrap().ids.len(), 10);
        assert!(build_schedule(3, 4, 0, 0, 0, 0).is_err());
        assert!(build_schedule(3, 0, 0, 0, 0, 0).is_err());
        assert!(s.manifest(2).is_err());
    }

    #[test]
    fn json_round_trip_and_tamper() {
        let s = build_schedule(50, 3, 4, 5, 8, 8).unwrap();
        let back = GrowthSchedule::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let mut bad = s.clone();
        bad.permutation_seed += 1;
        assert!(bad.manifest(1).is_err());
    }
}
