use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{SemanticId, SidStructure};

/// Content-blind baseline: each item's codes are drawn uniformly from a
/// stream keyed by `(seed, item_id)`, so an item's SID does not depend on
/// which other items are assigned or in what order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomQuantizer {
    structure: SidStructure,
    seed: u64,
}

/// 64-bit FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl RandomQuantizer {
    pub fn new(structure: SidStructure, seed: u64) -> Self {
        Self { structure, seed }
    }

    pub fn structure(&self) -> &SidStructure {
        &self.structure
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assign(&self, item_id: &str) -> SemanticId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(item_id.as_bytes()));
        SemanticId::new(
            self.structure
                .level_sizes()
                .iter()
                .map(|&n| rng.random_range(0..n as u32))
                .collect(),
        )
    }
}

pub fn assign_random<'a>(
    item_ids: impl IntoIterator<Item = &'a str>,
    structure: &SidStructure,
    seed: u64,
) -> IndexMap<String, SemanticId> {
    let q = RandomQuantizer::new(structure.clone(), seed);
    item_ids.into_iter().map(|id| (id.to_string(), q.assign(id))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let s = SidStructure::new(vec![5, 7, 3], 4).unwrap();
        let ids: Vec<String> = (0..200).map(|i| format!("item{i}")).collect();
        let a = assign_random(ids.iter().map(String::as_str), &s, 9);
        let b = assign_random(ids.iter().rev().map(String::as_str), &s, 9);
        for (id, sid) in &a {
            s.validate(sid).unwrap();
            assert_eq!(b[id], *sid);
        }
        let c = assign_random(ids.iter().map(String::as_str), &s, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
