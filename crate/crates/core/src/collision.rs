//! Post-processing of raw SID assignments to bound how many items share an
//! identifier.
//!
//! Policies consume items in a fixed order and keep occupancy online, so the
//! result depends on that order. Every policy keeps the item set unchanged.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::catalog::{ItemCatalog, SemanticId, SidStructure};
use crate::error::{Error, Result};
use crate::quantizer::{QuantizedItem, QuantizerModel};

/// Default per-SID capacity for the KNN policy.
pub const DEFAULT_SIGMA: u32 = 25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentTable {
    structure: SidStructure,
    items: IndexMap<String, SemanticId>,
    occupancy: HashMap<SemanticId, usize>,
}

impl AssignmentTable {
    pub fn new(structure: SidStructure) -> Self {
        Self {
            structure,
            items: IndexMap::new(),
            occupancy: HashMap::new(),
        }
    }

    pub fn from_assignments(structure: SidStructure, rows: IndexMap<String, SemanticId>) -> Result<Self> {
        let mut table = Self::new(structure);
        for (id, sid) in rows {
            table.insert(id, sid)?;
        }
        Ok(table)
    }

    pub fn structure(&self) -> &SidStructure {
        &self.structure
    }

    /// Assigns `sid` to `item_id`, replacing any earlier assignment.
    pub fn insert(&mut self, item_id: impl Into<String>, sid: SemanticId) -> Result<()> {
        self.structure.validate(&sid)?;
        *self.occupancy.entry(sid.clone()).or_insert(0) += 1;
        if let Some(old) = self.items.insert(item_id.into(), sid) {
            self.release(&old);
        }
        Ok(())
    }

    fn release(&mut self, sid: &SemanticId) {
        if let Some(c) = self.occupancy.get_mut(sid) {
            *c -= 1;
            if *c == 0 {
                self.occupancy.remove(sid);
            }
        }
    }

    pub fn get(&self, item_id: &str) -> Option<&SemanticId> {
        self.items.get(item_id)
    }

    pub fn occupancy(&self, sid: &SemanticId) -> usize {
        self.occupancy.get(sid).copied().unwrap_or(0)
    }

    /// Occupied SIDs and their counts, in no particular order.
    pub fn occupancy_map(&self) -> &HashMap<SemanticId, usize> {
        &self.occupancy
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SemanticId)> {
        self.items.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_assignments(self) -> IndexMap<String, SemanticId> {
        self.items
    }

    /// Occupied SIDs grouped by their first `m-1` codes; each group maps the
    /// last code to its count.
    pub fn by_prefix(&self) -> BTreeMap<Vec<u32>, BTreeMap<u32, usize>> {
        let mut groups: BTreeMap<Vec<u32>, BTreeMap<u32, usize>> = BTreeMap::new();
        for (sid, &n) in &self.occupancy {
            groups.entry(sid.prefix().to_vec()).or_default().insert(sid.last(), n);
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Noco,
    Knn,
    Random,
    Merge,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Noco => "noco",
            PolicyKind::Knn => "knn",
            PolicyKind::Random => "random",
            PolicyKind::Merge => "merge",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noco" => Ok(PolicyKind::Noco),
            "knn" => Ok(PolicyKind::Knn),
            "random" => Ok(PolicyKind::Random),
            "merge" => Ok(PolicyKind::Merge),
            other => Err(Error::invalid(format!("unknown collision policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollisionPolicy {
    pub kind: PolicyKind,
    pub sigma: u32,
    pub merge_threshold: usize,
    /// Last-level candidates examined per item by the KNN policy; `None`
    /// means the whole last-level codebook.
    pub k_candidates: Option<usize>,
}

impl Default for CollisionPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Noco,
            sigma: DEFAULT_SIGMA,
            merge_threshold: 0,
            k_candidates: None,
        }
    }
}

impl CollisionPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Quantizes the catalog in order and applies the policy.
    pub fn apply(&self, model: &QuantizerModel, catalog: &ItemCatalog) -> Result<AssignmentTable> {
        if self.sigma == 0 {
            return Err(Error::invalid("sigma must be at least 1"));
        }
        let structure = model.structure().clone();
        let k = match (self.kind, self.k_candidates) {
            (PolicyKind::Knn, Some(0)) => {
                return Err(Error::invalid("k_candidates must be at least 1"));
            }
            (PolicyKind::Knn, Some(k)) => k,
            (PolicyKind::Knn, None) => structure.last_level_size(),
            _ => 1,
        };
        let items = model.quantize_catalog(catalog, k)?;
        match self.kind {
            PolicyKind::Noco => apply_noco(&items, &structure),
            PolicyKind::Knn => apply_knn_policy(&items, &structure, self.sigma),
            PolicyKind::Random => apply_random_policy(&items, &structure),
            PolicyKind::Merge => {
                let table = apply_noco(&items, &structure)?;
                Ok(apply_merge_policy(&table, |a, b| model.last_level_distance(a, b), self.merge_threshold))
            }
        }
    }
}

/// Raw assignments, unchanged.
pub fn apply_noco(items: &[QuantizedItem], structure: &SidStructure) -> Result<AssignmentTable> {
    let mut table = AssignmentTable::new(structure.clone());
    for it in items {
        table.insert(it.item_id.clone(), it.sid.clone())?;
    }
    Ok(table)
}

/// Walks each item's last-level candidates nearest first and takes the
/// first SID holding fewer than `sigma` items. When every candidate is full
/// the least-occupied one wins, ties going to the lowest code.
pub fn apply_knn_policy(items: &[QuantizedItem], structure: &SidStructure, sigma: u32) -> Result<AssignmentTable> {
    if sigma == 0 {
        return Err(Error::invalid("sigma must be at least 1"));
    }
    let sigma = sigma as usize;
    let mut table = AssignmentTable::new(structure.clone());
    for it in items {
        if it.last_level_ranking.is_empty() {
            return Err(Error::invalid(format!("item {} has no last-level candidates", it.item_id)));
        }
        let mut chosen = None;
        let mut fallback: Option<(usize, u32)> = None;
        for &code in &it.last_level_ranking {
            let occ = table.occupancy(&it.sid.with_last(code));
            if occ < sigma {
                chosen = Some(code);
                break;
            }
            if fallback.is_none_or(|(o, c)| occ < o || (occ == o && code < c)) {
                fallback = Some((occ, code));
            }
        }
        let code = chosen.or(fallback.map(|(_, c)| c)).expect("ranking is non-empty");
        table.insert(it.item_id.clone(), it.sid.with_last(code))?;
    }
    Ok(table)
}

/// Keeps each item's prefix and overwrites the last code with a per-prefix
/// counter that cycles through the last level in insertion order.
pub fn apply_random_policy(items: &[QuantizedItem], structure: &SidStructure) -> Result<AssignmentTable> {
    if structure.levels() < 2 {
        return Err(Error::InvalidStructure(
            "the random policy needs at least two levels".into(),
        ));
    }
    let n_last = structure.last_level_size() as u32;
    let mut counters: HashMap<Vec<u32>, u32> = HashMap::new();
    let mut table = AssignmentTable::new(structure.clone());
    for it in items {
        let counter = counters.entry(it.sid.prefix().to_vec()).or_insert(0);
        let code = *counter;
        *counter = (code + 1) % n_last;
        table.insert(it.item_id.clone(), it.sid.with_last(code))?;
    }
    Ok(table)
}

/// Folds every SID holding fewer than `threshold` items into a sibling
/// under the same prefix: the nearest one (by `distance` between last-level
/// codes) that holds at least `threshold`, or the most occupied sibling if
/// none does. Occupancies are read before any move.
pub fn apply_merge_policy<F>(table: &AssignmentTable, distance: F, threshold: usize) -> AssignmentTable
where
    F: Fn(u32, u32) -> f64,
{
    let mut redirect: HashMap<SemanticId, SemanticId> = HashMap::new();
    for (prefix, codes) in table.by_prefix() {
        let large: Vec<u32> = codes.iter().filter(|(_, &n)| n >= threshold).map(|(&c, _)| c).collect();
        let (&biggest, _) = codes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("groups are non-empty");
        for (&code, &n) in &codes {
            if n >= threshold {
                continue;
            }
            let target = if large.is_empty() {
                biggest
            } else {
                let mut best = (f64::INFINITY, u32::MAX);
                for &c in &large {
                    let d = distance(code, c);
                    if d < best.0 || (d == best.0 && c < best.1) {
                        best = (d, c);
                    }
                }
                best.1
            };
            if target != code {
                let mut from = prefix.clone();
                from.push(code);
                let mut to = prefix.clone();
                to.push(target);
                redirect.insert(SemanticId::new(from), SemanticId::new(to));
            }
        }
    }
    let mut out = AssignmentTable::new(table.structure.clone());
    for (id, sid) in table.iter() {
        let sid = redirect.get(sid).unwrap_or(sid).clone();
        out.insert(id, sid).expect("merged SIDs stay within the structure");
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OccupancyStats {
    pub max: usize,
    /// Mean items per occupied SID.
    pub mean: f64,
    pub distinct: usize,
    /// Items-per-SID value to the number of SIDs holding that many.
    pub histogram: BTreeMap<usize, usize>,
}

pub fn occupancy_stats(table: &AssignmentTable) -> OccupancyStats {
    let mut stats = OccupancyStats::default();
    for &n in table.occupancy.values() {
        stats.max = stats.max.max(n);
        *stats.histogram.entry(n).or_insert(0) += 1;
    }
    stats.distinct = table.occupancy.len();
    if stats.distinct > 0 {
        stats.mean = table.len() as f64 / stats.distinct as f64;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, codes: &[u32], ranking: &[u32]) -> QuantizedItem {
        QuantizedItem {
            item_id: id.into(),
            sid: SemanticId::new(codes.to_vec()),
            last_level_ranking: ranking.to_vec(),
        }
    }

    fn s(levels: &[usize]) -> SidStructure {
        SidStructure::new(levels.to_vec(), 2).unwrap()
    }

    #[test]
    fn table_tracks_occupancy() {
        let mut t = AssignmentTable::new(s(&[4, 4]));
        t.insert("a", SemanticId::new(vec![1, 2])).unwrap();
        t.insert("b", SemanticId::new(vec![1, 2])).unwrap();
        assert_eq!(t.occupancy(&SemanticId::new(vec![1, 2])), 2);
        t.insert("a", SemanticId::new(vec![0, 0])).unwrap();
        assert_eq!(t.occupancy(&SemanticId::new(vec![1, 2])), 1);
        assert_eq!(t.occupancy(&SemanticId::new(vec![0, 0])), 1);
        assert!(t.insert("c", SemanticId::new(vec![4, 0])).is_err());
    }

    #[test]
    fn knn_sigma_one_splits_duplicates() {
        let items = vec![item("a", &[0, 3], &[3, 1, 0]), item("b", &[0, 3], &[3, 1, 0])];
        let t = apply_knn_policy(&items, &s(&[2, 4]), 1).unwrap();
        assert_eq!(t.get("a").unwrap().codes(), &[0, 3]);
        assert_eq!(t.get("b").unwrap().codes(), &[0, 1]);
    }

    #[test]
    fn knn_twenty_sixth_item_diverted() {
        let items: Vec<_> = (0..26).map(|i| item(&format!("i{i}"), &[1, 5], &[5, 2, 7])).collect();
        let t = apply_knn_policy(&items, &s(&[2, 8]), DEFAULT_SIGMA).unwrap();
        for i in 0..25 {
            assert_eq!(t.get(&format!("i{i}")).unwrap().codes(), &[1, 5]);
        }
        assert_eq!(t.get("i25").unwrap().codes(), &[1, 2]);
    }

    #[test]
    fn knn_fallback_picks_least_occupied_lowest_code() {
        let items: Vec<_> = (0..5).map(|i| item(&format!("i{i}"), &[0, 3], &[3, 1])).collect();
        let t = apply_knn_policy(&items, &s(&[2, 4]), 2).unwrap();
        // both candidates are full after four items; the tie goes to code 1
        assert_eq!(t.get("i4").unwrap().codes(), &[0, 1]);
        assert_eq!(t.occupancy(&SemanticId::new(vec![0, 1])), 3);
    }

    #[test]
    fn knn_pigeonhole_bound() {
        let n = 6u32;
        let sigma = 3;
        let items: Vec<_> = (0..(sigma * n) as usize)
            .map(|i| {
                let start = (i as u32 * 7) % n;
                let ranking: Vec<u32> = (0..n).map(|k| (start + k) % n).collect();
                item(&format!("i{i}"), &[1, start], &ranking)
            })
            .collect();
        let t = apply_knn_policy(&items, &s(&[2, n as usize]), sigma).unwrap();
        assert!(occupancy_stats(&t).max <= sigma as usize);
    }

    #[test]
    fn random_cycles_per_prefix() {
        let items = vec![
            item("a", &[0, 2], &[2]),
            item("b", &[1, 2], &[2]),
            item("c", &[0, 1], &[1]),
            item("d", &[1, 0], &[0]),
            item("e", &[0, 0], &[0]),
            item("f", &[0, 0], &[0]),
        ];
        let t = apply_random_policy(&items, &s(&[2, 3])).unwrap();
        let last: Vec<u32> = ["a", "c", "e", "f"].iter().map(|i| t.get(i).unwrap().last()).collect();
        assert_eq!(last, vec![0, 1, 2, 0]);
        assert_eq!(t.get("b").unwrap().last(), 0);
        assert_eq!(t.get("d").unwrap().last(), 1);
        assert!(apply_random_policy(&items, &s(&[3])).is_err());
    }

    #[test]
    fn random_spread_is_balanced() {
        for p in [1usize, 5, 16, 17, 50] {
            let items: Vec<_> = (0..p).map(|i| item(&format!("i{i}"), &[2, 0], &[0])).collect();
            let t = apply_random_policy(&items, &s(&[4, 16])).unwrap();
            for (_, codes) in t.by_prefix() {
                let max = codes.values().max().unwrap();
                let min = codes.values().min().unwrap();
                assert_eq!(*max, p.div_ceil(16));
                assert!(max - min <= 1);
            }
        }
    }

    #[test]
    fn merge_zero_threshold_is_identity() {
        let items = vec![item("a", &[0, 1], &[1]), item("b", &[0, 2], &[2])];
        let t = apply_noco(&items, &s(&[2, 4])).unwrap();
        let m = apply_merge_policy(&t, |a, b| (a as f64 - b as f64).abs(), 0);
        assert_eq!(m, t);
    }

    #[test]
    fn merge_folds_small_into_large() {
        let mut items: Vec<_> = (0..100).map(|i| item(&format!("i{i}"), &[0, 0], &[0])).collect();
        items.push(item("x", &[0, 3], &[3]));
        let t = apply_noco(&items, &s(&[2, 4])).unwrap();
        let m = apply_merge_policy(&t, |a, b| (a as f64 - b as f64).abs(), 5);
        assert_eq!(m.occupancy(&SemanticId::new(vec![0, 0])), 101);
        assert_eq!(occupancy_stats(&m).distinct, 1);
    }

    #[test]
    fn merge_prefers_nearest_large_and_falls_back_to_biggest() {
        let mut items = Vec::new();
        for (code, n) in [(0u32, 3usize), (2, 1), (5, 3)] {
            for i in 0..n {
                items.push(item(&format!("a{code}_{i}"), &[0, code], &[code]));
            }
        }
        for (code, n) in [(1u32, 1usize), (4, 2), (6, 2)] {
            for i in 0..n {
                items.push(item(&format!("b{code}_{i}"), &[1, code], &[code]));
            }
        }
        let t = apply_noco(&items, &s(&[2, 8])).unwrap();
        let m = apply_merge_policy(&t, |a, b| (a as f64 - b as f64).abs(), 3);
        assert_eq!(m.get("a2_0").unwrap().codes(), &[0, 0]);
        // no sibling reaches 3: everything moves to the largest, lowest code
        assert_eq!(m.get("b1_0").unwrap().codes(), &[1, 4]);
        assert_eq!(m.get("b6_1").unwrap().codes(), &[1, 4]);
        assert_eq!(m.occupancy(&SemanticId::new(vec![1, 4])), 5);
    }

    #[test]
    fn stats() {
        let empty = AssignmentTable::new(s(&[2, 2]));
        assert_eq!(occupancy_stats(&empty), OccupancyStats::default());
        let items: Vec<_> = (0..4).map(|i| item(&format!("i{i}"), &[1, 1], &[1])).collect();
        let st = occupancy_stats(&apply_noco(&items, &s(&[2, 2])).unwrap());
        assert_eq!((st.max, st.distinct, st.mean), (4, 1, 4.0));
        assert_eq!(st.histogram.get(&4), Some(&1));
    }

    #[test]
    fn policy_kind_parsing() {
        for k in ["noco", "knn", "random", "merge"] {
            assert_eq!(k.parse::<PolicyKind>().unwrap().to_string(), k);
        }
        assert!("knn5".parse::<PolicyKind>().is_err());
    }
}
