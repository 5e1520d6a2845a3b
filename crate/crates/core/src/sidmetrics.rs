//! Direct SID quality metrics: Gini coefficient, codebook utilization,
//! embedding hit rate, and style/origin consistency.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::catalog::{read_text, InteractionSequence, ItemCatalog};
use crate::collision::AssignmentTable;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Per-SID item counts. Only `counts` is stored; the remaining
/// `total_slots - counts.len()` SIDs are implicit zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyVector {
    counts: Vec<u64>,
    total_slots: u128,
}

impl OccupancyVector {
    pub fn new(counts: Vec<u64>, total_slots: u128) -> Result<Self> {
        if (counts.len() as u128) > total_slots {
            return Err(Error::invalid(format!(
                "{} counts exceed {total_slots} SID slots",
                counts.len()
            )));
        }
        Ok(Self { counts, total_slots })
    }

    /// Every entry is a slot.
    pub fn dense(counts: Vec<u64>) -> Self {
        let total_slots = counts.len() as u128;
        Self { counts, total_slots }
    }

    /// Occupied SIDs of the table over all `Π n_j` possible SIDs.
    pub fn from_table(table: &AssignmentTable) -> Self {
        let mut counts: Vec<u64> = table.occupancy_map().values().map(|&n| n as u64).collect();
        counts.sort_unstable();
        Self {
            counts,
            total_slots: table.structure().num_sids(),
        }
    }

    /// Drops the implicit zeros, so only occupied SIDs count as slots.
    pub fn occupied_only(&self) -> Self {
        Self::dense(self.counts.iter().copied().filter(|&c| c > 0).collect())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_slots(&self) -> u128 {
        self.total_slots
    }

    pub fn total_items(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// `G = (2/N) Σ_i (i/N − L(i))` over counts sorted ascending, with
/// `L(i) = C(i)/C(N)`. Since `Σ_i i/N = (N+1)/2` this reduces to
/// `(N+1)/N − (2/N) Σ_i L(i)`, where the implicit zeros add nothing to the
/// second sum.
pub fn gini_coefficient(occupancy: &OccupancyVector) -> Result<f64> {
    let total = occupancy.total_items();
    if total == 0 {
        return Err(Error::invalid("Gini coefficient of an all-zero occupancy"));
    }
    let implicit = occupancy.total_slots - occupancy.counts.len() as u128;
    let mut sorted = occupancy.counts.clone();
    sorted.sort_unstable();
    if implicit == 0 && sorted.first() == sorted.last() {
        return Ok(0.0);
    }
    let n = occupancy.total_slots as f64;
    let mut cumulative = 0u64;
    let mut lorenz_sum = 0.0;
    for c in sorted {
        cumulative += c;
        lorenz_sum += cumulative as f64 / total as f64;
    }
    Ok(((n + 1.0) / n - 2.0 * lorenz_sum / n).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    /// Occupied SIDs over all possible SIDs, in percent.
    pub overall: f64,
    /// Used codes per level over that level's codebook size, in percent.
    pub per_level: Vec<f64>,
}

pub fn codebook_utilization(table: &AssignmentTable) -> Utilization {
    let s = table.structure();
    let overall = table.occupancy_map().len() as f64 / s.num_sids() as f64 * 100.0;
    let mut used: Vec<HashSet<u32>> = vec![HashSet::new(); s.levels()];
    for sid in table.occupancy_map().keys() {
        for (j, &c) in sid.codes().iter().enumerate() {
            used[j].insert(c);
        }
    }
    let per_level = used
        .iter()
        .enumerate()
        .map(|(j, u)| u.len() as f64 / s.level_size(j) as f64 * 100.0)
        .collect();
    Utilization { overall, per_level }
}

/// A query item and the items clicked after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HitratePair {
    pub query: String,
    pub clicked: Vec<String>,
}

/// One pair per sequence: its most recent history item and its targets.
/// Sequences with an empty history are skipped.
pub fn hitrate_pairs(sequences: &[InteractionSequence]) -> Vec<HitratePair> {
    sequences
        .iter()
        .filter_map(|s| {
            let query = s.history.last()?;
            (!s.targets.is_empty()).then(|| HitratePair {
                query: query.clone(),
                clicked: s.targets.clone(),
            })
        })
        .collect()
}

/// Mean over pairs of `|top-K ∩ clicked| / |clicked|`, where top-K ranks
/// every other catalog item by cosine similarity to the query embedding.
/// Equal similarities rank by catalog order; zero-norm candidates rank last.
pub fn embedding_hitrate(catalog: &ItemCatalog, pairs: &[HitratePair], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k >= catalog.len() {
        return Err(Error::invalid(format!(
            "K = {k} must be smaller than the catalog size {}",
            catalog.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no evaluation pairs"));
    }
    let lookup = |id: &str| catalog.index_of(id).ok_or_else(|| Error::UnknownItem(id.to_string()));
    let resolved = pairs
        .iter()
        .map(|p| {
            let q = lookup(&p.query)?;
            let clicked: BTreeSet<usize> = p.clicked.iter().map(|c| lookup(c)).collect::<Result<_>>()?;
            if clicked.is_empty() {
                return Err(Error::invalid(format!("query {} has no clicked items", p.query)));
            }
            Ok((q, clicked))
        })
        .collect::<Result<Vec<_>>>()?;
    let unit: Vec<Option<Vec<f64>>> = catalog
        .iter()
        .map(|r| {
            let h = r.embedding.as_slice();
            let n = norm(h);
            (n > 0.0).then(|| h.iter().map(|v| v / n).collect())
        })
        .collect();
    let scores = resolved
        .par_iter()
        .map(|(q, clicked)| {
            let qv = unit[*q]
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("query item {} has a zero-norm embedding", catalog.record(*q).item_id)))?;
            let sims: Vec<f64> = unit
                .iter()
                .map(|u| u.as_ref().map_or(f64::NEG_INFINITY, |u| dot(qv, u)))
                .collect();
            let hits = clicked
                .iter()
                .filter(|&&c| c != *q)
                .filter(|&&c| {
                    let ahead = sims
                        .iter()
                        .enumerate()
                        .filter(|&(j, &s)| j != *q && j != c && (s > sims[c] || (s == sims[c] && j < c)))
                        .count();
                    ahead < k
                })
                .count();
            Ok(hits as f64 / clicked.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    Style,
    Origin,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Style => "style",
            Relation::Origin => "origin",
        })
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style" => Ok(Relation::Style),
            "origin" => Ok(Relation::Origin),
            other => Err(Error::invalid(format!("unknown relation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairLabels {
    pub pairs: Vec<(String, String, Relation)>,
}

impl PairLabels {
    /// Rows of `item_a<TAB>item_b<TAB>style|origin`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = raw.split('\t').map(str::trim).collect();
            if f.len() != 3 {
                return Err(Error::parse(line, format!("expected 3 columns, found {}", f.len())));
            }
            let rel = f[2].parse::<Relation>().map_err(|e| Error::parse(line, e.to_string()))?;
            pairs.push((f[0].to_string(), f[1].to_string(), rel));
        }
        Ok(Self { pairs })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_text(path.as_ref())?)
    }

    pub fn write<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for (a, b, rel) in &self.pairs {
            writeln!(out, "{a}\t{b}\t{rel}")?;
        }
        Ok(())
    }

    /// Pairs of consecutive members (in catalog order) of every style and
    /// origin group, so a group of `g` items yields `g - 1` pairs.
    pub fn from_catalog_groups(catalog: &ItemCatalog) -> Self {
        let mut pairs = Vec::new();
        for rel in [Relation::Style, Relation::Origin] {
            let mut groups: indexmap::IndexMap<&str, Vec<&str>> = indexmap::IndexMap::new();
            for r in catalog.iter() {
                let g = match rel {
                    Relation::Style => r.style_group.as_deref(),
                    Relation::Origin => r.origin_group.as_deref(),
                };
                if let Some(g) = g {
                    groups.entry(g).or_default().push(&r.item_id);
                }
            }
            for members in groups.values() {
                for w in members.windows(2) {
                    pairs.push((w[0].to_string(), w[1].to_string(), rel));
                }
            }
        }
        Self { pairs }
    }
}

/// Percentage of labelled pairs of `relation` whose items share the whole SID.
pub fn consistency(table: &AssignmentTable, labels: &PairLabels, relation: Relation) -> Result<f64> {
    let mut total = 0usize;
    let mut same = 0usize;
    for (a, b, rel) in &labels.pairs {
        if *rel != relation {
            continue;
        }
        let sa = table.get(a).ok_or_else(|| Error::UnknownItem(a.clone()))?;
        let sb = table.get(b).ok_or_else(|| Error::UnknownItem(b.clone()))?;
        total += 1;
        same += usize::from(sa == sb);
    }
    if total == 0 {
        return Err(Error::invalid(format!("no {relation} pairs to evaluate")));
    }
    Ok(same as f64 / total as f64 * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ItemRecord, MultimodalEmbedding, SemanticId, SidStructure};

    fn gini(v: &[u64]) -> f64 {
        gini_coefficient(&OccupancyVector::dense(v.to_vec())).unwrap()
    }

    #[test]
    fn gini_reference_values() {
        assert_eq!(gini(&[1, 1, 1, 1]), 0.0);
        assert!((gini(&[0, 0, 0, 8]) - 0.75).abs() < 1e-15);
        assert!((gini(&[0, 1, 3]) - 0.5).abs() < 1e-15);
        assert!((gini(&[3, 0, 1]) - 0.5).abs() < 1e-15);
        assert!(gini_coefficient(&OccupancyVector::dense(vec![0, 0])).is_err());
    }

    #[test]
    fn implicit_zeros_count() {
        let sparse = OccupancyVector::new(vec![8], 4).unwrap();
        assert!((gini_coefficient(&sparse).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(gini_coefficient(&sparse.occupied_only()).unwrap(), 0.0);
        assert!(OccupancyVector::new(vec![1, 2, 3], 2).is_err());
    }

    fn table(rows: &[(&str, &[u32])]) -> AssignmentTable {
        let mut t = AssignmentTable::new(SidStructure::new(vec![2, 2], 1).unwrap());
        for (id, c) in rows {
            t.insert(*id, SemanticId::new(c.to_vec())).unwrap();
        }
        t
    }

    #[test]
    fn utilization() {
        let t = table(&[("a", &[0, 0]), ("b", &[0, 1]), ("c", &[1, 0])]);
        let u = codebook_utilization(&t);
        assert_eq!(u.overall, 75.0);
        assert_eq!(u.per_level, vec![100.0, 100.0]);
        let t = table(&[("a", &[0, 0]), ("b", &[0, 1]), ("c", &[1, 0]), ("d", &[1, 1])]);
        assert_eq!(codebook_utilization(&t).overall, 100.0);
        let t = table(&[("a", &[1, 1])]);
        assert_eq!(codebook_utilization(&t).per_level, vec![50.0, 50.0]);
    }

    #[test]
    fn consistency_percentages() {
        let t = table(&[("a", &[0, 0]), ("b", &[0, 0]), ("c", &[1, 0]), ("d", &[1, 1])]);
        let labels = PairLabels::parse("a\tb\tstyle\na\tc\tstyle\nb\td\tstyle\nc\td\tstyle\na\tb\torigin\n").unwrap();
        assert_eq!(consistency(&t, &labels, Relation::Style).unwrap(), 25.0);
        assert_eq!(consistency(&t, &labels, Relation::Origin).unwrap(), 100.0);
        let none = PairLabels::parse("a\tb\tstyle\n").unwrap();
        assert!(consistency(&t, &none, Relation::Origin).is_err());
        let unknown = PairLabels::parse("a\tzz\tstyle\n").unwrap();
        assert!(matches!(consistency(&t, &unknown, Relation::Style), Err(Error::UnknownItem(_))));
        assert!(matches!(PairLabels::parse("a\tb\tcolour\n"), Err(Error::Parse { line: 1, .. })));
    }

    fn catalog(vectors: &[[f64; 2]]) -> ItemCatalog {
        let mut c = ItemCatalog::new(2);
        for (i, v) in vectors.iter().enumerate() {
            c.insert(ItemRecord::new(format!("i{i}"), MultimodalEmbedding::new(v.to_vec()).unwrap()))
                .unwrap();
        }
        c
    }

    fn pair(q: &str, clicked: &[&str]) -> HitratePair {
        HitratePair {
            query: q.into(),
            clicked: clicked.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn hitrate_basics() {
        let c = catalog(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [-1.0, 0.0]]);
        assert_eq!(embedding_hitrate(&c, &[pair("i0", &["i1"])], 1).unwrap(), 1.0);
        assert_eq!(embedding_hitrate(&c, &[pair("i0", &["i3"])], 2).unwrap(), 0.0);
        assert_eq!(embedding_hitrate(&c, &[pair("i0", &["i1", "i3"])], 1).unwrap(), 0.5);
        assert!(embedding_hitrate(&c, &[pair("i0", &["i1"])], 4).is_err());
        assert!(matches!(
            embedding_hitrate(&c, &[pair("i0", &["nope"])], 1),
            Err(Error::UnknownItem(_))
        ));
    }

    #[test]
    fn groups_become_pairs() {
        let mut c = ItemCatalog::new(1);
        for (id, style) in [("a", Some("s")), ("b", None), ("c", Some("s")), ("d", Some("s"))] {
            let mut r = ItemRecord::new(id, MultimodalEmbedding::new(vec![1.0]).unwrap());
            r.style_group = style.map(str::to_string);
            c.insert(r).unwrap();
        }
        let labels = PairLabels::from_catalog_groups(&c);
        assert_eq!(labels.pairs.len(), 2);
        assert_eq!(labels.pairs[0], ("a".into(), "c".into(), Relation::Style));
        assert_eq!(labels.pairs[1], ("c".into(), "d".into(), Relation::Style));
    }
}
