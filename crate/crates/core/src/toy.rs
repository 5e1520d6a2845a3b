//! Synthetic catalogs with planted structure.
//!
//! Items fall into Gaussian clusters. Within a cluster, items come in small
//! style groups of near-duplicates that link to each other as related
//! items. Interaction sequences walk a planted cluster transition graph,
//! picking a uniform item from each visited cluster.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::catalog::{InteractionSequence, ItemCatalog, ItemRecord, MultimodalEmbedding};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub items: usize,
    pub clusters: usize,
    pub dim: usize,
    /// Items per style group.
    pub style_group_size: usize,
    /// Standard deviation of cluster centres.
    pub center_scale: f64,
    /// Standard deviation of style-group anchors around their centre.
    pub cluster_spread: f64,
    /// Standard deviation of group members around their anchor.
    pub style_spread: f64,
    /// Out-degree of each cluster in the transition graph.
    pub successors: usize,
    /// Probability of following the graph instead of jumping to a uniform
    /// cluster.
    pub follow_prob: f64,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub history_len: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            items: 10_000,
            clusters: 50,
            dim: 32,
            style_group_size: 2,
            center_scale: 3.0,
            cluster_spread: 1.0,
            style_spread: 0.05,
            successors: 2,
            follow_prob: 0.9,
            train_sequences: 5_000,
            test_sequences: 500,
            history_len: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub catalog: ItemCatalog,
    pub train: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
    /// Cluster of each catalog item, in catalog order.
    pub cluster_of: Vec<usize>,
    /// Successor clusters of each cluster.
    pub transitions: Vec<Vec<usize>>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

pub fn generate_toy(config: &ToyConfig) -> Result<ToyWorld> {
    if config.clusters == 0 || config.items < config.clusters {
        return Err(Error::invalid("need at least one item per cluster"));
    }
    if config.dim == 0 || config.style_group_size == 0 {
        return Err(Error::invalid("dimension and style group size must be positive"));
    }
    if !(0.0..=1.0).contains(&config.follow_prob) {
        return Err(Error::invalid("follow probability must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers: Vec<Vec<f64>> = (0..config.clusters)
        .map(|_| gaussian(&mut rng, config.dim, config.center_scale))
        .collect();

    let width = (config.items - 1).to_string().len();
    let mut catalog = ItemCatalog::new(config.dim);
    let mut cluster_of = Vec::with_capacity(config.items);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.clusters];
    let mut start = 0;
    let mut group = 0;
    while start < config.items {
        // every cluster gets a group before any gets a second one
        let cluster = if group < config.clusters {
            group
        } else {
            rng.random_range(0..config.clusters)
        };
        let size = config.style_group_size.min(config.items - start);
        let mut anchor = gaussian(&mut rng, config.dim, config.cluster_spread);
        for (a, c) in anchor.iter_mut().zip(&centers[cluster]) {
            *a += c;
        }
        for k in 0..size {
            let idx = start + k;
            let emb: Vec<f64> = gaussian(&mut rng, config.dim, config.style_spread)
                .iter()
                .zip(&anchor)
                .map(|(n, a)| a + n)
                .collect();
            let mut r = ItemRecord::new(format!("i{idx:0width$}"), MultimodalEmbedding::new(emb)?);
            if size > 1 {
                let next = start + (k + 1) % size;
                r.related_item = Some(format!("i{next:0width$}"));
            }
            r.style_group = Some(format!("s{group}"));
            r.origin_group = Some(format!("o{cluster}"));
            catalog.insert(r)?;
            cluster_of.push(cluster);
            members[cluster].push(idx);
        }
        start += size;
        group += 1;
    }

    let transitions: Vec<Vec<usize>> = (0..config.clusters)
        .map(|_| {
            (0..config.successors.max(1))
                .map(|_| rng.random_range(0..config.clusters))
                .collect()
        })
        .collect();

    let walk = |rng: &mut ChaCha8Rng, pv: String| {
        let mut cluster = rng.random_range(0..config.clusters);
        let mut items = Vec::with_capacity(config.history_len + 1);
        for step in 0..=config.history_len {
            if step > 0 {
                cluster = if rng.random::<f64>() < config.follow_prob {
                    *transitions[cluster].choose(rng).expect("successors are non-empty")
                } else {
                    rng.random_range(0..config.clusters)
                };
            }
            let idx = *members[cluster].choose(rng).expect("clusters are non-empty");
            items.push(catalog.record(idx).item_id.clone());
        }
        let target = items.pop().expect("walk has at least one step");
        InteractionSequence {
            pv_id: pv,
            history: items,
            targets: vec![target],
            query: None,
        }
    };
    let train = (0..config.train_sequences)
        .map(|i| walk(&mut rng, format!("train{i}")))
        .collect();
    let test = (0..config.test_sequences)
        .map(|i| walk(&mut rng, format!("test{i}")))
        .collect();
    Ok(ToyWorld {
        catalog,
        train,
        test,
        cluster_of,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            items: 101,
            clusters: 7,
            dim: 4,
            style_group_size: 3,
            train_sequences: 20,
            test_sequences: 5,
            history_len: 4,
            seed: 9,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn shape_and_links() {
        let w = generate_toy(&small()).unwrap();
        assert_eq!(w.catalog.len(), 101);
        assert_eq!(w.catalog.record(0).item_id, "i000");
        w.catalog.validate_links().unwrap();
        assert!((0..7).all(|c| w.cluster_of.contains(&c)));
        assert_eq!(w.train.len(), 20);
        assert!(w.test.iter().all(|s| s.history.len() == 4 && s.targets.len() == 1));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_toy(&small()).unwrap(), generate_toy(&small()).unwrap());
        let other = ToyConfig { seed: 10, ..small() };
        assert_ne!(generate_toy(&small()).unwrap().catalog, generate_toy(&other).unwrap().catalog);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_toy(&ToyConfig { items: 3, clusters: 5, ..small() }).is_err());
        assert!(generate_toy(&ToyConfig { follow_prob: 2.0, ..small() }).is_err());
    }
}
