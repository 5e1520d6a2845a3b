//! One independent single-level VQ autoencoder per SID level. Every level
//! encodes the original embedding; nothing is chained between levels.

use super::rqvae::{check_embeddings, train_rqvae, EpochStats, RqVae, RqVaeConfig};
use crate::catalog::{SemanticId, SidStructure};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MultiVqConfig {
    pub base: RqVaeConfig,
    /// Seed per level; defaults to `base.seed + level`.
    pub level_seeds: Option<Vec<u64>>,
}


#[derive(Debug, Clone, PartialEq)]
pub struct MultiVq {
    structure: SidStructure,
    levels: Vec<RqVae>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMultiVq {
    pub model: MultiVq,
    pub traces: Vec<Vec<EpochStats>>,
}

impl MultiVq {
    pub fn from_levels(structure: SidStructure, levels: Vec<RqVae>) -> Result<Self> {
        if levels.len() != structure.levels() {
            return Err(Error::invalid("one VQ model per level required"));
        }
        for (j, vq) in levels.iter().enumerate() {
            if vq.structure().level_sizes() != [structure.level_size(j)] {
                return Err(Error::invalid(format!("VQ model {} has the wrong codebook size", j + 1)));
            }
        }
        Ok(Self { structure, levels })
    }

    pub fn structure(&self) -> &SidStructure {
        &self.structure
    }

    pub fn level_models(&self) -> &[RqVae] {
        &self.levels
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0].input_dim()
    }

    pub fn assign(&self, h: &[f64]) -> Result<SemanticId> {
        let codes = self
            .levels
            .iter()
            .map(|vq| vq.quantize(h).map(|t| t.sid.codes()[0]))
            .collect::<Result<Vec<_>>>()?;
        Ok(SemanticId::new(codes))
    }

    /// Last-level codes by distance to the last encoder's output.
    pub fn rank_last_level(&self, h: &[f64], k: usize) -> Vec<u32> {
        let last = self.levels.last().expect("at least one level");
        let z = last.encode(h);
        last.codebooks().rank_level(0, &z, k).into_iter().map(|(c, _)| c).collect()
    }

    /// Mean of the per-level reconstructions.
    pub fn reconstruct(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; h.len()];
        for vq in &self.levels {
            for (o, v) in out.iter_mut().zip(vq.reconstruct(h)?) {
                *o += v;
            }
        }
        let m = self.levels.len() as f64;
        out.iter_mut().for_each(|v| *v /= m);
        Ok(out)
    }
}

pub fn train_multivq(embeddings: &[&[f64]], structure: &SidStructure, config: &MultiVqConfig) -> Result<TrainedMultiVq> {
    check_embeddings(embeddings)?;
    let seeds: Vec<u64> = match &config.level_seeds {
        Some(s) if s.len() == structure.levels() => s.clone(),
        Some(s) => {
            return Err(Error::invalid(format!(
                "{} level seeds for {} levels",
                s.len(),
                structure.levels()
            )))
        }
        None => (0..structure.levels() as u64).map(|j| config.base.seed.wrapping_add(j)).collect(),
    };
    let mut levels = Vec::with_capacity(structure.levels());
    let mut traces = Vec::with_capacity(structure.levels());
    for (j, &seed) in seeds.iter().enumerate() {
        let single = SidStructure::new(vec![structure.level_size(j)], structure.code_dim())?;
        let cfg = RqVaeConfig {
            seed,
            ..config.base.clone()
        };
        let trained = train_rqvae(embeddings, &single, &cfg)?;
        levels.push(trained.model);
        traces.push(trained.trace);
    }
    Ok(TrainedMultiVq {
        model: MultiVq {
            structure: structure.clone(),
            levels,
        },
        traces,
    })
}
