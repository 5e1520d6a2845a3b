//! Codebook learning and SID assignment.

mod codebook;
mod io;
pub mod kmeans;
mod mlp;
mod multivq;
mod random;
mod rqkmeans;
mod rqvae;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::catalog::{ItemCatalog, SemanticId, SidStructure};
use crate::error::{Error, Result};
use crate::linalg::{norm, squared_distance, sub};

pub use codebook::{residual_assign, CodebookStack, ResidualTrace};
pub use io::{load_model, parse_model, write_model};
pub use mlp::{Mlp, MlpCache};
pub use multivq::{train_multivq, MultiVq, MultiVqConfig, TrainedMultiVq};
pub use random::{assign_random, RandomQuantizer};
pub use rqkmeans::{train_rqkmeans, RqKmeansConfig, TrainedRqKmeans};
pub use rqvae::{train_rqvae, EpochStats, LossParts, RqVae, RqVaeConfig, RqVaeGradient, TrainedRqVae};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantizerKind {
    RqVae,
    RqKmeans,
    MultiVq,
    Random,
}

impl fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantizerKind::RqVae => "rqvae",
            QuantizerKind::RqKmeans => "rqkmeans",
            QuantizerKind::MultiVq => "multivq",
            QuantizerKind::Random => "random",
        })
    }
}

impl FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rqvae" => Ok(QuantizerKind::RqVae),
            "rqkmeans" => Ok(QuantizerKind::RqKmeans),
            "multivq" => Ok(QuantizerKind::MultiVq),
            "random" => Ok(QuantizerKind::Random),
            other => Err(Error::invalid(format!("unknown quantizer kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantizerModel {
    RqVae(RqVae),
    RqKmeans(CodebookStack),
    MultiVq(MultiVq),
    Random(RandomQuantizer),
}

/// An item's raw SID plus its last-level codes in preference order, which
/// is what the collision policies consume.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedItem {
    pub item_id: String,
    pub sid: SemanticId,
    pub last_level_ranking: Vec<u32>,
}

impl QuantizerModel {
    pub fn kind(&self) -> QuantizerKind {
        match self {
            QuantizerModel::RqVae(_) => QuantizerKind::RqVae,
            QuantizerModel::RqKmeans(_) => QuantizerKind::RqKmeans,
            QuantizerModel::MultiVq(_) => QuantizerKind::MultiVq,
            QuantizerModel::Random(_) => QuantizerKind::Random,
        }
    }

    pub fn structure(&self) -> &SidStructure {
        match self {
            QuantizerModel::RqVae(m) => m.structure(),
            QuantizerModel::RqKmeans(c) => c.structure(),
            QuantizerModel::MultiVq(m) => m.structure(),
            QuantizerModel::Random(r) => r.structure(),
        }
    }

    /// Codebook stack used for residual assignment, when the model has one.
    pub fn codebooks(&self) -> Option<&CodebookStack> {
        match self {
            QuantizerModel::RqVae(m) => Some(m.codebooks()),
            QuantizerModel::RqKmeans(c) => Some(c),
            _ => None,
        }
    }

    pub fn has_decoder(&self) -> bool {
        !matches!(self, QuantizerModel::Random(_))
    }

    fn check_dim(&self, h: &[f64]) -> Result<()> {
        let expected = match self {
            QuantizerModel::RqVae(m) => m.input_dim(),
            QuantizerModel::RqKmeans(c) => c.dim(),
            QuantizerModel::MultiVq(m) => m.input_dim(),
            QuantizerModel::Random(_) => return Ok(()),
        };
        if h.len() != expected {
            return Err(Error::invalid(format!(
                "embedding has dimension {}, model expects {expected}",
                h.len()
            )));
        }
        Ok(())
    }

    pub fn assign(&self, item_id: &str, h: &[f64]) -> Result<SemanticId> {
        self.check_dim(h)?;
        match self {
            QuantizerModel::RqVae(m) => Ok(m.quantize(h)?.sid),
            QuantizerModel::RqKmeans(c) => Ok(residual_assign(h, c)?.sid),
            QuantizerModel::MultiVq(m) => m.assign(h),
            QuantizerModel::Random(r) => Ok(r.assign(item_id)),
        }
    }

    /// Raw SID and the `k` best last-level codes for this item. For residual
    /// models the ranking is by distance to the last-level residual; the
    /// random baseline ranks cyclically from its drawn code.
    pub fn quantize_item(&self, item_id: &str, h: &[f64], k: usize) -> Result<QuantizedItem> {
        self.check_dim(h)?;
        let n_last = self.structure().last_level_size();
        let k = k.clamp(1, n_last);
        let (sid, ranking) = match self {
            QuantizerModel::RqVae(m) => {
                let t = m.quantize(h)?;
                let ranking = rank_last(m.codebooks(), &t, k);
                (t.sid, ranking)
            }
            QuantizerModel::RqKmeans(c) => {
                let t = residual_assign(h, c)?;
                let ranking = rank_last(c, &t, k);
                (t.sid, ranking)
            }
            QuantizerModel::MultiVq(m) => (m.assign(h)?, m.rank_last_level(h, k)),
            QuantizerModel::Random(r) => {
                let sid = r.assign(item_id);
                let start = sid.last();
                let ranking = (0..k as u32).map(|i| (start + i) % n_last as u32).collect();
                (sid, ranking)
            }
        };
        Ok(QuantizedItem {
            item_id: item_id.to_string(),
            sid,
            last_level_ranking: ranking,
        })
    }

    /// Quantizes every catalog item, in catalog order.
    pub fn quantize_catalog(&self, catalog: &ItemCatalog, k: usize) -> Result<Vec<QuantizedItem>> {
        let records: Vec<_> = catalog.iter().collect();
        records
            .par_iter()
            .map(|r| self.quantize_item(&r.item_id, r.embedding.as_slice(), k))
            .collect()
    }

    /// `D(Σ_j r_j^{c_j})`; RQ-Kmeans reconstructs with the codeword sum
    /// itself. `None` for the random baseline.
    pub fn reconstruct(&self, h: &[f64]) -> Option<Result<Vec<f64>>> {
        if let Err(e) = self.check_dim(h) {
            return Some(Err(e));
        }
        match self {
            QuantizerModel::RqVae(m) => Some(m.reconstruct(h)),
            QuantizerModel::RqKmeans(c) => Some(residual_assign(h, c).map(|t| c.quantized_sum(&t.sid))),
            QuantizerModel::MultiVq(m) => Some(m.reconstruct(h)),
            QuantizerModel::Random(_) => None,
        }
    }

    /// Distance between two last-level codewords, used to pick merge
    /// targets. The random baseline falls back to code-index distance.
    pub fn last_level_distance(&self, a: u32, b: u32) -> f64 {
        let last = self.structure().levels() - 1;
        match self {
            QuantizerModel::RqVae(m) => codeword_distance(m.codebooks(), last, a, b),
            QuantizerModel::RqKmeans(c) => codeword_distance(c, last, a, b),
            QuantizerModel::MultiVq(m) => {
                let cb = m.level_models().last().expect("at least one level").codebooks();
                codeword_distance(cb, 0, a, b)
            }
            QuantizerModel::Random(_) => (f64::from(a) - f64::from(b)).abs(),
        }
    }
}

fn rank_last(codebooks: &CodebookStack, trace: &ResidualTrace, k: usize) -> Vec<u32> {
    let last = codebooks.levels() - 1;
    codebooks
        .rank_level(last, &trace.residuals[last], k)
        .into_iter()
        .map(|(c, _)| c)
        .collect()
}

fn codeword_distance(codebooks: &CodebookStack, level: usize, a: u32, b: u32) -> f64 {
    squared_distance(codebooks.codeword(level, a as usize), codebooks.codeword(level, b as usize)).sqrt()
}

/// Mean over items of `max(0, 1 − ‖H − recon(H)‖ / ‖H‖) × 100`.
pub fn feature_fidelity_with<F>(embeddings: &[&[f64]], reconstruct: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if embeddings.is_empty() {
        return Err(Error::invalid("feature fidelity needs at least one embedding"));
    }
    let scores = embeddings
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let hn = norm(h);
            if hn == 0.0 {
                return Err(Error::invalid(format!("zero-norm embedding at index {i}")));
            }
            let err = norm(&sub(h, &reconstruct(h)?));
            Ok((1.0 - err / hn).max(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64 * 100.0)
}

pub fn feature_fidelity(model: &QuantizerModel, embeddings: &[&[f64]]) -> Result<f64> {
    if !model.has_decoder() {
        return Err(Error::invalid(format!("{} model has no decoder", model.kind())));
    }
    feature_fidelity_with(embeddings, |h| model.reconstruct(h).expect("decoder checked above"))
}
