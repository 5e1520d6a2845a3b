use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::codebook::CodebookStack;
use super::kmeans::kmeans;
use super::rqvae::check_embeddings;
use crate::catalog::SidStructure;
use crate::error::Result;
use crate::linalg::sub_assign;

#[derive(Debug, Clone, PartialEq)]
pub struct RqKmeansConfig {
    /// Lloyd iterations per level (stops early on convergence).
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for RqKmeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRqKmeans {
    /// Codewords live in the input space, so the stack's code dimension is
    /// the embedding dimension.
    pub codebooks: CodebookStack,
    /// Per level, the k-means objective after every assignment step.
    pub objective_traces: Vec<Vec<f64>>,
}

/// Level `j` codebook = k-means centroids of the level-`j` residuals.
pub fn train_rqkmeans(embeddings: &[&[f64]], structure: &SidStructure, config: &RqKmeansConfig) -> Result<TrainedRqKmeans> {
    let dim = check_embeddings(embeddings)?;
    let structure = SidStructure::new(structure.level_sizes().to_vec(), dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut residuals: Vec<Vec<f64>> = embeddings.iter().map(|e| e.to_vec()).collect();
    let mut levels = Vec::with_capacity(structure.levels());
    let mut traces = Vec::with_capacity(structure.levels());
    for &n in structure.level_sizes() {
        let pts: Vec<&[f64]> = residuals.iter().map(Vec::as_slice).collect();
        let result = kmeans(&pts, n, config.max_iters, &mut rng);
        for (r, &a) in residuals.iter_mut().zip(&result.assignments) {
            sub_assign(r, &result.centroids[a * dim..(a + 1) * dim]);
        }
        levels.push(result.centroids);
        traces.push(result.objective_trace);
    }
    Ok(TrainedRqKmeans {
        codebooks: CodebookStack::new(structure, levels)?,
        objective_traces: traces,
    })
}
