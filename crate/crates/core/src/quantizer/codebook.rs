use crate::catalog::{SemanticId, SidStructure};
use crate::error::{Error, Result};
use crate::linalg::{nearest_row, squared_distance, sub_assign};

/// One codeword table per level; level `j` is `n_j x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack {
    structure: SidStructure,
    levels: Vec<Vec<f64>>,
}

impl CodebookStack {
    pub fn new(structure: SidStructure, levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.len() != structure.levels() {
            return Err(Error::invalid(format!(
                "{} codebook tables for a {}-level structure",
                levels.len(),
                structure.levels()
            )));
        }
        let dim = structure.code_dim();
        for (j, table) in levels.iter().enumerate() {
            if table.is_empty() {
                return Err(Error::invalid(format!("codebook level {} is empty", j + 1)));
            }
            if table.len() != structure.level_size(j) * dim {
                return Err(Error::invalid(format!(
                    "codebook level {} has {} values, expected {}x{dim}",
                    j + 1,
                    table.len(),
                    structure.level_size(j)
                )));
            }
            if table.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("codebook level {} has non-finite rows", j + 1)));
            }
        }
        Ok(Self { structure, levels })
    }

    pub fn zeros(structure: SidStructure) -> Self {
        let dim = structure.code_dim();
        let levels = structure.level_sizes().iter().map(|&n| vec![0.0; n * dim]).collect();
        Self { structure, levels }
    }

    pub fn structure(&self) -> &SidStructure {
        &self.structure
    }

    pub fn dim(&self) -> usize {
        self.structure.code_dim()
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, j: usize) -> &[f64] {
        &self.levels[j]
    }

    pub fn level_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.levels[j]
    }

    pub fn codeword(&self, j: usize, code: usize) -> &[f64] {
        let d = self.dim();
        &self.levels[j][code * d..(code + 1) * d]
    }

    pub fn codeword_mut(&mut self, j: usize, code: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.levels[j][code * d..(code + 1) * d]
    }

    /// `Σ_j r_j^{c_j}`.
    pub fn quantized_sum(&self, sid: &SemanticId) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (j, &c) in sid.codes().iter().enumerate() {
            for (o, r) in out.iter_mut().zip(self.codeword(j, c as usize)) {
                *o += r;
            }
        }
        out
    }

    /// Codes of `level` ordered by ascending distance to `residual`, first
    /// `k` only; equal distances keep the lower code first.
    pub fn rank_level(&self, level: usize, residual: &[f64], k: usize) -> Vec<(u32, f64)> {
        let mut ranked: Vec<(u32, f64)> = self.levels[level]
            .chunks_exact(self.dim())
            .enumerate()
            .map(|(c, row)| (c as u32, squared_distance(residual, row)))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// Result of residual quantization: the codes and every residual
/// `z_1..z_{m+1}` (`z_1` is the input, `z_{m+1}` what is left over).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub sid: SemanticId,
    pub residuals: Vec<Vec<f64>>,
}

impl ResidualTrace {
    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("trace holds z_1..z_{m+1}")
    }
}

/// Greedy level-by-level nearest-codeword assignment:
/// `c_j = argmin_c ‖z_j − r_j^c‖`, `z_{j+1} = z_j − r_j^{c_j}`.
pub fn residual_assign(z: &[f64], codebooks: &CodebookStack) -> Result<ResidualTrace> {
    let dim = codebooks.dim();
    if z.len() != dim {
        return Err(Error::invalid(format!(
            "latent has dimension {}, codebooks have {dim}",
            z.len()
        )));
    }
    let mut residuals = Vec::with_capacity(codebooks.levels() + 1);
    let mut codes = Vec::with_capacity(codebooks.levels());
    let mut current = z.to_vec();
    for j in 0..codebooks.levels() {
        let table = codebooks.level(j);
        if table.is_empty() {
            return Err(Error::invalid(format!("codebook level {} is empty", j + 1)));
        }
        let (c, _) = nearest_row(&current, table, dim);
        residuals.push(current.clone());
        sub_assign(&mut current, codebooks.codeword(j, c));
        codes.push(c as u32);
    }
    residuals.push(current);
    Ok(ResidualTrace {
        sid: SemanticId::new(codes),
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(levels: Vec<usize>, dim: usize, tables: Vec<Vec<f64>>) -> CodebookStack {
        CodebookStack::new(SidStructure::new(levels, dim).unwrap(), tables).unwrap()
    }

    #[test]
    fn nearest_of_two() {
        let cb = stack(vec![2], 2, vec![vec![0.0, 0.0, 10.0, 10.0]]);
        let t = residual_assign(&[1.0, 1.0], &cb).unwrap();
        assert_eq!(t.sid.codes(), &[0]);
        assert_eq!(t.final_residual(), &[1.0, 1.0]);
    }

    #[test]
    fn exact_decomposition_leaves_zero() {
        let cb = stack(
            vec![2, 2, 2],
            2,
            vec![
                vec![5.0, 5.0, -5.0, 5.0],
                vec![0.5, 0.0, 0.0, 0.5],
                vec![0.0, 0.0, 3.0, 3.0],
            ],
        );
        let t = residual_assign(&[-5.0, 5.5], &cb).unwrap();
        assert_eq!(t.sid.codes(), &[1, 1, 0]);
        assert_eq!(t.final_residual(), &[0.0, 0.0]);
        assert_eq!(t.residuals.len(), 4);
    }

    #[test]
    fn dimension_checked() {
        let cb = stack(vec![2], 2, vec![vec![0.0; 4]]);
        assert!(residual_assign(&[1.0], &cb).is_err());
        assert!(CodebookStack::new(SidStructure::new(vec![2], 2).unwrap(), vec![vec![0.0; 3]]).is_err());
        assert!(CodebookStack::new(SidStructure::new(vec![2], 1).unwrap(), vec![vec![0.0, f64::NAN]]).is_err());
    }

    #[test]
    fn ranking_orders_by_distance_then_code() {
        let cb = stack(vec![4], 1, vec![vec![3.0, 1.0, -1.0, 0.0]]);
        let r = cb.rank_level(0, &[0.0], 4);
        let codes: Vec<u32> = r.iter().map(|x| x.0).collect();
        assert_eq!(codes, vec![3, 1, 2, 0]);
        assert_eq!(cb.rank_level(0, &[0.0], 2).len(), 2);
    }
}
