//! Residual-quantized autoencoder.
//!
//! Per item the objective is
//!
//! ```text
//! ‖D(q) − H‖₂ + Σ_j ‖sg(z_j) − r_j‖² + β Σ_j ‖z_j − sg(r_j)‖²
//! ```
//!
//! with `z = E(H)`, `z_j` the level-`j` residual (earlier codewords held
//! constant), `r_j = r_j^{c_j}` and `q = Σ_j r_j`. The decoder input uses the
//! straight-through estimator, so the reconstruction gradient reaches the
//! encoder as if `q` were `z`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::codebook::{residual_assign, CodebookStack, ResidualTrace};
use super::kmeans::kmeans_plus_plus;
use super::mlp::Mlp;
use crate::catalog::SidStructure;
use crate::error::{Error, Result};
use crate::linalg::{norm, squared_distance, sub};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};

/// Items per parallel work unit; fixed so gradient sums do not depend on the
/// thread count.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeConfig {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub commitment_beta: f64,
    /// Reset codewords unused for a whole epoch to a random batch residual.
    pub reinit_dead_codes: bool,
    pub seed: u64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![256, 256],
            decoder_hidden: vec![256, 256],
            epochs: 150,
            warmup_epochs: 40,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            commitment_beta: 0.25,
            reinit_dead_codes: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl LossParts {
    fn add(&mut self, other: &LossParts) {
        self.total += other.total;
        self.recon += other.recon;
        self.codebook += other.codebook;
        self.commitment += other.commitment;
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        self.recon *= s;
        self.codebook *= s;
        self.commitment *= s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeGradient {
    pub loss: LossParts,
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    /// One flat gradient per codebook level.
    pub codebooks: Vec<Vec<f64>>,
}

impl RqVaeGradient {
    fn zeros(model: &RqVae) -> Self {
        Self {
            loss: LossParts::default(),
            encoder: vec![0.0; model.encoder.params().len()],
            decoder: vec![0.0; model.decoder.params().len()],
            codebooks: (0..model.codebooks.levels())
                .map(|j| vec![0.0; model.codebooks.level(j).len()])
                .collect(),
        }
    }

    fn add(&mut self, other: &RqVaeGradient) {
        self.loss.add(&other.loss);
        let pairs = [(&mut self.encoder, &other.encoder), (&mut self.decoder, &other.decoder)];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.codebooks.iter_mut().zip(&other.codebooks) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        self.loss.scale(s);
        self.encoder.iter_mut().for_each(|x| *x *= s);
        self.decoder.iter_mut().for_each(|x| *x *= s);
        self.codebooks.iter_mut().flatten().for_each(|x| *x *= s);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVae {
    encoder: Mlp,
    decoder: Mlp,
    codebooks: CodebookStack,
}

/// Model quality after an epoch; epoch 0 is the initialized model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total_loss: f64,
    pub recon_loss: f64,
    /// Mean feature fidelity in percent over items with non-zero norm.
    pub feature_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRqVae {
    pub model: RqVae,
    pub trace: Vec<EpochStats>,
}

impl RqVae {
    /// Randomly initialized nets and all-zero codebooks.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        structure: &SidStructure,
        encoder_hidden: &[usize],
        decoder_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let code_dim = structure.code_dim();
        let enc_dims: Vec<usize> = std::iter::once(input_dim)
            .chain(encoder_hidden.iter().copied())
            .chain(std::iter::once(code_dim))
            .collect();
        let dec_dims: Vec<usize> = std::iter::once(code_dim)
            .chain(decoder_hidden.iter().copied())
            .chain(std::iter::once(input_dim))
            .collect();
        let encoder = Mlp::new(&enc_dims, rng)?;
        let decoder = Mlp::new(&dec_dims, rng)?;
        Ok(Self {
            encoder,
            decoder,
            codebooks: CodebookStack::zeros(structure.clone()),
        })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, codebooks: CodebookStack) -> Result<Self> {
        let d = codebooks.dim();
        if encoder.output_dim() != d || decoder.input_dim() != d {
            return Err(Error::invalid(format!(
                "encoder output {} / decoder input {} must equal codeword dimension {d}",
                encoder.output_dim(),
                decoder.input_dim()
            )));
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(Error::invalid("decoder output must match encoder input"));
        }
        Ok(Self {
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn codebooks(&self) -> &CodebookStack {
        &self.codebooks
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn codebooks_mut(&mut self) -> &mut CodebookStack {
        &mut self.codebooks
    }

    pub fn structure(&self) -> &SidStructure {
        self.codebooks.structure()
    }

    pub fn encode(&self, h: &[f64]) -> Vec<f64> {
        self.encoder.forward(h)
    }

    pub fn quantize(&self, h: &[f64]) -> Result<ResidualTrace> {
        self.check_input(h)?;
        residual_assign(&self.encode(h), &self.codebooks)
    }

    /// `D(Σ_j r_j^{c_j})`.
    pub fn reconstruct(&self, h: &[f64]) -> Result<Vec<f64>> {
        let trace = self.quantize(h)?;
        Ok(self.decoder.forward(&self.codebooks.quantized_sum(&trace.sid)))
    }

    fn check_input(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "embedding has dimension {}, model expects {}",
                h.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn item_grad(&self, h: &[f64], beta: f64, grad: &mut RqVaeGradient) -> ResidualTrace {
        let enc = self.encoder.forward_cached(h);
        let z = enc.output();
        let trace = residual_assign(z, &self.codebooks).expect("dimensions checked by caller");
        let q = self.codebooks.quantized_sum(&trace.sid);
        let dec = self.decoder.forward_cached(&q);
        let diff = sub(dec.output(), h);
        let recon = norm(&diff);
        let grad_y: Vec<f64> = if recon > 0.0 {
            diff.iter().map(|d| d / recon).collect()
        } else {
            vec![0.0; diff.len()]
        };
        // straight-through: dL/dz picks up dL/dq
        let mut grad_z = self.decoder.backward(&dec, &grad_y, &mut grad.decoder);
        let mut sq = 0.0;
        for (j, &c) in trace.sid.codes().iter().enumerate() {
            let zj = &trace.residuals[j];
            let r = self.codebooks.codeword(j, c as usize);
            sq += squared_distance(zj, r);
            let dim = r.len();
            let g_cb = &mut grad.codebooks[j][c as usize * dim..(c as usize + 1) * dim];
            for d in 0..dim {
                let delta = zj[d] - r[d];
                g_cb[d] -= 2.0 * delta;
                grad_z[d] += 2.0 * beta * delta;
            }
        }
        self.encoder.backward(&enc, &grad_z, &mut grad.encoder);
        let parts = LossParts {
            total: recon + sq + beta * sq,
            recon,
            codebook: sq,
            commitment: sq,
        };
        grad.loss.add(&parts);
        trace
    }

    /// Batch-mean loss and gradient. Also returns each item's quantization.
    pub fn loss_and_grad_traced(&self, batch: &[&[f64]], beta: f64) -> Result<(RqVaeGradient, Vec<ResidualTrace>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for h in batch {
            self.check_input(h)?;
        }
        let partials: Vec<(RqVaeGradient, Vec<ResidualTrace>)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = RqVaeGradient::zeros(self);
                let traces = chunk.iter().map(|h| self.item_grad(h, beta, &mut g)).collect();
                (g, traces)
            })
            .collect();
        let mut total = RqVaeGradient::zeros(self);
        let mut traces = Vec::with_capacity(batch.len());
        for (g, t) in partials {
            total.add(&g);
            traces.extend(t);
        }
        total.scale(1.0 / batch.len() as f64);
        Ok((total, traces))
    }

    pub fn loss_and_grad(&self, batch: &[&[f64]], beta: f64) -> Result<RqVaeGradient> {
        Ok(self.loss_and_grad_traced(batch, beta)?.0)
    }

    /// Mean losses and feature fidelity over `data`.
    pub fn evaluate(&self, data: &[&[f64]], beta: f64, epoch: usize) -> Result<EpochStats> {
        for h in data {
            self.check_input(h)?;
        }
        let rows: Vec<(f64, f64, Option<f64>)> = data
            .par_iter()
            .map(|h| {
                let trace = residual_assign(&self.encode(h), &self.codebooks).expect("checked");
                let y = self.decoder.forward(&self.codebooks.quantized_sum(&trace.sid));
                let recon = norm(&sub(&y, h));
                let sq: f64 = trace.residuals[1..].iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum();
                let hn = norm(h);
                let fid = (hn > 0.0).then(|| (1.0 - recon / hn).max(0.0) * 100.0);
                (recon + (1.0 + beta) * sq, recon, fid)
            })
            .collect();
        let n = rows.len().max(1) as f64;
        let total = rows.iter().map(|r| r.0).sum::<f64>() / n;
        let recon = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let fids: Vec<f64> = rows.iter().filter_map(|r| r.2).collect();
        let fidelity = if fids.is_empty() {
            f64::NAN
        } else {
            fids.iter().sum::<f64>() / fids.len() as f64
        };
        Ok(EpochStats {
            epoch,
            total_loss: total,
            recon_loss: recon,
            feature_fidelity: fidelity,
        })
    }

    /// k-means++ seeding of every level from the residuals of `batch`.
    pub fn init_codebooks<R: Rng + ?Sized>(&mut self, batch: &[&[f64]], rng: &mut R) {
        let mut residuals: Vec<Vec<f64>> = batch.iter().map(|h| self.encode(h)).collect();
        let dim = self.codebooks.dim();
        for j in 0..self.codebooks.levels() {
            let n = self.codebooks.structure().level_size(j);
            let pts: Vec<&[f64]> = residuals.iter().map(Vec::as_slice).collect();
            let centroids = kmeans_plus_plus(&pts, n, rng);
            self.codebooks.level_mut(j).copy_from_slice(&centroids);
            for r in &mut residuals {
                let (c, _) = crate::linalg::nearest_row(r, &centroids, dim);
                crate::linalg::sub_assign(r, &centroids[c * dim..(c + 1) * dim]);
            }
        }
    }
}

pub(crate) fn check_embeddings(embeddings: &[&[f64]]) -> Result<usize> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::invalid("at least one embedding is required"))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::invalid("embeddings must have positive dimension"));
    }
    if let Some(i) = embeddings.iter().position(|e| e.len() != d) {
        return Err(Error::invalid(format!(
            "embedding {i} has dimension {}, expected {d}",
            embeddings[i].len()
        )));
    }
    Ok(d)
}

/// Trains encoder, decoder and codebooks jointly.
pub fn train_rqvae(embeddings: &[&[f64]], structure: &SidStructure, config: &RqVaeConfig) -> Result<TrainedRqVae> {
    let input_dim = check_embeddings(embeddings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = RqVae::new(input_dim, structure, &config.encoder_hidden, &config.decoder_hidden, &mut rng)?;
    let n = embeddings.len();
    let batch_size = config.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let first: Vec<&[f64]> = order[..batch_size].iter().map(|&i| embeddings[i]).collect();
    model.init_codebooks(&first, &mut rng);

    let beta = config.commitment_beta;
    let mut trace = vec![model.evaluate(embeddings, beta, 0)?];
    let steps_per_epoch = n.div_ceil(batch_size);
    let schedule = CosineSchedule {
        base_lr: config.optimizer.lr,
        warmup_steps: config.warmup_epochs.min(config.epochs) * steps_per_epoch,
        total_steps: config.epochs * steps_per_epoch,
    };
    let mut opt_enc = AdamW::new(config.optimizer, model.encoder.params().len());
    let mut opt_dec = AdamW::new(config.optimizer, model.decoder.params().len());
    let mut opt_cb: Vec<AdamW> = (0..structure.levels())
        .map(|j| AdamW::new(config.optimizer, model.codebooks.level(j).len()))
        .collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        if epoch > 1 {
            order.shuffle(&mut rng);
        }
        let mut used: Vec<Vec<bool>> = structure.level_sizes().iter().map(|&s| vec![false; s]).collect();
        let mut last_residuals: Vec<Vec<Vec<f64>>> = Vec::new();
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| embeddings[i]).collect();
            let (grad, traces) = model.loss_and_grad_traced(&batch, beta)?;
            if !grad.loss.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite RQ-VAE loss in epoch {epoch}")));
            }
            let lr = schedule.lr(step);
            step += 1;
            opt_enc.step(model.encoder.params_mut(), &grad.encoder, lr);
            opt_dec.step(model.decoder.params_mut(), &grad.decoder, lr);
            for (j, opt) in opt_cb.iter_mut().enumerate() {
                opt.step(model.codebooks.level_mut(j), &grad.codebooks[j], lr);
            }
            for t in &traces {
                for (j, &c) in t.sid.codes().iter().enumerate() {
                    used[j][c as usize] = true;
                }
            }
            last_residuals = (0..structure.levels())
                .map(|j| traces.iter().map(|t| t.residuals[j].clone()).collect())
                .collect();
        }
        if config.reinit_dead_codes && epoch < config.epochs {
            for (j, flags) in used.iter().enumerate() {
                for (c, &u) in flags.iter().enumerate() {
                    if !u {
                        let pool = &last_residuals[j];
                        let pick = &pool[rng.random_range(0..pool.len())];
                        model.codebooks.codeword_mut(j, c).copy_from_slice(pick);
                    }
                }
            }
        }
        let stats = model.evaluate(embeddings, beta, epoch)?;
        if !stats.total_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite RQ-VAE loss in epoch {epoch}")));
        }
        trace.push(stats);
    }
    Ok(TrainedRqVae { model, trace })
}
