//! Contrastive alignment of item embeddings with in-batch negatives.
//!
//! Anchor `k` is paired with positive `k`; every other positive in the batch
//! acts as a negative. Similarity is cosine scaled by a temperature.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{read_text, format_floats, ItemCatalog, MultimodalEmbedding};
use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, norm};
use crate::optim::{AdamW, AdamWConfig};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    anchors: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
}

impl AlignmentBatch {
    pub fn new(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>) -> Result<Self> {
        if anchors.len() != positives.len() {
            return Err(Error::invalid(format!(
                "{} anchors but {} positives",
                anchors.len(),
                positives.len()
            )));
        }
        if anchors.len() < 2 {
            return Err(Error::invalid("alignment batch needs at least 2 pairs"));
        }
        let dim = anchors[0].len();
        if anchors.iter().chain(&positives).any(|v| v.len() != dim) {
            return Err(Error::invalid("alignment batch vectors differ in dimension"));
        }
        Ok(Self { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].len()
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn positives(&self) -> &[Vec<f64>] {
        &self.positives
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {temperature}")))
    }
}

struct NceGrad {
    loss: f64,
    anchors: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
}

fn unit(v: &[f64], role: &str, row: usize) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::invalid(format!("zero-norm {role} at row {row}")));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Loss and its gradient with respect to the (unnormalized) input vectors.
fn nce_with_grad(anchors: &[Vec<f64>], positives: &[Vec<f64>], temperature: f64) -> Result<NceGrad> {
    let b = anchors.len();
    let mut ua = Vec::with_capacity(b);
    let mut up = Vec::with_capacity(b);
    for k in 0..b {
        ua.push(unit(&anchors[k], "anchor", k)?);
        up.push(unit(&positives[k], "positive", k)?);
    }
    let scale = 1.0 / (temperature * b as f64);
    let dim = anchors[0].len();
    let mut loss = 0.0;
    let mut g_ua = vec![vec![0.0; dim]; b];
    let mut g_up = vec![vec![0.0; dim]; b];
    let mut logits = vec![0.0; b];
    for k in 0..b {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(&ua[k].0, &up[j].0) / temperature;
        }
        let lse = log_sum_exp(&logits);
        loss += lse - logits[k];
        for j in 0..b {
            let p = (logits[j] - lse).exp();
            let g = (p - if j == k { 1.0 } else { 0.0 }) * scale;
            for d in 0..dim {
                g_ua[k][d] += g * up[j].0[d];
                g_up[j][d] += g * ua[k].0[d];
            }
        }
    }
    // back through x / |x|
    let project = |g: &mut Vec<f64>, (u, n): &(Vec<f64>, f64)| {
        let along = dot(g, u);
        for (gi, ui) in g.iter_mut().zip(u) {
            *gi = (*gi - ui * along) / n;
        }
    };
    for k in 0..b {
        project(&mut g_ua[k], &ua[k]);
        project(&mut g_up[k], &up[k]);
    }
    Ok(NceGrad {
        loss: loss / b as f64,
        anchors: g_ua,
        positives: g_up,
    })
}

/// Mean over anchors of `-log softmax_j(cos(a_k, p_j) / τ)[k]`.
pub fn info_nce_loss(batch: &AlignmentBatch, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(nce_with_grad(&batch.anchors, &batch.positives, temperature)?.loss)
}

/// Sum of the text, image and fused InfoNCE terms. Missing modalities are
/// skipped; present ones must share the fused batch size.
pub fn combined_alignment_loss(
    text: Option<&AlignmentBatch>,
    image: Option<&AlignmentBatch>,
    fused: &AlignmentBatch,
    temperature: f64,
) -> Result<f64> {
    let mut total = info_nce_loss(fused, temperature)?;
    for batch in [text, image].into_iter().flatten() {
        if batch.len() != fused.len() {
            return Err(Error::invalid(format!(
                "modality batch has {} pairs, fused batch has {}",
                batch.len(),
                fused.len()
            )));
        }
        total += info_nce_loss(batch, temperature)?;
    }
    Ok(total)
}

/// Affine map `y = W x + b` applied before the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    dim: usize,
    /// Row-major `dim x dim`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub loss: f64,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProjectionHead {
    pub fn identity(dim: usize, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Ok(Self {
            dim,
            weight,
            bias: vec![0.0; dim],
            temperature,
        })
    }

    /// Identity plus uniform noise in `[-noise, noise]` on the weights.
    pub fn init(dim: usize, temperature: f64, noise: f64, seed: u64) -> Result<Self> {
        let mut head = Self::identity(dim, temperature)?;
        if noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for w in &mut head.weight {
                *w += rng.random_range(-noise..=noise);
            }
        }
        Ok(head)
    }

    pub fn from_parts(weight: Vec<f64>, bias: Vec<f64>, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        let dim = bias.len();
        if weight.len() != dim * dim {
            return Err(Error::invalid(format!(
                "weight has {} entries, expected {dim}x{dim}",
                weight.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("projection parameters must be finite"));
        }
        Ok(Self {
            dim,
            weight,
            bias,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    fn check_dim(&self, batch: &AlignmentBatch) -> Result<()> {
        if batch.dim() != self.dim {
            return Err(Error::invalid(format!(
                "batch dimension {} does not match head dimension {}",
                batch.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn loss(&self, batch: &AlignmentBatch) -> Result<f64> {
        Ok(self.loss_and_grad(batch)?.loss)
    }

    /// InfoNCE of the projected batch and its gradient w.r.t. `W` and `b`.
    pub fn loss_and_grad(&self, batch: &AlignmentBatch) -> Result<HeadGradient> {
        self.check_dim(batch)?;
        let pa: Vec<Vec<f64>> = batch.anchors.iter().map(|x| self.project(x)).collect();
        let pp: Vec<Vec<f64>> = batch.positives.iter().map(|x| self.project(x)).collect();
        let g = nce_with_grad(&pa, &pp, self.temperature)?;
        let d = self.dim;
        let mut gw = vec![0.0; d * d];
        let mut gb = vec![0.0; d];
        let inputs = batch.anchors.iter().zip(&g.anchors).chain(batch.positives.iter().zip(&g.positives));
        for (x, gy) in inputs {
            for i in 0..d {
                gb[i] += gy[i];
                let row = &mut gw[i * d..(i + 1) * d];
                for (w, xk) in row.iter_mut().zip(x) {
                    *w += gy[i] * xk;
                }
            }
        }
        Ok(HeadGradient {
            loss: g.loss,
            weight: gw,
            bias: gb,
        })
    }

    /// Sum of per-modality terms sharing this head, with the summed gradient.
    pub fn combined_loss_and_grad(&self, batches: &[&AlignmentBatch]) -> Result<HeadGradient> {
        let mut total = HeadGradient {
            loss: 0.0,
            weight: vec![0.0; self.dim * self.dim],
            bias: vec![0.0; self.dim],
        };
        for batch in batches {
            let g = self.loss_and_grad(batch)?;
            total.loss += g.loss;
            total.weight.iter_mut().zip(&g.weight).for_each(|(a, b)| *a += b);
            total.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b);
        }
        Ok(total)
    }

    /// Catalog copy with every embedding passed through the head.
    pub fn project_catalog(&self, catalog: &ItemCatalog) -> Result<ItemCatalog> {
        if catalog.input_dim() != self.dim {
            return Err(Error::invalid(format!(
                "catalog dimension {} does not match head dimension {}",
                catalog.input_dim(),
                self.dim
            )));
        }
        let mut out = ItemCatalog::new(self.dim);
        for record in catalog.iter() {
            let mut r = record.clone();
            r.embedding = MultimodalEmbedding::new(self.project(record.embedding.as_slice()))?;
            out.insert(r)?;
        }
        Ok(out)
    }

    /// `dim` weight rows followed by one bias row, comma-separated.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.weight.chunks_exact(self.dim) {
            writeln!(out, "{}", format_floats(row).replace(',', "\t"))?;
        }
        writeln!(out, "{}", format_floats(&self.bias).replace(',', "\t"))
    }

    pub fn parse_tsv(text: &str, temperature: f64) -> Result<Self> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.split('\t')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| Error::parse(i + 1, format!("bad value `{v}`"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let Some((bias, weight_rows)) = rows.split_last() else {
            return Err(Error::parse(1, "empty projection file"));
        };
        if weight_rows.len() != bias.len() || weight_rows.iter().any(|r| r.len() != bias.len()) {
            return Err(Error::parse(1, "projection rows must form a square matrix plus a bias row"));
        }
        Self::from_parts(weight_rows.concat(), bias.clone(), temperature)
    }

    pub fn load(path: impl AsRef<Path>, temperature: f64) -> Result<Self> {
        Self::parse_tsv(&read_text(path.as_ref())?, temperature)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub temperature: f64,
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            init_noise: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProjection {
    pub head: ProjectionHead,
    /// Mean loss over the training pairs: entry 0 before training, entry `e`
    /// after epoch `e`.
    pub loss_trace: Vec<f64>,
}

/// Splits `0..n` into consecutive chunks of `size`, folding a trailing
/// singleton into the previous chunk so every batch has at least 2 pairs.
fn chunk_bounds(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(2);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + size).min(n);
        out.push(start..end);
        start = end;
    }
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
        let tail = out.pop().expect("checked non-empty");
        out.last_mut().expect("checked len > 1").end = tail.end;
    }
    out
}

fn batch_from_pairs(catalog: &ItemCatalog, pairs: &[(usize, usize)]) -> Result<AlignmentBatch> {
    let anchors = pairs
        .iter()
        .map(|&(a, _)| catalog.record(a).embedding.as_slice().to_vec())
        .collect();
    let positives = pairs
        .iter()
        .map(|&(_, p)| catalog.record(p).embedding.as_slice().to_vec())
        .collect();
    AlignmentBatch::new(anchors, positives)
}

fn mean_pair_loss(head: &ProjectionHead, catalog: &ItemCatalog, pairs: &[(usize, usize)], batch_size: usize) -> Result<f64> {
    let chunks = chunk_bounds(pairs.len(), batch_size);
    let mut total = 0.0;
    for r in &chunks {
        total += head.loss(&batch_from_pairs(catalog, &pairs[r.clone()])?)?;
    }
    Ok(total / chunks.len() as f64)
}

/// Trains a projection head on the catalog's `(item, related_item)` pairs.
pub fn train_projection(catalog: &ItemCatalog, config: &ProjectionConfig) -> Result<TrainedProjection> {
    let mut pairs = catalog.related_pairs();
    if pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 resolvable related-item pairs, found {}",
            pairs.len()
        )));
    }
    let dim = catalog.input_dim();
    let mut head = ProjectionHead::init(dim, config.temperature, config.init_noise, config.seed)?;
    let mut trace = vec![mean_pair_loss(&head, catalog, &pairs, config.batch_size)?];
    if config.epochs == 0 {
        return Ok(TrainedProjection { head, loss_trace: trace });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt_w = AdamW::new(config.optimizer, dim * dim);
    let mut opt_b = AdamW::new(config.optimizer, dim);
    let lr = config.optimizer.lr;
    let eval_pairs = pairs.clone();
    for epoch in 1..=config.epochs {
        pairs.shuffle(&mut rng);
        for r in chunk_bounds(pairs.len(), config.batch_size) {
            let batch = batch_from_pairs(catalog, &pairs[r])?;
            let g = head.loss_and_grad(&batch)?;
            if !g.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite alignment loss in epoch {epoch}")));
            }
            opt_w.step(&mut head.weight, &g.weight, lr);
            opt_b.step(&mut head.bias, &g.bias, lr);
        }
        trace.push(mean_pair_loss(&head, catalog, &eval_pairs, config.batch_size)?);
    }
    Ok(TrainedProjection { head, loss_trace: trace })
}
