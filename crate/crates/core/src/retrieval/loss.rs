//! Next-token negative log-likelihood, in full and label-sliced form.
//!
//! Labels are aligned with tokens: the label at position `t` is scored from
//! the prefix `tokens[..t]`. A sequence of length `L` therefore has `L + 1`
//! prefix states, of which state `L` predicts nothing.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::SequenceScorer;
use crate::catalog::IGNORE_LABEL;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub tokens: Vec<usize>,
    /// `IGNORE_LABEL` marks positions left out of the loss.
    pub labels: Vec<i64>,
}

impl LabeledSequence {
    pub fn new(tokens: Vec<usize>, labels: Vec<i64>) -> Result<Self> {
        if tokens.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l < 0 && l != IGNORE_LABEL) {
            return Err(Error::invalid(format!("negative label {bad} is not the ignore sentinel")));
        }
        Ok(Self { tokens, labels })
    }

    /// Teacher forcing: every position is labelled with its own token.
    pub fn teacher_forced(tokens: Vec<usize>) -> Self {
        let labels = tokens.iter().map(|&t| t as i64).collect();
        Self { tokens, labels }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn first_valid(&self) -> Option<usize> {
        self.labels.iter().position(|&l| l >= 0)
    }
}

/// `-ln p(label_t | tokens[..t])` for a label that must fall in the band
/// of level `t mod m`.
fn position_nll<S: SequenceScorer + ?Sized>(scorer: &S, seq: &LabeledSequence, t: usize, lp: &[f64]) -> Result<f64> {
    let label = seq.labels[t] as usize;
    let band = scorer.structure().band(t % scorer.structure().levels());
    if !band.contains(&label) {
        return Err(Error::invalid(format!(
            "label {label} at position {t} outside level band {}..{}",
            band.start, band.end
        )));
    }
    Ok(-lp[label - band.start])
}

/// Sum of per-position NLL and the number of scored positions.
fn nll_sum<S: SequenceScorer + ?Sized>(scorer: &S, seq: &LabeledSequence, from: usize) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for t in from..seq.len() {
        if seq.labels[t] < 0 {
            continue;
        }
        let lp = scorer.next_token_log_probs(&seq.tokens[..t])?;
        sum += position_nll(scorer, seq, t, &lp)?;
        n += 1;
    }
    Ok((sum, n))
}

/// Mean NLL over the labelled positions of one sequence.
pub fn rec_loss<S: SequenceScorer + ?Sized>(scorer: &S, seq: &LabeledSequence) -> Result<f64> {
    let (sum, n) = nll_sum(scorer, seq, 0)?;
    if n == 0 {
        return Err(Error::invalid("sequence has no labelled position"));
    }
    Ok(sum / n as f64)
}

/// Token-weighted mean NLL over a batch.
pub fn rec_loss_batch<S: SequenceScorer + ?Sized>(scorer: &S, batch: &[LabeledSequence]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for seq in batch {
        let (s, k) = nll_sum(scorer, seq, 0)?;
        sum += s;
        n += k;
    }
    if n == 0 {
        return Err(Error::invalid("batch has no labelled position"));
    }
    Ok(sum / n as f64)
}

/// Log-probabilities at every prefix state of every row, then masked by the
/// labels. The reference the sliced form must match.
pub fn full_masked_loss<S: SequenceScorer + ?Sized>(scorer: &S, batch: &[LabeledSequence]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    let mut states = 0;
    for seq in batch {
        for t in 0..=seq.len() {
            let lp = scorer.next_token_log_probs(&seq.tokens[..t])?;
            states += 1;
            if t < seq.len() && seq.labels[t] >= 0 {
                sum += position_nll(scorer, seq, t, &lp)?;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("batch has no labelled position"));
    }
    Ok((sum / n as f64, states))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlicePlan {
    pub seq_len: usize,
    /// Smallest index, over all rows, of a row's first valid label.
    pub first_non_neg: usize,
    /// `seq_len - first_non_neg + 1` trailing prefix states.
    pub logits_to_keep: usize,
}

pub fn slice_plan(batch: &[LabeledSequence]) -> Result<SlicePlan> {
    let seq_len = batch.first().ok_or_else(|| Error::invalid("empty batch"))?.len();
    let mut first_non_neg = usize::MAX;
    for (i, seq) in batch.iter().enumerate() {
        if seq.len() != seq_len {
            return Err(Error::invalid(format!(
                "row {i} has length {}, expected padded length {seq_len}",
                seq.len()
            )));
        }
        let first = seq
            .first_valid()
            .ok_or_else(|| Error::invalid(format!("row {i} has no valid label")))?;
        first_non_neg = first_non_neg.min(first);
    }
    Ok(SlicePlan {
        seq_len,
        first_non_neg,
        logits_to_keep: seq_len - first_non_neg + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicedLoss {
    pub loss: f64,
    pub plan: SlicePlan,
    /// Prefix states the scorer was asked for.
    pub states_scored: usize,
}

/// Scores only the last `logits_to_keep` prefix states of each row, which
/// skips the leading run of ignored labels shared by the whole batch.
pub fn sliced_loss<S: SequenceScorer + ?Sized>(scorer: &S, batch: &[LabeledSequence]) -> Result<SlicedLoss> {
    let plan = slice_plan(batch)?;
    let calls = AtomicUsize::new(0);
    let counted = Counting { inner: scorer, calls: &calls };
    let mut sum = 0.0;
    let mut n = 0;
    for seq in batch {
        let (s, k) = nll_sum(&counted, seq, plan.seq_len + 1 - plan.logits_to_keep)?;
        sum += s;
        n += k;
    }
    Ok(SlicedLoss {
        loss: sum / n as f64,
        plan,
        states_scored: calls.load(Ordering::Relaxed),
    })
}

struct Counting<'a, S: ?Sized> {
    inner: &'a S,
    calls: &'a AtomicUsize,
}

impl<S: SequenceScorer + ?Sized> SequenceScorer for Counting<'_, S> {
    fn structure(&self) -> &crate::catalog::SidStructure {
        self.inner.structure()
    }

    fn next_token_log_probs(&self, context: &[usize]) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.next_token_log_probs(context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::SidStructure;

    struct Uniform(SidStructure);

    impl SequenceScorer for Uniform {
        fn structure(&self) -> &SidStructure {
            &self.0
        }

        fn next_token_log_probs(&self, context: &[usize]) -> Result<Vec<f64>> {
            let n = self.0.level_size(context.len() % self.0.levels());
            Ok(vec![-(n as f64).ln(); n])
        }
    }

    /// Puts all mass on `(previous token + 1)` within the band.
    struct Successor(SidStructure);

    impl SequenceScorer for Successor {
        fn structure(&self) -> &SidStructure {
            &self.0
        }

        fn next_token_log_probs(&self, context: &[usize]) -> Result<Vec<f64>> {
            let level = context.len() % self.0.levels();
            let n = self.0.level_size(level);
            let pick = context.last().map_or(0, |t| (t + 1) % n);
            Ok((0..n).map(|i| if i == pick { 0.0 } else { f64::NEG_INFINITY }).collect())
        }
    }

    fn seq(labels: &[i64]) -> LabeledSequence {
        LabeledSequence::new(vec![0; labels.len()], labels.to_vec()).unwrap()
    }

    #[test]
    fn slice_arithmetic() {
        let p = slice_plan(&[seq(&[-100, -100, 5, 6])]).unwrap();
        assert_eq!((p.first_non_neg, p.logits_to_keep), (2, 3));
        let p = slice_plan(&[seq(&[-100, -100, 5, 6]), seq(&[-100, 3, 4, -100])]).unwrap();
        assert_eq!((p.first_non_neg, p.logits_to_keep), (1, 4));
        assert!(slice_plan(&[seq(&[-100, -100])]).is_err());
        assert!(slice_plan(&[seq(&[1]), seq(&[1, 2])]).is_err());
    }

    #[test]
    fn uniform_scorer_costs_ln_n() {
        let s = SidStructure::new(vec![4, 4], 1).unwrap();
        let u = Uniform(s);
        let ex = LabeledSequence::new(vec![1, 5, 2, 6], vec![-100, 5, 2, 6]).unwrap();
        assert!((rec_loss(&u, &ex).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_path_costs_nothing() {
        let s = SidStructure::new(vec![4, 4], 1).unwrap();
        let sc = Successor(s);
        // 0 -> offset 1 in band 4..8 -> token 5 -> offset 2 in band 0..4 -> 2
        let ex = LabeledSequence::teacher_forced(vec![0, 5, 2]);
        assert_eq!(rec_loss(&sc, &ex).unwrap(), 0.0);
    }

    #[test]
    fn label_checks() {
        assert!(LabeledSequence::new(vec![1], vec![-5]).is_err());
        assert!(LabeledSequence::new(vec![1, 2], vec![1]).is_err());
        let u = Uniform(SidStructure::new(vec![4, 4], 1).unwrap());
        assert!(rec_loss(&u, &seq(&[-100, -100])).is_err());
        // label from the wrong band
        assert!(rec_loss(&u, &LabeledSequence::new(vec![0, 0], vec![0, 1]).unwrap()).is_err());
    }

    #[test]
    fn sliced_scores_fewer_states() {
        let u = Uniform(SidStructure::new(vec![4, 4], 1).unwrap());
        let batch = vec![
            LabeledSequence::new(vec![0, 4, 1, 5, 2, 6], vec![-100, -100, -100, 5, 2, 6]).unwrap(),
            LabeledSequence::new(vec![3, 7, 3, 7, 3, 7], vec![-100, -100, 3, 7, -100, -100]).unwrap(),
        ];
        let sliced = sliced_loss(&u, &batch).unwrap();
        let (full, states) = full_masked_loss(&u, &batch).unwrap();
        assert!((sliced.loss - full).abs() < 1e-12);
        assert_eq!(sliced.plan.logits_to_keep, 5);
        assert_eq!(states, 14);
        assert_eq!(sliced.states_scored, 5);
    }
}
