//! Beam search over SID levels with a per-level beam width.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::SequenceScorer;
use crate::catalog::{SemanticId, SidStructure};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeamSchedule {
    widths: Vec<usize>,
}

impl BeamSchedule {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid("beam widths must be non-empty and at least 1"));
        }
        if widths.windows(2).any(|w| w[1] < w[0]) {
            log::warn!("beam schedule {widths:?} shrinks between levels");
        }
        Ok(Self { widths })
    }

    /// `[600, 1200]` for two levels, `[300, 600, 1200]` for three.
    pub fn production_default(levels: usize) -> Option<Self> {
        match levels {
            2 => Some(Self { widths: vec![600, 1200] }),
            3 => Some(Self { widths: vec![300, 600, 1200] }),
            _ => None,
        }
    }

    /// Same width at every level.
    pub fn constant(width: usize, levels: usize) -> Result<Self> {
        Self::new(vec![width; levels])
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn final_width(&self) -> usize {
        *self.widths.last().expect("schedule is non-empty")
    }
}

impl fmt::Display for BeamSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        f.write_str(&w.join(","))
    }
}

impl FromStr for BeamSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split(',')
            .map(|w| {
                w.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad beam width `{w}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(widths)
    }
}

/// Higher score first, then lexicographically smaller codes.
fn rank(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn check_context(structure: &SidStructure, context: &[usize]) -> Result<()> {
    if !context.len().is_multiple_of(structure.levels()) {
        return Err(Error::invalid(format!(
            "context of {} tokens does not end on a SID boundary",
            context.len()
        )));
    }
    Ok(())
}

/// Expands partial SIDs one level at a time and keeps the best
/// `widths[j]` after level `j`. Returns the top `k` complete SIDs with
/// their summed log-probabilities.
pub fn dynamic_beam_search<S: SequenceScorer + ?Sized>(
    scorer: &S,
    context: &[usize],
    schedule: &BeamSchedule,
    k: usize,
    query: Option<&str>,
) -> Result<Vec<(SemanticId, f64)>> {
    let structure = scorer.structure();
    if schedule.widths().len() != structure.levels() {
        return Err(Error::invalid(format!(
            "beam schedule has {} widths for {} levels",
            schedule.widths().len(),
            structure.levels()
        )));
    }
    if k == 0 || k > schedule.final_width() {
        return Err(Error::invalid(format!(
            "K = {k} must be between 1 and the final beam width {}",
            schedule.final_width()
        )));
    }
    check_context(structure, context)?;
    let mut beams: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for (level, &width) in schedule.widths().iter().enumerate() {
        let expanded = beams
            .par_iter()
            .map(|(codes, score)| {
                let mut ctx = context.to_vec();
                ctx.extend(codes.iter().enumerate().map(|(j, &c)| structure.offset(j) + c as usize));
                let lp = scorer.next_token_log_probs_with_query(&ctx, query)?;
                debug_assert_eq!(lp.len(), structure.level_size(level));
                Ok(lp
                    .into_iter()
                    .enumerate()
                    .map(|(c, l)| {
                        let mut next = codes.clone();
                        next.push(c as u32);
                        (next, score + l)
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut candidates: Vec<(Vec<u32>, f64)> = expanded.into_iter().flatten().collect();
        if candidates.len() > width {
            candidates.select_nth_unstable_by(width - 1, rank);
            candidates.truncate(width);
        }
        candidates.sort_by(rank);
        beams = candidates;
    }
    beams.truncate(k);
    Ok(beams.into_iter().map(|(c, s)| (SemanticId::new(c), s)).collect())
}

/// Every SID of the structure scored by its full chain of log-probabilities
/// and sorted like [`dynamic_beam_search`]. Exponential in the number of
/// levels; meant as a reference on tiny structures.
pub fn exhaustive_ranking<S: SequenceScorer + ?Sized>(
    scorer: &S,
    context: &[usize],
    query: Option<&str>,
) -> Result<Vec<(SemanticId, f64)>> {
    let structure = scorer.structure();
    check_context(structure, context)?;
    let total = structure.num_sids();
    if total > 1 << 20 {
        return Err(Error::invalid(format!("{total} SIDs are too many to enumerate")));
    }
    let mut out = Vec::with_capacity(total as usize);
    for index in 0..total as usize {
        let mut rem = index;
        let mut codes = vec![0u32; structure.levels()];
        for j in (0..structure.levels()).rev() {
            codes[j] = (rem % structure.level_size(j)) as u32;
            rem /= structure.level_size(j);
        }
        let mut ctx = context.to_vec();
        let mut score = 0.0;
        for (j, &c) in codes.iter().enumerate() {
            let lp = scorer.next_token_log_probs_with_query(&ctx, query)?;
            score += lp[c as usize];
            ctx.push(structure.offset(j) + c as usize);
        }
        out.push((codes, score));
    }
    out.sort_by(rank);
    Ok(out.into_iter().map(|(c, s)| (SemanticId::new(c), s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct OneHot(SidStructure);

    impl SequenceScorer for OneHot {
        fn structure(&self) -> &SidStructure {
            &self.0
        }

        fn next_token_log_probs(&self, context: &[usize]) -> Result<Vec<f64>> {
            let n = self.0.level_size(context.len() % self.0.levels());
            Ok((0..n).map(|i| if i == 1 { 0.0 } else { f64::NEG_INFINITY }).collect())
        }
    }

    #[test]
    fn schedule_parsing() {
        let s: BeamSchedule = "300,600,1200".parse().unwrap();
        assert_eq!(s, BeamSchedule::production_default(3).unwrap());
        assert_eq!(s.to_string(), "300,600,1200");
        assert!("1,0".parse::<BeamSchedule>().is_err());
        assert!("".parse::<BeamSchedule>().is_err());
        assert_eq!(BeamSchedule::production_default(2).unwrap().widths(), &[600, 1200]);
    }

    #[test]
    fn one_hot_scorer_yields_one_certain_sid() {
        let sc = OneHot(SidStructure::new(vec![3, 3], 1).unwrap());
        let sched = BeamSchedule::new(vec![1, 1]).unwrap();
        let out = dynamic_beam_search(&sc, &[], &sched, 1, None).unwrap();
        assert_eq!(out, vec![(SemanticId::new(vec![1, 1]), 0.0)]);
    }

    #[test]
    fn argument_checks() {
        let sc = OneHot(SidStructure::new(vec![3, 3], 1).unwrap());
        let sched = BeamSchedule::new(vec![2, 4]).unwrap();
        assert!(dynamic_beam_search(&sc, &[], &sched, 5, None).is_err());
        assert!(dynamic_beam_search(&sc, &[0], &sched, 1, None).is_err());
        let short = BeamSchedule::new(vec![2]).unwrap();
        assert!(dynamic_beam_search(&sc, &[], &short, 1, None).is_err());
    }
}
