//! HR@K evaluation and UserAction corpus construction.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rayon::prelude::*;

use super::beam::{dynamic_beam_search, BeamSchedule};
use super::SequenceScorer;
use crate::catalog::{sid_to_flat_tokens, InteractionSequence, SemanticId};
use crate::collision::AssignmentTable;
use crate::error::{Error, Result};

fn sid_of<'a>(table: &'a AssignmentTable, id: &str) -> Result<&'a SemanticId> {
    table.get(id).ok_or_else(|| Error::UnknownItem(id.to_string()))
}

/// Flat tokens of the given items' SIDs, concatenated.
pub fn history_context(table: &AssignmentTable, items: &[String]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(items.len() * table.structure().levels());
    for id in items {
        out.extend(sid_to_flat_tokens(sid_of(table, id)?, table.structure())?);
    }
    Ok(out)
}

/// One token stream per sequence: history then targets, no other tokens.
pub fn build_useraction_corpus(sequences: &[InteractionSequence], table: &AssignmentTable) -> Result<Vec<Vec<usize>>> {
    sequences
        .iter()
        .map(|s| {
            let mut stream = history_context(table, &s.history)?;
            stream.extend(history_context(table, &s.targets)?);
            Ok(stream)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrReport {
    pub ks: Vec<usize>,
    /// HR@K for each entry of `ks`, in the same order.
    pub values: Vec<f64>,
    pub sequences: usize,
}

impl HrReport {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.values[i])
    }

    /// `stage,K,value` rows under a header.
    pub fn write_csv<W: Write>(&self, stage: &str, mut out: W) -> std::io::Result<()> {
        writeln!(out, "stage,K,value")?;
        for (k, v) in self.ks.iter().zip(&self.values) {
            writeln!(out, "{stage},{k},{v:.6}")?;
        }
        Ok(())
    }
}

/// Decodes SIDs from each sequence's history, expands every decoded SID to
/// all items holding it (ascending item id), and scores the first K items
/// against the targets. The decode list is the full final beam.
pub fn evaluate_hr<S: SequenceScorer + ?Sized>(
    scorer: &S,
    table: &AssignmentTable,
    sequences: &[InteractionSequence],
    schedule: &BeamSchedule,
    ks: &[usize],
) -> Result<HrReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("K values must be non-empty and at least 1"));
    }
    if sequences.is_empty() {
        return Err(Error::invalid("no sequences to evaluate"));
    }
    if table.structure() != scorer.structure() {
        return Err(Error::invalid("assignment table and scorer use different SID structures"));
    }
    let mut members: BTreeMap<&SemanticId, Vec<&str>> = BTreeMap::new();
    for (id, sid) in table.iter() {
        members.entry(sid).or_default().push(id);
    }
    members.values_mut().for_each(|v| v.sort_unstable());
    let k_max = *ks.iter().max().expect("ks is non-empty");
    let per_seq = sequences
        .par_iter()
        .map(|s| {
            if s.targets.is_empty() {
                return Err(Error::invalid(format!("sequence {} has no targets", s.pv_id)));
            }
            for t in &s.targets {
                sid_of(table, t)?;
            }
            let context = history_context(table, &s.history)?;
            let decoded = dynamic_beam_search(scorer, &context, schedule, schedule.final_width(), s.query.as_deref())?;
            let mut ranked: Vec<&str> = Vec::new();
            for (sid, _) in &decoded {
                if ranked.len() >= k_max {
                    break;
                }
                if let Some(items) = members.get(sid) {
                    ranked.extend(items.iter().copied());
                }
            }
            let clicked: HashSet<&str> = s.targets.iter().map(String::as_str).collect();
            Ok(ks
                .iter()
                .map(|&k| {
                    let hits = ranked.iter().take(k).filter(|i| clicked.contains(*i)).count();
                    hits as f64 / clicked.len() as f64
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_seq.len() as f64;
    let values = (0..ks.len())
        .map(|i| per_seq.iter().map(|v| v[i]).sum::<f64>() / n)
        .collect();
    Ok(HrReport {
        ks: ks.to_vec(),
        values,
        sequences: sequences.len(),
    })
}
