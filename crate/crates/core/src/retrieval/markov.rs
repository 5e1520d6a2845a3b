//! Count-based order-`o` Markov scorer over flat SID tokens.
//!
//! File format:
//!
//! ```text
//! markov     <order>  <alpha>
//! structure  <n_1,...,n_m>  <code_dim>
//! ctx        <level>  <context tokens csv, or ->  <token:count,...>
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::SequenceScorer;
use crate::catalog::{read_text, SidStructure};
use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 2;
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq)]
struct NextCounts {
    total: u64,
    /// Offset within the level band to count.
    next: HashMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovScorer {
    structure: SidStructure,
    order: usize,
    alpha: f64,
    counts: HashMap<(usize, Vec<usize>), NextCounts>,
}

impl MarkovScorer {
    pub fn new(structure: SidStructure, order: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("smoothing alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            structure,
            order,
            alpha,
            counts: HashMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of distinct (level, context) keys seen in training.
    pub fn num_contexts(&self) -> usize {
        self.counts.len()
    }

    fn key(&self, context: &[usize]) -> (usize, Vec<usize>) {
        let level = context.len() % self.structure.levels();
        let start = context.len().saturating_sub(self.order);
        (level, context[start..].to_vec())
    }

    fn check_stream(&self, stream: &[usize]) -> Result<()> {
        let m = self.structure.levels();
        if !stream.len().is_multiple_of(m) {
            return Err(Error::invalid(format!(
                "stream of {} tokens is not a whole number of {m}-token SIDs",
                stream.len()
            )));
        }
        for (t, &tok) in stream.iter().enumerate() {
            let band = self.structure.band(t % m);
            if !band.contains(&tok) {
                return Err(Error::InvalidSid(format!(
                    "token {tok} at position {t} outside level {} band {}..{}",
                    t % m + 1,
                    band.start,
                    band.end
                )));
            }
        }
        Ok(())
    }

    /// Adds every (context, next token) pair of one stream to the counts.
    pub fn observe(&mut self, stream: &[usize]) -> Result<()> {
        self.check_stream(stream)?;
        let m = self.structure.levels();
        for t in 0..stream.len() {
            let key = self.key(&stream[..t]);
            let offset = (stream[t] - self.structure.offset(t % m)) as u32;
            let entry = self.counts.entry(key).or_default();
            entry.total += 1;
            *entry.next.entry(offset).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Count of `token` after `context`, for inspection.
    pub fn count(&self, context: &[usize], token: usize) -> u64 {
        let key = self.key(context);
        let offset = self.structure.offset(key.0);
        self.counts
            .get(&key)
            .and_then(|c| token.checked_sub(offset).and_then(|o| c.next.get(&(o as u32))))
            .copied()
            .unwrap_or(0)
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "markov\t{}\t{}", self.order, self.alpha)?;
        writeln!(out, "structure\t{}\t{}", self.structure, self.structure.code_dim())?;
        let mut keys: Vec<_> = self.counts.keys().collect();
        keys.sort();
        for key in keys {
            let ctx = if key.1.is_empty() {
                "-".to_string()
            } else {
                key.1.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
            };
            let mut next: Vec<_> = self.counts[key].next.iter().collect();
            next.sort();
            let next: Vec<String> = next.iter().map(|(t, c)| format!("{t}:{c}")).collect();
            writeln!(out, "ctx\t{}\t{ctx}\t{}", key.0, next.join(","))?;
        }
        Ok(())
    }
}

impl SequenceScorer for MarkovScorer {
    fn structure(&self) -> &SidStructure {
        &self.structure
    }

    /// `ln((count + α) / (total + α·n))` over the band of the next level.
    fn next_token_log_probs(&self, context: &[usize]) -> Result<Vec<f64>> {
        let key = self.key(context);
        let n = self.structure.level_size(key.0);
        let entry = self.counts.get(&key);
        let total = entry.map_or(0, |c| c.total) as f64;
        let denom = (total + self.alpha * n as f64).ln();
        let mut out = vec![self.alpha.ln() - denom; n];
        if let Some(c) = entry {
            for (&t, &k) in &c.next {
                out[t as usize] = (k as f64 + self.alpha).ln() - denom;
            }
        }
        Ok(out)
    }
}

pub fn train_markov_scorer(
    streams: &[Vec<usize>],
    order: usize,
    alpha: f64,
    structure: &SidStructure,
) -> Result<MarkovScorer> {
    let mut scorer = MarkovScorer::new(structure.clone(), order, alpha)?;
    for (i, s) in streams.iter().enumerate() {
        scorer
            .observe(s)
            .map_err(|e| Error::invalid(format!("stream {}: {e}", i + 1)))?;
    }
    Ok(scorer)
}

pub fn parse_markov_scorer(text: &str) -> Result<MarkovScorer> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut next_line = |what: &str| {
        lines
            .next()
            .map(|(i, l)| (i + 1, l.split('\t').collect::<Vec<_>>()))
            .ok_or_else(|| Error::parse(0, format!("missing {what} line")))
    };
    let (line, f) = next_line("markov")?;
    if f.len() != 3 || f[0] != "markov" {
        return Err(Error::parse(line, "expected `markov<TAB>order<TAB>alpha`"));
    }
    let order = f[1].parse().map_err(|_| Error::parse(line, "bad order"))?;
    let alpha = f[2].parse().map_err(|_| Error::parse(line, "bad alpha"))?;
    let (line, f) = next_line("structure")?;
    if f.len() != 3 || f[0] != "structure" {
        return Err(Error::parse(line, "expected `structure<TAB>levels<TAB>code_dim`"));
    }
    let dim = f[2].parse().map_err(|_| Error::parse(line, "bad code dimension"))?;
    let structure = SidStructure::parse_levels(f[1], dim).map_err(|e| Error::parse(line, e.to_string()))?;
    let mut scorer = MarkovScorer::new(structure, order, alpha).map_err(|e| Error::parse(1, e.to_string()))?;
    for (idx, raw) in lines {
        let line = idx + 1;
        let f: Vec<&str> = raw.split('\t').collect();
        if f.len() != 4 || f[0] != "ctx" {
            return Err(Error::parse(line, "expected `ctx<TAB>level<TAB>context<TAB>counts`"));
        }
        let level: usize = f[1].parse().map_err(|_| Error::parse(line, "bad level"))?;
        if level >= scorer.structure.levels() {
            return Err(Error::parse(line, format!("level {level} out of range")));
        }
        let ctx = if f[2] == "-" {
            Vec::new()
        } else {
            f[2].split(',')
                .map(|t| t.parse::<usize>().map_err(|_| Error::parse(line, format!("bad token `{t}`"))))
                .collect::<Result<Vec<_>>>()?
        };
        let n = scorer.structure.level_size(level);
        let mut entry = NextCounts::default();
        for pair in f[3].split(',') {
            let (t, c) = pair
                .split_once(':')
                .ok_or_else(|| Error::parse(line, format!("bad count `{pair}`")))?;
            let t: u32 = t.parse().map_err(|_| Error::parse(line, format!("bad token `{t}`")))?;
            let c: u64 = c.parse().map_err(|_| Error::parse(line, format!("bad count `{c}`")))?;
            if t as usize >= n {
                return Err(Error::parse(line, format!("token offset {t} outside level band of {n}")));
            }
            entry.total += c;
            entry.next.insert(t, c);
        }
        scorer.counts.insert((level, ctx), entry);
    }
    Ok(scorer)
}

pub fn load_markov_scorer(path: impl AsRef<Path>) -> Result<MarkovScorer> {
    parse_markov_scorer(&read_text(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s() -> SidStructure {
        SidStructure::new(vec![2, 3], 1).unwrap()
    }

    #[test]
    fn hand_counted_probabilities() {
        // tokens: level 0 in 0..2, level 1 in 2..5
        let corpus = vec![vec![0, 2, 1, 4], vec![0, 2], vec![0, 3, 1, 4]];
        let m = train_markov_scorer(&corpus, 1, 0.5, &s()).unwrap();
        let lp = m.next_token_log_probs(&[]).unwrap();
        // empty context: token 0 seen 3 times out of 3
        assert!((lp[0] - (3.5f64 / 4.0).ln()).abs() < 1e-12);
        assert!((lp[1] - (0.5f64 / 4.0).ln()).abs() < 1e-12);
        // after token 0 at level 1: 2 twice, 3 once
        let lp = m.next_token_log_probs(&[0]).unwrap();
        assert_eq!(lp.len(), 3);
        assert!((lp[0] - (2.5f64 / 4.5).ln()).abs() < 1e-12);
        assert!((lp[1] - (1.5f64 / 4.5).ln()).abs() < 1e-12);
        assert!((lp[2] - (0.5f64 / 4.5).ln()).abs() < 1e-12);
        assert_eq!(m.count(&[0], 2), 2);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let m = train_markov_scorer(&[vec![0, 2]], 2, 1.0, &s()).unwrap();
        let lp = m.next_token_log_probs(&[1, 4, 1]).unwrap();
        for v in lp {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bands_normalize() {
        let corpus = vec![vec![0, 2, 1, 4, 0, 3], vec![1, 4, 1, 4]];
        let m = train_markov_scorer(&corpus, 2, 0.01, &s()).unwrap();
        for ctx in [vec![], vec![0], vec![0, 2], vec![1, 4, 1]] {
            let total: f64 = m.next_token_log_probs(&ctx).unwrap().iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_streams() {
        assert!(train_markov_scorer(&[vec![2, 2]], 2, 1.0, &s()).is_err());
        assert!(train_markov_scorer(&[vec![0]], 2, 1.0, &s()).is_err());
        assert!(MarkovScorer::new(s(), 2, 0.0).is_err());
    }

    #[test]
    fn round_trip() {
        let corpus = vec![vec![0, 2, 1, 4, 0, 3], vec![1, 4, 1, 4]];
        let m = train_markov_scorer(&corpus, 3, 0.25, &s()).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = parse_markov_scorer(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(matches!(
            parse_markov_scorer("markov\t2\t1\nstructure\t2,3\t1\nctx\t5\t-\t0:1\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
