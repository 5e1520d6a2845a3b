//! Item catalog, interaction sequences, and the SID flat-token encoding.
//!
//! All files are UTF-8 TSV. Item catalog rows are
//! `item_id, embedding, [sid], related_item, style_group, origin_group`
//! where everything after the embedding is optional. Sequence rows are
//! `pv_id, targets, query, history`.

use std::fmt;
use std::fmt::Write as _;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Histories longer than this keep only their most recent entries.
pub const MAX_HISTORY: usize = 100;

/// Production defaults for the fused feature and codeword dimensions.
pub const DEFAULT_INPUT_DIM: usize = 512;
pub const DEFAULT_CODE_DIM: usize = 64;

/// Sentinel label for positions excluded from the next-token loss.
pub const IGNORE_LABEL: i64 = -100;

/// Level sizes `n_1..n_m` of a hierarchical identifier plus the latent
/// codeword dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SidStructure {
    level_sizes: Vec<usize>,
    code_dim: usize,
}

impl SidStructure {
    pub fn new(level_sizes: Vec<usize>, code_dim: usize) -> Result<Self> {
        if level_sizes.is_empty() {
            return Err(Error::InvalidStructure("at least one level required".into()));
        }
        if let Some(n) = level_sizes.iter().find(|&&n| n < 2) {
            return Err(Error::InvalidStructure(format!(
                "every level needs at least 2 codewords, got {n}"
            )));
        }
        if level_sizes.iter().any(|&n| n > u32::MAX as usize) {
            return Err(Error::InvalidStructure("level size exceeds u32 range".into()));
        }
        if code_dim == 0 {
            return Err(Error::InvalidStructure("code_dim must be positive".into()));
        }
        Ok(Self {
            level_sizes,
            code_dim,
        })
    }

    /// Parses a comma-separated level list such as `8192,8192,8192`.
    pub fn parse_levels(levels: &str, code_dim: usize) -> Result<Self> {
        let sizes = levels
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| {
                    Error::InvalidStructure(format!("bad level size `{s}` in `{levels}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sizes, code_dim)
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.level_sizes[level]
    }

    pub fn last_level_size(&self) -> usize {
        *self.level_sizes.last().expect("structure has at least one level")
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    /// First flat token of `level` (sum of all earlier level sizes).
    pub fn offset(&self, level: usize) -> usize {
        self.level_sizes[..level].iter().sum()
    }

    /// Flat-token band occupied by `level`.
    pub fn band(&self, level: usize) -> Range<usize> {
        let start = self.offset(level);
        start..start + self.level_sizes[level]
    }

    /// Total number of flat tokens across all levels.
    pub fn vocab_size(&self) -> usize {
        self.level_sizes.iter().sum()
    }

    /// Number of distinct identifiers, `Π n_j`.
    pub fn num_sids(&self) -> u128 {
        self.level_sizes.iter().map(|&n| n as u128).product()
    }

    pub fn validate(&self, sid: &SemanticId) -> Result<()> {
        if sid.len() != self.levels() {
            return Err(Error::InvalidSid(format!(
                "{sid} has {} codes, structure has {} levels",
                sid.len(),
                self.levels()
            )));
        }
        for (level, (&code, &n)) in sid.codes().iter().zip(&self.level_sizes).enumerate() {
            if code as usize >= n {
                return Err(Error::InvalidSid(format!(
                    "{sid}: code {code} at level {} out of range 0..{n}",
                    level + 1
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for SidStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self.level_sizes.iter().map(|n| n.to_string()).collect();
        write!(f, "{}", sizes.join(","))
    }
}

/// Ordered per-level codeword indices `c_1..c_m`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId(Vec<u32>);

impl SemanticId {
    pub fn new(codes: Vec<u32>) -> Self {
        Self(codes)
    }

    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Codes of every level but the last.
    pub fn prefix(&self) -> &[u32] {
        &self.0[..self.0.len().saturating_sub(1)]
    }

    pub fn last(&self) -> u32 {
        *self.0.last().expect("non-empty sid")
    }

    pub fn with_last(&self, code: u32) -> Self {
        let mut codes = self.0.clone();
        *codes.last_mut().expect("non-empty sid") = code;
        Self(codes)
    }
}

impl From<Vec<u32>> for SemanticId {
    fn from(codes: Vec<u32>) -> Self {
        Self(codes)
    }
}

/// Bracketed form used in TSV files, e.g. `[1203,2315,3576]`.
impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_char('[')?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_char(',')?;
            }
            write!(f, "{c}")?;
        }
        f.write_char(']')
    }
}

impl FromStr for SemanticId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| Error::InvalidSid(format!("expected `[c1,...,cm]`, got `{s}`")))?;
        let codes = inner
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::InvalidSid(format!("bad code `{c}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(codes))
    }
}

/// Maps a SID onto disjoint per-level token bands: `t_j = c_j + Σ_{k<j} n_k`.
pub fn sid_to_flat_tokens(sid: &SemanticId, structure: &SidStructure) -> Result<Vec<usize>> {
    structure.validate(sid)?;
    let mut offset = 0;
    Ok(sid
        .codes()
        .iter()
        .zip(structure.level_sizes())
        .map(|(&c, &n)| {
            let token = offset + c as usize;
            offset += n;
            token
        })
        .collect())
}

pub fn flat_tokens_to_sid(tokens: &[usize], structure: &SidStructure) -> Result<SemanticId> {
    if tokens.len() != structure.levels() {
        return Err(Error::InvalidSid(format!(
            "expected {} tokens, got {}",
            structure.levels(),
            tokens.len()
        )));
    }
    let mut codes = Vec::with_capacity(tokens.len());
    for (level, &token) in tokens.iter().enumerate() {
        let band = structure.band(level);
        if !band.contains(&token) {
            return Err(Error::InvalidSid(format!(
                "token {token} outside level {} band {}..{}",
                level + 1,
                band.start,
                band.end
            )));
        }
        codes.push((token - band.start) as u32);
    }
    Ok(SemanticId(codes))
}

/// Renders `C{t_1}C{t_2}...C{t_m}` over flat tokens.
pub fn render_sid_string(sid: &SemanticId, structure: &SidStructure) -> Result<String> {
    let mut out = String::new();
    for t in sid_to_flat_tokens(sid, structure)? {
        write!(out, "C{t}").expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn parse_sid_string(s: &str, structure: &SidStructure) -> Result<SemanticId> {
    let rest = s
        .strip_prefix('C')
        .ok_or_else(|| Error::InvalidSid(format!("`{s}` does not start with `C`")))?;
    let tokens = rest
        .split('C')
        .map(|t| {
            if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
                return Err(Error::InvalidSid(format!("malformed token `C{t}` in `{s}`")));
            }
            t.parse::<usize>()
                .map_err(|_| Error::InvalidSid(format!("token `{t}` overflows in `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    flat_tokens_to_sid(&tokens, structure)
}

/// Fused multimodal feature `H^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalEmbedding(Vec<f64>);

impl MultimodalEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite embedding entry at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: String,
    pub embedding: MultimodalEmbedding,
    pub related_item: Option<String>,
    pub sid: Option<SemanticId>,
    pub style_group: Option<String>,
    pub origin_group: Option<String>,
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>, embedding: MultimodalEmbedding) -> Self {
        Self {
            item_id: item_id.into(),
            embedding,
            related_item: None,
            sid: None,
            style_group: None,
            origin_group: None,
        }
    }
}

/// Items keyed by id, iterated in insertion (file) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    input_dim: usize,
    items: IndexMap<String, ItemRecord>,
}

impl ItemCatalog {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            items: IndexMap::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn insert(&mut self, record: ItemRecord) -> Result<()> {
        if record.embedding.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                line: self.items.len() + 1,
                expected: self.input_dim,
                found: record.embedding.dim(),
            });
        }
        if self.items.contains_key(&record.item_id) {
            return Err(Error::DuplicateId {
                line: self.items.len() + 1,
                id: record.item_id,
            });
        }
        self.items.insert(record.item_id.clone(), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemRecord> {
        self.items.get(item_id)
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.items.get_index_of(item_id)
    }

    pub fn record(&self, index: usize) -> &ItemRecord {
        &self.items[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ItemRecord> {
        self.items.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }

    pub fn embeddings(&self) -> Vec<&[f64]> {
        self.items.values().map(|r| r.embedding.as_slice()).collect()
    }

    /// Checks that every `related_item` resolves within the catalog.
    pub fn validate_links(&self) -> Result<()> {
        for record in self.items.values() {
            if let Some(rel) = &record.related_item {
                if !self.items.contains_key(rel) {
                    return Err(Error::UnknownItem(format!(
                        "{rel} (related item of {})",
                        record.item_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(anchor index, positive index)` for every item whose related item
    /// resolves. Unresolvable links are skipped.
    pub fn related_pairs(&self) -> Vec<(usize, usize)> {
        self.items
            .values()
            .enumerate()
            .filter_map(|(i, r)| {
                r.related_item
                    .as_deref()
                    .and_then(|rel| self.items.get_index_of(rel))
                    .map(|j| (i, j))
            })
            .collect()
    }
}

fn non_empty(field: Option<&str>) -> Option<&str> {
    field.map(str::trim).filter(|s| !s.is_empty())
}

fn parse_embedding(field: &str, line: usize) -> Result<Vec<f64>> {
    let trimmed = field.trim();
    let inner = trimmed
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(trimmed);
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|v| {
            let v = v.trim();
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                Ok(_) => Err(Error::parse(line, format!("non-finite embedding value `{v}`"))),
                Err(_) => Err(Error::parse(line, format!("bad embedding value `{v}`"))),
            }
        })
        .collect()
}

pub fn parse_item_catalog(text: &str, input_dim: usize) -> Result<ItemCatalog> {
    let mut catalog = ItemCatalog::new(input_dim);
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::parse(line, "expected at least item_id and embedding columns"));
        }
        if fields.len() > 6 {
            return Err(Error::parse(line, format!("expected at most 6 columns, got {}", fields.len())));
        }
        let item_id = fields[0].trim();
        if item_id.is_empty() {
            return Err(Error::parse(line, "empty item_id"));
        }
        let values = parse_embedding(fields[1], line)?;
        if values.len() != input_dim {
            return Err(Error::DimensionMismatch {
                line,
                expected: input_dim,
                found: values.len(),
            });
        }
        let sid = non_empty(fields.get(2).copied())
            .map(|s| {
                s.parse::<SemanticId>()
                    .map_err(|e| Error::parse(line, e.to_string()))
            })
            .transpose()?;
        if catalog.items.contains_key(item_id) {
            return Err(Error::DuplicateId {
                line,
                id: item_id.to_string(),
            });
        }
        let record = ItemRecord {
            item_id: item_id.to_string(),
            embedding: MultimodalEmbedding(values),
            related_item: non_empty(fields.get(3).copied()).map(str::to_string),
            sid,
            style_group: non_empty(fields.get(4).copied()).map(str::to_string),
            origin_group: non_empty(fields.get(5).copied()).map(str::to_string),
        };
        catalog.items.insert(record.item_id.clone(), record);
    }
    Ok(catalog)
}

pub fn load_item_catalog(path: impl AsRef<Path>, input_dim: usize) -> Result<ItemCatalog> {
    let text = read_text(path.as_ref())?;
    parse_item_catalog(&text, input_dim)
}

fn join_floats(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 8);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // `{}` on f64 is the shortest representation that round-trips.
        write!(out, "{v}").expect("writing to a String cannot fail");
    }
    out
}

pub fn write_item_catalog<W: Write>(catalog: &ItemCatalog, mut out: W) -> std::io::Result<()> {
    for r in catalog.iter() {
        let mut cols = vec![
            r.item_id.clone(),
            join_floats(r.embedding.as_slice()),
            r.sid.as_ref().map(|s| s.to_string()).unwrap_or_default(),
            r.related_item.clone().unwrap_or_default(),
            r.style_group.clone().unwrap_or_default(),
            r.origin_group.clone().unwrap_or_default(),
        ];
        while cols.len() > 2 && cols.last().is_some_and(|c| c.is_empty()) {
            cols.pop();
        }
        writeln!(out, "{}", cols.join("\t"))?;
    }
    Ok(())
}

/// One page view: what the user had interacted with and what they clicked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub pv_id: String,
    pub history: Vec<String>,
    pub targets: Vec<String>,
    /// `None` for recommendation rows, the query keywords for search rows.
    pub query: Option<String>,
}

impl InteractionSequence {
    pub fn is_search(&self) -> bool {
        self.query.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SequenceSet {
    pub sequences: Vec<InteractionSequence>,
    /// Number of rows whose history exceeded [`MAX_HISTORY`].
    pub truncated: usize,
}

fn split_ids(field: &str) -> Vec<String> {
    field
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse_sequences(text: &str) -> Result<SequenceSet> {
    let mut set = SequenceSet::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() > 4 {
            return Err(Error::parse(line, format!("expected at most 4 columns, got {}", fields.len())));
        }
        let pv_id = fields[0].trim();
        if pv_id.is_empty() {
            return Err(Error::parse(line, "empty pv_id"));
        }
        let targets = split_ids(fields.get(1).copied().unwrap_or(""));
        if targets.is_empty() {
            return Err(Error::parse(line, format!("page view `{pv_id}` has no targets")));
        }
        let query = non_empty(fields.get(2).copied()).map(str::to_string);
        let mut history = split_ids(fields.get(3).copied().unwrap_or(""));
        if history.len() > MAX_HISTORY {
            history.drain(..history.len() - MAX_HISTORY);
            set.truncated += 1;
        }
        set.sequences.push(InteractionSequence {
            pv_id: pv_id.to_string(),
            history,
            targets,
            query,
        });
    }
    if set.truncated > 0 {
        log::warn!(
            "{} histories truncated to the most recent {MAX_HISTORY} items",
            set.truncated
        );
    }
    Ok(set)
}

pub fn load_sequences(path: impl AsRef<Path>) -> Result<SequenceSet> {
    parse_sequences(&read_text(path.as_ref())?)
}

pub fn write_sequences<W: Write>(sequences: &[InteractionSequence], mut out: W) -> std::io::Result<()> {
    for s in sequences {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            s.pv_id,
            s.targets.join(","),
            s.query.as_deref().unwrap_or(""),
            s.history.join(",")
        )?;
    }
    Ok(())
}

/// Parses `item_id \t [c1,...,cm]` rows.
pub fn parse_assignments(text: &str) -> Result<IndexMap<String, SemanticId>> {
    let mut map = IndexMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (id, sid) = raw
            .split_once('\t')
            .ok_or_else(|| Error::parse(line, "expected `item_id<TAB>[sid]`"))?;
        let id = id.trim();
        let sid = sid
            .parse::<SemanticId>()
            .map_err(|e| Error::parse(line, e.to_string()))?;
        if map.insert(id.to_string(), sid).is_some() {
            return Err(Error::DuplicateId {
                line,
                id: id.to_string(),
            });
        }
    }
    Ok(map)
}

pub fn load_assignments(path: impl AsRef<Path>) -> Result<IndexMap<String, SemanticId>> {
    parse_assignments(&read_text(path.as_ref())?)
}

pub fn write_assignments<'a, W, I>(rows: I, mut out: W) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a SemanticId)>,
{
    for (id, sid) in rows {
        writeln!(out, "{id}\t{sid}")?;
    }
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn format_floats(values: &[f64]) -> String {
    join_floats(values)
}
