//! Corpus ingestion, vocabulary construction, pretrained-embedding loading,
//! and batching with padding masks.
//!
//! Corpus files are line-delimited records with four tab-separated fields:
//! document id, space-separated tokens, comma-separated label names, and a
//! split tag (`train`/`val`/`test`). Every atom (id, token, label name) is
//! escaped so arbitrary strings round-trip: `\\` backslash, `\t` tab, `\n`
//! newline, `\r` carriage return, `\s` space, `\c` comma. The grammar is
//! documented in docs/formats.md.

pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Default document truncation length; see `truncate_documents`.
pub const DEFAULT_MAX_DOC_LEN: usize = 2500;

/// Seed for the rows of the embedding table not covered by a pretrained
/// file; fixed so partial coverage stays reproducible.
const EMBEDDING_FILL_SEED: u64 = 0x0e5f_11ed;

fn escape_atom(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            ',' => out.push_str("\\c"),
            other => out.push(other),
        }
    }
    out
}

/// Inverse of `escape_atom`; `None` on a dangling or unknown escape.
fn unescape_atom(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            's' => out.push(' '),
            'c' => out.push(','),
            _ => return None,
        }
    }
    Some(out)
}

/// Token table with reserved PAD (id 0) and UNK (id 1) entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_reserved() -> Vocabulary {
        let id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let token_to_id = id_to_token
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        Vocabulary { id_to_token, token_to_id }
    }

    /// Builds a vocabulary from non-reserved tokens, ids assigned in the
    /// given order starting at 2. Duplicate, empty, or reserved tokens are
    /// rejected.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Vocabulary> {
        let mut vocab = Vocabulary::with_reserved();
        for token in tokens {
            vocab.push(token)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> Result<()> {
        if token == PAD_TOKEN || token == UNK_TOKEN {
            return Err(Error::invalid(
                "vocabulary",
                format!("token {token:?} collides with a reserved entry"),
            ));
        }
        if token.is_empty() {
            return Err(Error::invalid("vocabulary", "empty token"));
        }
        if self.token_to_id.contains_key(&token) {
            return Err(Error::invalid(
                "vocabulary",
                format!("duplicate token {token:?}"),
            ));
        }
        self.token_to_id.insert(token.clone(), self.id_to_token.len());
        self.id_to_token.push(token);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Token id; unknown tokens map to UNK.
    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// One escaped token per line, in id order (reserved entries first).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for token in &self.id_to_token {
            text.push_str(&escape_atom(token));
            text.push('\n');
        }
        fs::write(path, text)
            .map_err(|e| Error::io(format!("writing vocabulary {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
        let malformed = |line: usize, details: String| Error::MalformedData {
            path: path.to_path_buf(),
            line,
            details,
        };
        let mut vocab = Vocabulary::with_reserved();
        let mut count = 0usize;
        for (i, line) in text.lines().enumerate() {
            count += 1;
            let token = unescape_atom(line)
                .ok_or_else(|| malformed(i + 1, "bad escape sequence".into()))?;
            match i {
                0 if token != PAD_TOKEN => {
                    return Err(malformed(1, format!("first entry must be {PAD_TOKEN}")))
                }
                1 if token != UNK_TOKEN => {
                    return Err(malformed(2, format!("second entry must be {UNK_TOKEN}")))
                }
                0 | 1 => {}
                _ => vocab
                    .push(token)
                    .map_err(|e| malformed(i + 1, e.to_string()))?,
            }
        }
        if count < 2 {
            return Err(malformed(count, "missing reserved entries".into()));
        }
        Ok(vocab)
    }

    /// SHA-256 over length-prefixed token bytes in id order; identifies the
    /// vocabulary independent of file formatting.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for token in &self.id_to_token {
            hasher.update((token.len() as u64).to_le_bytes());
            hasher.update(token.as_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Split, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Ascending, deduplicated label ids.
    pub labels: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub num_labels: usize,
}

impl Corpus {
    pub fn split_docs(&self, split: Split) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.split == split)
    }
}

/// Maps label names to dense ids. `from_names` assigns ids in lexicographic
/// name order, so the mapping is a pure function of the name set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelIndex {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelIndex {
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Result<LabelIndex> {
        let mut distinct: Vec<String> = names.into_iter().collect();
        distinct.sort_unstable();
        distinct.dedup();
        LabelIndex::from_ordered_names(distinct)
    }

    /// Preserves the given order (needed when restoring a saved mapping);
    /// names must be distinct and non-empty.
    pub fn from_ordered_names(names: Vec<String>) -> Result<LabelIndex> {
        if names.is_empty() {
            return Err(Error::invalid("label index", "no labels"));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::invalid("label index", "empty label name"));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::invalid(
                    "label index",
                    format!("duplicate label {name:?}"),
                ));
            }
        }
        Ok(LabelIndex { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A corpus record before vocabulary/label mapping: tokens and labels are
/// still strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub id: String,
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    pub split: Split,
}

/// Parses corpus records. Documents with empty text are dropped and counted
/// in the second return value; structurally bad lines are errors carrying
/// the 1-based line number. Blank lines are skipped.
pub fn read_raw_corpus(path: &Path) -> Result<(Vec<RawDocument>, usize)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
    let mut docs = Vec::new();
    let mut rejected_empty = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let malformed = |details: String| Error::MalformedData {
            path: path.to_path_buf(),
            line: i + 1,
            details,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(malformed(format!(
                "expected 4 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let id = unescape_atom(fields[0])
            .ok_or_else(|| malformed("bad escape in id field".into()))?;
        let tokens: Vec<String> = if fields[1].is_empty() {
            Vec::new()
        } else {
            fields[1]
                .split(' ')
                .map(unescape_atom)
                .collect::<Option<_>>()
                .ok_or_else(|| malformed("bad escape in token field".into()))?
        };
        let labels: Vec<String> = if fields[2].is_empty() {
            Vec::new()
        } else {
            fields[2]
                .split(',')
                .map(unescape_atom)
                .collect::<Option<_>>()
                .ok_or_else(|| malformed("bad escape in label field".into()))?
        };
        let split: Split = fields[3].parse().map_err(&malformed)?;
        if tokens.is_empty() {
            rejected_empty += 1;
            continue;
        }
        if tokens.iter().any(String::is_empty) {
            return Err(malformed("empty token (doubled separator?)".into()));
        }
        if labels.iter().any(String::is_empty) {
            return Err(malformed("empty label name".into()));
        }
        docs.push(RawDocument { id, tokens, labels, split });
    }
    Ok((docs, rejected_empty))
}

/// Token frequencies over the given documents; tokens with frequency >=
/// `min_freq` enter the vocabulary ordered by (frequency desc, token asc)
/// after the reserved entries. Reserved literals in the text are ignored.
pub fn build_vocab<'a>(
    docs: impl IntoIterator<Item = &'a RawDocument>,
    min_freq: usize,
) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::invalid("build_vocab", "min_freq must be at least 1"));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        for token in &doc.tokens {
            if token == PAD_TOKEN || token == UNK_TOKEN {
                continue;
            }
            *freq.entry(token).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> =
        freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    entries.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
}

/// Maps raw records through the vocabulary (unknown tokens become UNK) and
/// the label index. A label name missing from the index is an error.
pub fn map_corpus(
    raw: &[RawDocument],
    vocab: &Vocabulary,
    labels: &LabelIndex,
) -> Result<Corpus> {
    let mut documents = Vec::with_capacity(raw.len());
    for doc in raw {
        let tokens = doc.tokens.iter().map(|t| vocab.id_of(t)).collect();
        let mut ids = Vec::with_capacity(doc.labels.len());
        for name in &doc.labels {
            let id = labels.id_of(name).ok_or_else(|| {
                Error::invalid(
                    "corpus labels",
                    format!("document {:?}: label {name:?} not in the index", doc.id),
                )
            })?;
            ids.push(id);
        }
        ids.sort_unstable();
        ids.dedup();
        documents.push(Document {
            id: doc.id.clone(),
            tokens,
            labels: ids,
            split: doc.split,
        });
    }
    Ok(Corpus { documents, num_labels: labels.len() })
}

/// Reads and maps a corpus file; the second value counts records rejected
/// for empty text.
pub fn load_corpus(
    path: &Path,
    vocab: &Vocabulary,
    labels: &LabelIndex,
) -> Result<(Corpus, usize)> {
    let (raw, rejected) = read_raw_corpus(path)?;
    Ok((map_corpus(&raw, vocab, labels)?, rejected))
}

/// Writes documents back as text records, tokens and labels rendered
/// through the vocabulary and label index.
pub fn write_corpus(
    path: &Path,
    corpus: &Corpus,
    vocab: &Vocabulary,
    labels: &LabelIndex,
) -> Result<()> {
    let mut text = String::new();
    for doc in &corpus.documents {
        let mut tokens = Vec::with_capacity(doc.tokens.len());
        for &id in &doc.tokens {
            let token = vocab.token_of(id).ok_or_else(|| {
                Error::invalid(
                    "write_corpus",
                    format!("document {:?}: token id {id} outside the vocabulary", doc.id),
                )
            })?;
            tokens.push(escape_atom(token));
        }
        let mut names = Vec::with_capacity(doc.labels.len());
        for &id in &doc.labels {
            let name = labels.name_of(id).ok_or_else(|| {
                Error::invalid(
                    "write_corpus",
                    format!("document {:?}: label id {id} outside the index", doc.id),
                )
            })?;
            names.push(escape_atom(name));
        }
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            escape_atom(&doc.id),
            tokens.join(" "),
            names.join(","),
            doc.split
        ));
    }
    fs::write(path, text)
        .map_err(|e| Error::io(format!("writing corpus {}", path.display()), e))
}

/// Loads a `token v1 .. v_d` embedding file into a vocab_size x d_e
/// row-major table. Rows for tokens absent from the file are drawn uniform
/// in [-0.5/d_e, 0.5/d_e] from a fixed seed; the PAD row is always zero.
/// File tokens outside the vocabulary are ignored; on duplicates the last
/// line wins.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    d_e: usize,
) -> Result<Vec<f64>> {
    if d_e == 0 {
        return Err(Error::invalid("embeddings", "d_e must be at least 1"));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading embeddings {}", path.display()), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDING_FILL_SEED);
    let half = 0.5 / d_e as f64;
    let mut table: Vec<f64> = (0..vocab.len() * d_e)
        .map(|_| rng.gen_range(-half..=half))
        .collect();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |details: String| Error::MalformedData {
            path: path.to_path_buf(),
            line: i + 1,
            details,
        };
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-blank line has a first field");
        let values = parts
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| malformed(format!("non-numeric value {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != d_e {
            return Err(malformed(format!(
                "expected {d_e} values, got {}",
                values.len()
            )));
        }
        if let Some(id) = vocab.lookup(token) {
            table[id * d_e..(id + 1) * d_e].copy_from_slice(&values);
        }
    }
    for v in &mut table[..d_e] {
        *v = 0.0;
    }
    Ok(table)
}

/// One training batch: rows padded to the batch's own max length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Indices into `corpus.documents`.
    pub doc_indices: Vec<usize>,
    /// Padded token rows, all of length `padded_len`.
    pub tokens: Vec<Vec<usize>>,
    /// Row-major rows x padded_len; true exactly where the token is not PAD.
    pub mask: Vec<bool>,
    /// Row-major rows x num_labels binary truth matrix.
    pub labels: Vec<f64>,
    pub padded_len: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.doc_indices.len()
    }

    pub fn token_slices(&self) -> Vec<&[usize]> {
        self.tokens.iter().map(Vec::as_slice).collect()
    }
}

pub struct BatchIter<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chunk = &self.order[self.pos..end];
        self.pos = end;
        let docs = &self.corpus.documents;
        let max_len = chunk
            .iter()
            .map(|&i| docs[i].tokens.len())
            .max()
            .expect("chunk is non-empty");
        let num_labels = self.corpus.num_labels;
        let mut tokens = Vec::with_capacity(chunk.len());
        let mut mask = Vec::with_capacity(chunk.len() * max_len);
        let mut labels = vec![0.0; chunk.len() * num_labels];
        for (row, &idx) in chunk.iter().enumerate() {
            let mut padded = docs[idx].tokens.clone();
            padded.resize(max_len, PAD_ID);
            mask.extend(padded.iter().map(|&t| t != PAD_ID));
            tokens.push(padded);
            for &l in &docs[idx].labels {
                labels[row * num_labels + l] = 1.0;
            }
        }
        Some(Batch {
            doc_indices: chunk.to_vec(),
            tokens,
            mask,
            labels,
            padded_len: max_len,
        })
    }
}

fn split_order(corpus: &Corpus, batch_size: usize, split: Split) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_iter", "batch_size must be at least 1"));
    }
    let mut order = Vec::new();
    for (i, doc) in corpus.documents.iter().enumerate() {
        if doc.split != split {
            continue;
        }
        if doc.tokens.is_empty() {
            return Err(Error::invalid(
                "batch_iter",
                format!("document {:?} has no tokens", doc.id),
            ));
        }
        if let Some(&bad) = doc.labels.iter().find(|&&l| l >= corpus.num_labels) {
            return Err(Error::invalid(
                "batch_iter",
                format!("document {:?} has label id {bad} >= {}", doc.id, corpus.num_labels),
            ));
        }
        order.push(i);
    }
    Ok(order)
}

/// Batches one split in an order shuffled from `shuffle_seed`; a fixed seed
/// fixes the batch sequence. An empty split yields no batches.
pub fn batch_iter(
    corpus: &Corpus,
    batch_size: usize,
    shuffle_seed: u64,
    split: Split,
) -> Result<BatchIter<'_>> {
    let mut order = split_order(corpus, batch_size, split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    Ok(BatchIter { corpus, order, batch_size, pos: 0 })
}

/// Batches one split in corpus order — the canonical order for evaluation,
/// so reports do not depend on a shuffle seed.
pub fn batch_iter_in_order(
    corpus: &Corpus,
    batch_size: usize,
    split: Split,
) -> Result<BatchIter<'_>> {
    let order = split_order(corpus, batch_size, split)?;
    Ok(BatchIter { corpus, order, batch_size, pos: 0 })
}

/// Drops tokens past `max_len`, keeping each document's head. Returns how
/// many documents were shortened.
pub fn truncate_documents(corpus: &mut Corpus, max_len: usize) -> Result<usize> {
    if max_len == 0 {
        return Err(Error::invalid("truncate", "max_len must be at least 1"));
    }
    let mut shortened = 0;
    for doc in &mut corpus.documents {
        if doc.tokens.len() > max_len {
            doc.tokens.truncate(max_len);
            shortened += 1;
        }
    }
    Ok(shortened)
}

/// Keeps the (at most) k most frequent labels, ties broken by name, and
/// reindexes documents to the survivors' lexicographic order. Documents may
/// end up with empty label sets.
pub fn filter_top_labels(
    corpus: &Corpus,
    labels: &LabelIndex,
    k: usize,
) -> Result<(Corpus, LabelIndex)> {
    if k == 0 {
        return Err(Error::invalid("filter_top_labels", "k must be at least 1"));
    }
    if labels.len() != corpus.num_labels {
        return Err(Error::invalid(
            "filter_top_labels",
            format!(
                "label index has {} entries, corpus declares {}",
                labels.len(),
                corpus.num_labels
            ),
        ));
    }
    let mut freq = vec![0usize; labels.len()];
    for doc in &corpus.documents {
        for &l in &doc.labels {
            freq[l] += 1;
        }
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        freq[b]
            .cmp(&freq[a])
            .then_with(|| labels.name_of(a).cmp(&labels.name_of(b)))
    });
    order.truncate(k);
    let kept = LabelIndex::from_names(
        order
            .iter()
            .map(|&l| labels.name_of(l).expect("id in range").to_string()),
    )?;
    let mut documents = corpus.documents.clone();
    for doc in &mut documents {
        let mut remapped: Vec<usize> = doc
            .labels
            .iter()
            .filter_map(|&l| kept.id_of(labels.name_of(l).expect("id in range")))
            .collect();
        remapped.sort_unstable();
        doc.labels = remapped;
    }
    Ok((Corpus { documents, num_labels: kept.len() }, kept))
}

/// Writes one probability row per document: a `labels` header naming every
/// column, then `doc_id<TAB>p0 p1 ...` lines. Atoms use the corpus escape
/// scheme; probabilities print in shortest round-trip form.
pub fn write_predictions(
    path: &Path,
    rows: &[(String, Vec<f64>)],
    labels: &LabelIndex,
) -> Result<()> {
    let mut text = String::from("labels\t");
    let names: Vec<String> = labels.names().iter().map(|n| escape_atom(n)).collect();
    text.push_str(&names.join(" "));
    text.push('\n');
    for (id, probs) in rows {
        if probs.len() != labels.len() {
            return Err(Error::invalid(
                "write_predictions",
                format!(
                    "document {id} has {} probabilities for {} labels",
                    probs.len(),
                    labels.len()
                ),
            ));
        }
        text.push_str(&escape_atom(id));
        text.push('\t');
        let rendered: Vec<String> = probs.iter().map(f64::to_string).collect();
        text.push_str(&rendered.join(" "));
        text.push('\n');
    }
    fs::write(path, text)
        .map_err(|e| Error::io(format!("writing predictions {}", path.display()), e))
}

/// Reads a predictions file, checking that its label header matches
/// `labels` exactly (same names, same order) and that every row carries one
/// probability in [0,1] per label. Document ids must be distinct.
pub fn read_predictions(path: &Path, labels: &LabelIndex) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading predictions {}", path.display()), e))?;
    let malformed = |line: usize, details: String| Error::MalformedData {
        path: path.to_path_buf(),
        line,
        details,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
    let (i, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty predictions file".into()))?;
    let header_names = header
        .strip_prefix("labels\t")
        .ok_or_else(|| malformed(i + 1, "first line must be 'labels<TAB>name ...'".into()))?;
    let mut parsed_names = Vec::new();
    for atom in header_names.split(' ').filter(|a| !a.is_empty()) {
        let name = unescape_atom(atom)
            .ok_or_else(|| malformed(i + 1, format!("bad escape in label name '{atom}'")))?;
        parsed_names.push(name);
    }
    if parsed_names != labels.names() {
        return Err(malformed(
            i + 1,
            format!(
                "label header does not match the corpus labels ({} vs {} names)",
                parsed_names.len(),
                labels.len()
            ),
        ));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let (id_atom, values) = line
            .split_once('\t')
            .ok_or_else(|| malformed(line_no, "expected doc_id<TAB>probabilities".into()))?;
        let id = unescape_atom(id_atom)
            .ok_or_else(|| malformed(line_no, format!("bad escape in id '{id_atom}'")))?;
        if !seen.insert(id.clone()) {
            return Err(malformed(line_no, format!("duplicate document id '{id}'")));
        }
        let mut probs = Vec::with_capacity(labels.len());
        for v in values.split(' ').filter(|v| !v.is_empty()) {
            let p: f64 = v
                .parse()
                .map_err(|_| malformed(line_no, format!("bad probability '{v}'")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(malformed(line_no, format!("probability {p} outside [0,1]")));
            }
            probs.push(p);
        }
        if probs.len() != labels.len() {
            return Err(malformed(
                line_no,
                format!("{} probabilities for {} labels", probs.len(), labels.len()),
            ));
        }
        rows.push((id, probs));
    }
    Ok(rows)
}
