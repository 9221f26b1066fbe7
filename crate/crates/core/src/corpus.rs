//! Corpus ingestion: vocabulary, bag-of-words, TF-IDF, and embedding files.
//!
//! Input corpora are pre-tokenized: one document per line, whitespace
//! separated, already lowercased. Filtering returns the list of kept raw
//! document indices so that labels and precomputed embeddings can be
//! filtered the same way.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::rng::StageRng;

/// Ordered set of unique tokens with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::InvalidArgument(format!("empty token at index {i}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = create(path)?;
        for w in &self.words {
            writeln!(out, "{w}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let words = read_lines(path)?
            .into_iter()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Self::from_words(words)
    }
}

/// Sparse non-negative count vectors over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct BowCorpus {
    vocab_size: usize,
    /// Per document, `(word id, count)` pairs sorted by word id.
    docs: Vec<Vec<(usize, u32)>>,
    doc_lengths: Vec<u64>,
    /// Gold class per document, used only for evaluation.
    pub labels: Option<Vec<i64>>,
}

impl BowCorpus {
    /// Builds a corpus from per-document `(word, count)` entries. Entries for
    /// the same word are merged and zero counts are discarded.
    pub fn new(vocab_size: usize, docs: Vec<Vec<(usize, u32)>>) -> Result<Self> {
        let mut clean = Vec::with_capacity(docs.len());
        for (d, doc) in docs.into_iter().enumerate() {
            let mut merged: Vec<(usize, u32)> = Vec::with_capacity(doc.len());
            let mut doc = doc;
            doc.sort_unstable_by_key(|&(w, _)| w);
            for (w, c) in doc {
                if w >= vocab_size {
                    return Err(Error::InvalidArgument(format!(
                        "document {d} references word {w} outside vocabulary of size {vocab_size}"
                    )));
                }
                if c == 0 {
                    continue;
                }
                match merged.last_mut() {
                    Some((lw, lc)) if *lw == w => *lc += c,
                    _ => merged.push((w, c)),
                }
            }
            clean.push(merged);
        }
        let doc_lengths = clean
            .iter()
            .map(|d| d.iter().map(|&(_, c)| u64::from(c)).sum())
            .collect();
        Ok(Self {
            vocab_size,
            docs: clean,
            doc_lengths,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.docs.len() {
            return Err(Error::shape(
                "BowCorpus::with_labels",
                format!("{} labels for {} documents", labels.len(), self.docs.len()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn doc(&self, d: usize) -> &[(usize, u32)] {
        &self.docs[d]
    }

    pub fn docs(&self) -> &[Vec<(usize, u32)>] {
        &self.docs
    }

    pub fn doc_length(&self, d: usize) -> u64 {
        self.doc_lengths[d]
    }

    pub fn doc_lengths(&self) -> &[u64] {
        &self.doc_lengths
    }

    pub fn nnz(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Dense count vector of document `d`.
    pub fn dense_doc(&self, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab_size];
        for &(w, c) in &self.docs[d] {
            v[w] = f64::from(c);
        }
        v
    }

    /// Per-word totals over all documents.
    pub fn column_sums(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.vocab_size];
        for doc in &self.docs {
            for &(w, c) in doc {
                out[w] += u64::from(c);
            }
        }
        out
    }

    /// Number of documents containing each word.
    pub fn document_frequencies(&self) -> Vec<usize> {
        let mut df = vec![0usize; self.vocab_size];
        for doc in &self.docs {
            for &(w, _) in doc {
                df[w] += 1;
            }
        }
        df
    }

    /// Writes the sparse text format: a `D V NNZ` header, then one
    /// `doc word count` triple per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(out, "{} {} {}", self.num_docs(), self.vocab_size, self.nnz()).map_err(io)?;
        for (d, doc) in self.docs.iter().enumerate() {
            for &(w, c) in doc {
                writeln!(out, "{d} {w} {c}").map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let mut it = lines.iter().filter(|l| !l.trim().is_empty());
        let header = it.next().ok_or_else(|| Error::format("bow header", "file is empty"))?;
        let head: Vec<usize> = parse_fields(header, "bow header")?;
        let [n_docs, vocab_size, nnz] = head[..] else {
            return Err(Error::format(
                "bow header",
                format!("expected `D V NNZ`, got {header:?}"),
            ));
        };
        let mut docs = vec![Vec::new(); n_docs];
        let mut seen = 0usize;
        for line in it {
            let f: Vec<usize> = parse_fields(line, "bow entry")?;
            let [d, w, c] = f[..] else {
                return Err(Error::format(
                    "bow entry",
                    format!("expected `doc word count`, got {line:?}"),
                ));
            };
            if d >= n_docs {
                return Err(Error::format("bow entry", format!("doc {d} >= D = {n_docs}")));
            }
            let c = u32::try_from(c).map_err(|_| Error::format("bow entry", format!("count {c} too large")))?;
            docs[d].push((w, c));
            seen += 1;
        }
        if seen != nnz {
            return Err(Error::format(
                "bow file",
                format!("header says {nnz} entries, found {seen}"),
            ));
        }
        Self::new(vocab_size, docs)
    }
}

/// A filtered corpus plus the raw-document indices that survived filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredCorpus {
    pub corpus: BowCorpus,
    pub kept: Vec<usize>,
}

/// Tokens with corpus frequency `>= min_freq`, in first-occurrence order.
pub fn build_vocabulary<S: AsRef<str>>(raw_docs: &[Vec<S>], min_freq: usize) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::InvalidArgument("min_freq must be >= 1".into()));
    }
    if raw_docs.is_empty() {
        return Err(Error::InvalidArgument("no documents".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for doc in raw_docs {
        for tok in doc {
            let tok = tok.as_ref();
            if tok.is_empty() {
                continue;
            }
            let slot = freq.entry(tok).or_insert_with(|| {
                order.push(tok);
                0
            });
            *slot += 1;
        }
    }
    let words: Vec<String> = order
        .into_iter()
        .filter(|t| freq[t] >= min_freq)
        .map(str::to_string)
        .collect();
    if words.is_empty() {
        return Err(Error::EmptyVocabulary { min_freq });
    }
    Vocabulary::from_words(words)
}

/// Maps raw documents onto `vocab`, dropping those with fewer than
/// `min_terms` distinct in-vocabulary terms (and always dropping empty ones).
pub fn build_bow<S: AsRef<str>>(raw_docs: &[Vec<S>], vocab: &Vocabulary, min_terms: usize) -> Result<FilteredCorpus> {
    if min_terms == 0 {
        return Err(Error::InvalidArgument("min_terms must be >= 1".into()));
    }
    let mut docs = Vec::new();
    let mut kept = Vec::new();
    for (i, doc) in raw_docs.iter().enumerate() {
        let mut counts: HashMap<usize, u32> = HashMap::new();
        for tok in doc {
            if let Some(id) = vocab.id(tok.as_ref()) {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        if counts.is_empty() || counts.len() < min_terms {
            continue;
        }
        docs.push(counts.into_iter().collect());
        kept.push(i);
    }
    if docs.is_empty() {
        return Err(Error::AllDocumentsDropped { min_terms });
    }
    Ok(FilteredCorpus {
        corpus: BowCorpus::new(vocab.len(), docs)?,
        kept,
    })
}

/// Selects `items[k]` for every kept index `k`.
pub fn filter_by_kept<T: Clone>(items: &[T], kept: &[usize]) -> Result<Vec<T>> {
    kept.iter()
        .map(|&k| {
            items.get(k).cloned().ok_or_else(|| {
                Error::shape(
                    "filter_by_kept",
                    format!("kept index {k} but only {} items", items.len()),
                )
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Precomputed,
    Tfidf,
}

impl std::str::FromStr for EmbeddingSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precomputed" => Ok(Self::Precomputed),
            "tfidf" => Ok(Self::Tfidf),
            other => Err(Error::Config(format!("unknown embedding source {other:?}"))),
        }
    }
}

impl std::fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Precomputed => "precomputed",
            Self::Tfidf => "tfidf",
        })
    }
}

/// Dense per-document (or per-word) representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Tensor2,
    pub source: EmbeddingSource,
}

impl EmbeddingMatrix {
    pub fn new(rows: Tensor2, source: EmbeddingSource) -> Result<Self> {
        if rows.cols() == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        check_finite(&rows)?;
        Ok(Self { rows, source })
    }

    pub fn num_rows(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Keeps only the rows listed in `kept`.
    pub fn filter(&self, kept: &[usize]) -> Result<Self> {
        if let Some(&bad) = kept.iter().find(|&&k| k >= self.num_rows()) {
            return Err(Error::shape(
                "EmbeddingMatrix::filter",
                format!("kept index {bad} but only {} rows", self.num_rows()),
            ));
        }
        Ok(Self {
            rows: self.rows.select_rows(kept),
            source: self.source,
        })
    }

    /// L2-normalizes every non-zero row.
    pub fn l2_normalized(&self) -> Self {
        let mut rows = self.rows.clone();
        let cols = rows.cols();
        for r in rows.data_mut().chunks_mut(cols) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter_mut().for_each(|v| *v /= n);
            }
        }
        Self {
            rows,
            source: self.source,
        }
    }
}

fn check_finite(t: &Tensor2) -> Result<()> {
    if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
        let cols = t.cols().max(1);
        return Err(Error::NonFinite {
            row: pos / cols,
            col: pos % cols,
        });
    }
    Ok(())
}

/// Raw-count TF times `ln(D / df)`, each row L2-normalized (zero rows stay zero).
pub fn tfidf(corpus: &BowCorpus) -> Result<EmbeddingMatrix> {
    let n = corpus.num_docs();
    if n == 0 {
        return Err(Error::InvalidArgument("tfidf of an empty corpus".into()));
    }
    let df = corpus.document_frequencies();
    let idf: Vec<f64> = df
        .iter()
        .map(|&f| if f == 0 { 0.0 } else { (n as f64 / f as f64).ln() })
        .collect();
    let mut rows = Tensor2::zeros(n, corpus.vocab_size());
    for d in 0..n {
        let row = rows.row_mut(d);
        for &(w, c) in corpus.doc(d) {
            row[w] = f64::from(c) * idf[w];
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    EmbeddingMatrix::new(rows, EmbeddingSource::Tfidf)
}

/// Produces the document representation used for clustering.
pub trait DocumentRepresentation {
    fn embed(&self, corpus: &BowCorpus) -> Result<EmbeddingMatrix>;
}

pub struct TfidfRepresentation;

impl DocumentRepresentation for TfidfRepresentation {
    fn embed(&self, corpus: &BowCorpus) -> Result<EmbeddingMatrix> {
        tfidf(corpus)
    }
}

/// Embeddings computed offline (e.g. by a sentence encoder), one row per
/// document of the corpus they describe.
pub struct PrecomputedRepresentation {
    pub matrix: EmbeddingMatrix,
}

impl DocumentRepresentation for PrecomputedRepresentation {
    fn embed(&self, corpus: &BowCorpus) -> Result<EmbeddingMatrix> {
        if self.matrix.num_rows() != corpus.num_docs() {
            return Err(Error::RowCountMismatch {
                expected: corpus.num_docs(),
                found: self.matrix.num_rows(),
            });
        }
        Ok(self.matrix.clone())
    }
}

const MAGIC_F32: &[u8; 4] = b"GEMB";
const MAGIC_F64: &[u8; 4] = b"GEMD";

/// Element width of the binary matrix format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// `GEMB`: 32-bit floats.
    F32,
    /// `GEMD`: 64-bit floats, same layout. Used for checkpoints.
    F64,
}

/// Writes `GEMB`/`GEMD` magic, rows and cols as `u64` LE, then row-major LE floats.
pub fn save_matrix(path: &Path, m: &Tensor2, precision: Precision) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    let magic = match precision {
        Precision::F32 => MAGIC_F32,
        Precision::F64 => MAGIC_F64,
    };
    out.write_all(magic).map_err(io)?;
    out.write_all(&(m.rows() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&(m.cols() as u64).to_le_bytes()).map_err(io)?;
    for &v in m.data() {
        match precision {
            Precision::F32 => out.write_all(&(v as f32).to_le_bytes()),
            Precision::F64 => out.write_all(&v.to_le_bytes()),
        }
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a binary matrix (either precision) or, without a magic prefix, CSV.
pub fn load_matrix(path: &Path) -> Result<Tensor2> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let precision = match bytes.get(..4) {
        Some(m) if m == MAGIC_F32 => Precision::F32,
        Some(m) if m == MAGIC_F64 => Precision::F64,
        _ => return parse_csv_matrix(&bytes),
    };
    if bytes.len() < 20 {
        return Err(Error::format("embedding header", "truncated header"));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::format("embedding header", format!("{rows}x{cols} overflows")))?;
    let body = &bytes[20..];
    if body.len() as u64 != expected {
        return Err(Error::format(
            "embedding body",
            format!("{rows}x{cols} needs {expected} bytes, found {}", body.len()),
        ));
    }
    let data: Vec<f64> = match precision {
        Precision::F32 => body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        Precision::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Tensor2::from_vec(rows as usize, cols as usize, data)
}

fn parse_csv_matrix(bytes: &[u8]) -> Result<Tensor2> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::format("embedding header", "neither a GEMB header nor UTF-8 CSV"))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format("embedding csv", format!("line {}: bad number {f:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Tensor2::from_rows(&rows)
}

/// Writes one row per line, comma separated, using shortest round-trip formatting.
pub fn save_matrix_csv(path: &Path, m: &Tensor2) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    for row in m.rows_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Loads a document-embedding file and checks its row count.
pub fn load_embeddings(path: &Path, expected_rows: usize) -> Result<EmbeddingMatrix> {
    let rows = load_matrix(path)?;
    if rows.rows() != expected_rows {
        return Err(Error::RowCountMismatch {
            expected: expected_rows,
            found: rows.rows(),
        });
    }
    EmbeddingMatrix::new(rows, EmbeddingSource::Precomputed)
}

pub fn save_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    save_matrix(path, &m.rows, Precision::F32)
}

/// Word vectors aligned to a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingInit {
    pub vectors: Tensor2,
    /// Fraction of the vocabulary found in the init file.
    pub coverage: f64,
}

/// Half-width of the uniform fallback for words without a pretrained vector.
pub const OOV_INIT_RANGE: f64 = 0.05;

/// Uniform `[-0.05, 0.05]` vectors for every word.
pub fn random_word_embeddings(vocab_size: usize, dim: usize, rng: &mut StageRng) -> WordEmbeddingInit {
    WordEmbeddingInit {
        vectors: Tensor2::from_fn(vocab_size, dim, |_, _| {
            rng.random_range(-OOV_INIT_RANGE..=OOV_INIT_RANGE)
        }),
        coverage: 0.0,
    }
}

/// Reads GloVe-style `token v1 … vL` lines and aligns them to `vocab`.
/// Words missing from the file draw from the uniform fallback.
pub fn load_word_embeddings(path: &Path, vocab: &Vocabulary, rng: &mut StageRng) -> Result<WordEmbeddingInit> {
    let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut dim = None;
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::format("word embedding", format!("line {}: bad number {p:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None if values.is_empty() => {
                return Err(Error::format("word embedding", format!("line {}: no values", i + 1)))
            }
            None => dim = Some(values.len()),
            Some(l) if l != values.len() => {
                return Err(Error::DimensionMismatch {
                    line: i + 1,
                    expected: l,
                    found: values.len(),
                })
            }
            Some(_) => {}
        }
        if let Some((col, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, col });
        }
        if let Some(id) = vocab.id(token) {
            found.entry(id).or_insert(values);
        }
    }
    let dim = dim.ok_or_else(|| Error::format("word embedding", "file has no vectors"))?;
    let mut vectors = Tensor2::zeros(vocab.len(), dim);
    for v in 0..vocab.len() {
        let row = vectors.row_mut(v);
        match found.get(&v) {
            Some(vals) => row.copy_from_slice(vals),
            None => row
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-OOV_INIT_RANGE..=OOV_INIT_RANGE)),
        }
    }
    Ok(WordEmbeddingInit {
        vectors,
        coverage: found.len() as f64 / vocab.len().max(1) as f64,
    })
}

/// One document per line, whitespace tokens.
pub fn read_corpus_file(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn write_corpus_file(path: &Path, docs: &[Vec<String>]) -> Result<()> {
    let mut out = create(path)?;
    for d in docs {
        writeln!(out, "{}", d.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// One integer per line.
pub fn read_int_lines(path: &Path) -> Result<Vec<i64>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<i64>()
                .map_err(|_| Error::format("integer file", format!("line {}: {l:?}", i + 1)))
        })
        .collect()
}

pub fn write_int_lines<T: std::fmt::Display>(path: &Path, values: &[T]) -> Result<()> {
    let mut out = create(path)?;
    for v in values {
        writeln!(out, "{v}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

fn parse_fields(line: &str, what: &'static str) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| Error::format(what, format!("bad integer {f:?} in {line:?}")))
        })
        .collect()
}
