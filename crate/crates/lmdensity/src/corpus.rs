//! Corpus segmentation: split documents into fixed-length overlapping
//! whitespace-token windows. The emitted segments define the sample space
//! over which densities are computed, so the rules here are deliberately
//! strict about coverage, overlap, and id assignment.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One input document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

/// How a document's text is split into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenSplit {
    /// Split on any maximal run of Unicode whitespace (default; robust for
    /// arbitrary corpora).
    #[default]
    WhitespaceRuns,
    /// Split on the single space character only; tokens may contain tabs and
    /// newlines. Empty tokens from consecutive spaces are dropped.
    SingleSpace,
}

/// Windowing parameters, in whitespace tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    pub window_len: usize,
    pub stride: usize,
    /// Emit a final window shorter than `window_len` instead of dropping the
    /// tail. On by default so no token is lost.
    #[serde(default = "default_true")]
    pub emit_trailing: bool,
    #[serde(default)]
    pub token_split: TokenSplit,
}

fn default_true() -> bool {
    true
}

impl SegmentationConfig {
    pub fn new(window_len: usize, stride: usize) -> Result<Self> {
        let cfg = Self {
            window_len,
            stride,
            emit_trailing: true,
            token_split: TokenSplit::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.stride == 0 {
            return Err(Error::InvalidParameter(
                "window_len and stride must be positive".into(),
            ));
        }
        if self.stride > self.window_len {
            // A stride beyond the window omits tokens entirely, which turns
            // matching corpus content invisible to neighbor search.
            return Err(Error::InvalidParameter(format!(
                "stride {} exceeds window_len {}",
                self.stride, self.window_len
            )));
        }
        Ok(())
    }
}

impl Default for SegmentationConfig {
    /// 50-token windows with stride 40 (10-token overlap).
    fn default() -> Self {
        Self {
            window_len: 50,
            stride: 40,
            emit_trailing: true,
            token_split: TokenSplit::default(),
        }
    }
}

/// One emitted window. `segment_id` is dense in stream order, so it doubles
/// as the row index of the segment's vector in the embedding matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: u64,
    pub doc_id: String,
    pub token_start: usize,
    pub token_end: usize,
    pub text: String,
}

/// Per-document segment counts plus totals.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SegmentManifest {
    pub total_documents: u64,
    pub total_segments: u64,
    pub per_doc: Vec<DocSegmentCount>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocSegmentCount {
    pub doc_id: String,
    pub segments: u64,
}

/// Byte spans of the document's tokens, in order.
fn token_spans(text: &str, split: TokenSplit) -> Vec<(usize, usize)> {
    match split {
        TokenSplit::WhitespaceRuns => {
            let mut spans = Vec::new();
            let mut start = None;
            for (i, ch) in text.char_indices() {
                if ch.is_whitespace() {
                    if let Some(s) = start.take() {
                        spans.push((s, i));
                    }
                } else if start.is_none() {
                    start = Some(i);
                }
            }
            if let Some(s) = start {
                spans.push((s, text.len()));
            }
            spans
        }
        TokenSplit::SingleSpace => {
            let mut spans = Vec::new();
            let mut start = 0usize;
            for (i, ch) in text.char_indices() {
                if ch == ' ' {
                    if i > start {
                        spans.push((start, i));
                    }
                    start = i + 1;
                }
            }
            if text.len() > start {
                spans.push((start, text.len()));
            }
            spans
        }
    }
}

/// Token windows `[start, end)` for a document of `n_tokens` tokens.
///
/// Windows start at offsets 0, stride, 2*stride, ...; a window is kept only
/// if it covers at least one token no earlier window covered, and a window
/// shorter than `window_len` (necessarily the last) is kept only when
/// `emit_trailing` is set.
fn window_offsets(n_tokens: usize, cfg: &SegmentationConfig) -> Vec<(usize, usize)> {
    let mut windows = Vec::new();
    if n_tokens == 0 {
        return windows;
    }
    let w = cfg.window_len;
    let s = cfg.stride;
    let mut offset = 0usize;
    while offset < n_tokens {
        let end = (offset + w).min(n_tokens);
        // Tokens covered by earlier window positions (stride <= window_len
        // means lattice coverage is a prefix).
        let covered = if offset == 0 { 0 } else { offset - s + w };
        if end <= covered {
            break; // nothing new here or at any later offset
        }
        let full = end - offset == w;
        if full || cfg.emit_trailing {
            windows.push((offset, end));
        }
        if offset + w >= n_tokens {
            break;
        }
        offset += s;
    }
    windows
}

/// Split one document into segments. Segment ids are local (0-based); the
/// corpus-level API reassigns them densely across documents.
pub fn segment_document(doc: &Document, cfg: &SegmentationConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    if doc.doc_id.is_empty() {
        return Err(Error::InvalidParameter("doc_id must be non-empty".into()));
    }
    Ok(segment_into(doc, cfg, 0))
}

fn segment_into(doc: &Document, cfg: &SegmentationConfig, first_id: u64) -> Vec<Segment> {
    let spans = token_spans(&doc.text, cfg.token_split);
    window_offsets(spans.len(), cfg)
        .into_iter()
        .enumerate()
        .map(|(i, (start, end))| {
            let byte_start = spans[start].0;
            let byte_end = spans[end - 1].1;
            Segment {
                segment_id: first_id + i as u64,
                doc_id: doc.doc_id.clone(),
                token_start: start,
                token_end: end,
                text: doc.text[byte_start..byte_end].to_string(),
            }
        })
        .collect()
}

/// Segment a stream of documents, pushing each segment into `sink` in order.
/// Ids are dense from 0 in stream order; a repeated doc_id aborts the run.
pub fn segment_corpus<I, F>(docs: I, cfg: &SegmentationConfig, mut sink: F) -> Result<SegmentManifest>
where
    I: IntoIterator<Item = Document>,
    F: FnMut(Segment) -> Result<()>,
{
    cfg.validate()?;
    let mut seen: HashSet<String> = HashSet::new();
    let mut manifest = SegmentManifest::default();
    let mut next_id = 0u64;
    for doc in docs {
        if doc.doc_id.is_empty() {
            return Err(Error::InvalidParameter("doc_id must be non-empty".into()));
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::DuplicateDocId(doc.doc_id));
        }
        let segments = segment_into(&doc, cfg, next_id);
        let count = segments.len() as u64;
        for seg in segments {
            sink(seg)?;
        }
        next_id += count;
        manifest.per_doc.push(DocSegmentCount {
            doc_id: doc.doc_id,
            segments: count,
        });
        manifest.total_documents += 1;
        manifest.total_segments += count;
    }
    Ok(manifest)
}

/// Parse a JSON-lines reader of `{"id": ..., "text": ...}` records.
pub fn read_documents_jsonl<R: BufRead>(reader: R) -> impl Iterator<Item = Result<Document>> {
    #[derive(Deserialize)]
    struct Record {
        id: String,
        text: String,
    }
    reader.lines().filter_map(|line| match line {
        Err(e) => Some(Err(Error::Io(e))),
        Ok(line) if line.trim().is_empty() => None,
        Ok(line) => Some(
            serde_json::from_str::<Record>(&line)
                .map(|r| Document {
                    doc_id: r.id,
                    text: r.text,
                })
                .map_err(|e| Error::Schema(format!("document record: {e}"))),
        ),
    })
}

pub fn write_segment_jsonl<W: Write>(w: &mut W, segment: &Segment) -> Result<()> {
    serde_json::to_writer(&mut *w, segment)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Parse a JSON-lines reader of segments (the format `write_segment_jsonl`
/// produces).
pub fn read_segments_jsonl<R: BufRead>(reader: R) -> impl Iterator<Item = Result<Segment>> {
    reader.lines().filter_map(|line| match line {
        Err(e) => Some(Err(Error::Io(e))),
        Ok(line) if line.trim().is_empty() => None,
        Ok(line) => Some(
            serde_json::from_str::<Segment>(&line)
                .map_err(|e| Error::Schema(format!("segment record: {e}"))),
        ),
    })
}
