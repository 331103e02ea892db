//! Inline-tagged corpus ingestion, statistics and prediction files.
//!
//! A corpus is a delimited table with one row per sentence. One column holds
//! a list of relation strings in which the cause, effect and optional signal
//! are wrapped in tags, e.g.
//! `<ARG0>The bombing</ARG0> <SIG0>created</SIG0> <ARG1>panic among villagers</ARG1>.`
//! The list is serialized as a Python-style list literal, which is what the
//! public shared-task release uses; JSON string lists are accepted too.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;
use tracing::warn;

use crate::text::{AlignmentError, CesTriplet, Component, Sentence, Span};

/// Relations per sentence are capped at this count, matching the number of
/// inference rounds.
pub const MAX_TRIPLETS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TagVocabulary {
    pub cause_open: String,
    pub cause_close: String,
    pub effect_open: String,
    pub effect_close: String,
    pub signal_open: String,
    pub signal_close: String,
}

impl Default for TagVocabulary {
    fn default() -> Self {
        TagVocabulary {
            cause_open: "<ARG0>".into(),
            cause_close: "</ARG0>".into(),
            effect_open: "<ARG1>".into(),
            effect_close: "</ARG1>".into(),
            signal_open: "<SIG0>".into(),
            signal_close: "</SIG0>".into(),
        }
    }
}

impl TagVocabulary {
    pub fn new(
        cause: (&str, &str),
        effect: (&str, &str),
        signal: (&str, &str),
    ) -> Result<Self, String> {
        let vocab = TagVocabulary {
            cause_open: cause.0.into(),
            cause_close: cause.1.into(),
            effect_open: effect.0.into(),
            effect_close: effect.1.into(),
            signal_open: signal.0.into(),
            signal_close: signal.1.into(),
        };
        let tags = vocab.all();
        if tags.iter().any(|(t, _, _)| t.is_empty()) {
            return Err("tags must be non-empty".into());
        }
        for i in 0..tags.len() {
            for j in i + 1..tags.len() {
                if tags[i].0 == tags[j].0 {
                    return Err(format!("tag `{}` is used twice", tags[i].0));
                }
            }
        }
        Ok(vocab)
    }

    /// Short `<c>`/`<e>`/`<s>` tags, handy in tests and hand-written files.
    pub fn short() -> Self {
        TagVocabulary::new(("<c>", "</c>"), ("<e>", "</e>"), ("<s>", "</s>")).unwrap()
    }

    fn open(&self, c: Component) -> &str {
        match c {
            Component::Cause => &self.cause_open,
            Component::Effect => &self.effect_open,
            Component::Signal => &self.signal_open,
        }
    }

    fn close(&self, c: Component) -> &str {
        match c {
            Component::Cause => &self.cause_close,
            Component::Effect => &self.effect_close,
            Component::Signal => &self.signal_close,
        }
    }

    /// (tag, component, is_open), longest tags first so that a tag which is a
    /// prefix of another never shadows it.
    fn all(&self) -> Vec<(&str, Component, bool)> {
        let mut v: Vec<(&str, Component, bool)> = Component::ALL
            .iter()
            .flat_map(|&c| [(self.open(c), c, true), (self.close(c), c, false)])
            .collect();
        v.sort_by_key(|(t, _, _)| std::cmp::Reverse(t.len()));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("closing tag `{tag}` at offset {offset} has no matching open tag")]
    UnexpectedClose { tag: String, offset: usize },
    #[error("tag `{tag}` at offset {offset} opens a second {component} span")]
    Duplicate {
        tag: String,
        component: Component,
        offset: usize,
    },
    #[error("tag `{tag}` opened at offset {offset} is never closed")]
    Unclosed { tag: String, offset: usize },
    #[error("relation has no {component} span")]
    Missing { component: Component },
    #[error("{component} span opened at offset {offset} covers no token")]
    EmptySpan { component: Component, offset: usize },
}

/// A tag boundary fell inside a token and the span was widened to the
/// enclosing token boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SnapWarning {
    pub component: Component,
    pub original: Span,
    pub snapped: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRelation {
    pub text: String,
    pub triplet: CesTriplet,
    pub warnings: Vec<SnapWarning>,
}

/// Strips the tags from `tagged` and returns the clean text with the
/// triplet they delimit.
pub fn parse_tagged(tagged: &str, vocab: &TagVocabulary) -> Result<ParsedRelation, ParseError> {
    let tags = vocab.all();
    let mut clean = String::with_capacity(tagged.len());
    // per component: (open offset in clean text, open offset in tagged text)
    let mut open: [Option<(usize, usize)>; 3] = [None; 3];
    let mut done: [Option<Span>; 3] = [None; 3];

    let mut i = 0;
    while i < tagged.len() {
        let rest = &tagged[i..];
        if let Some(&(tag, comp, is_open)) = tags.iter().find(|(t, _, _)| rest.starts_with(t)) {
            let k = comp as usize;
            if is_open {
                if open[k].is_some() || done[k].is_some() {
                    return Err(ParseError::Duplicate {
                        tag: tag.into(),
                        component: comp,
                        offset: i,
                    });
                }
                open[k] = Some((clean.len(), i));
            } else {
                let Some((start, _)) = open[k].take() else {
                    return Err(ParseError::UnexpectedClose {
                        tag: tag.into(),
                        offset: i,
                    });
                };
                done[k] = Some(Span::new(start, clean.len()));
            }
            i += tag.len();
        } else {
            let c = rest.chars().next().unwrap();
            clean.push(c);
            i += c.len_utf8();
        }
    }
    for comp in Component::ALL {
        if let Some((_, offset)) = open[comp as usize] {
            return Err(ParseError::Unclosed {
                tag: vocab.open(comp).into(),
                offset,
            });
        }
    }

    let sentence = Sentence::new("", clean);
    let mut warnings = Vec::new();
    let mut snapped: [Option<Span>; 3] = [None; 3];
    for comp in Component::ALL {
        let Some(raw) = done[comp as usize] else {
            if comp != Component::Signal {
                return Err(ParseError::Missing { component: comp });
            }
            continue;
        };
        let span = snap_outward(&sentence, raw).ok_or(ParseError::EmptySpan {
            component: comp,
            offset: raw.start,
        })?;
        if span.start < raw.start || span.end > raw.end {
            warnings.push(SnapWarning {
                component: comp,
                original: raw,
                snapped: span,
            });
        }
        snapped[comp as usize] = Some(span);
    }
    let triplet = CesTriplet::new(snapped[0].unwrap(), snapped[1].unwrap(), snapped[2]);
    Ok(ParsedRelation {
        text: sentence.text().to_owned(),
        triplet,
        warnings,
    })
}

/// Widens a raw byte interval to cover every token it touches. Whitespace at
/// the edges is dropped. `None` when no token intersects the interval.
fn snap_outward(sentence: &Sentence, raw: Span) -> Option<Span> {
    let toks = sentence.tokens();
    let first = toks.iter().position(|t| t.end > raw.start)?;
    let last = toks.iter().rposition(|t| t.start < raw.end)?;
    if last < first {
        return None;
    }
    Some(Span::new(toks[first].start, toks[last].end))
}

/// Inserts the triplet's tags into the sentence text.
pub fn render_tagged(
    sentence: &Sentence,
    triplet: &CesTriplet,
    vocab: &TagVocabulary,
) -> Result<String, AlignmentError> {
    sentence.check_triplet(triplet)?;
    // (offset, rank, tag): closes sort before opens at the same offset
    let mut inserts: Vec<(usize, u8, &str)> = Vec::with_capacity(6);
    for comp in Component::ALL {
        if let Some(span) = triplet.get(comp) {
            inserts.push((span.start, 1 + comp as u8, vocab.open(comp)));
            inserts.push((span.end, 0, vocab.close(comp)));
        }
    }
    inserts.sort_by_key(|&(off, rank, _)| (off, rank));
    let text = sentence.text();
    let mut out = String::with_capacity(text.len() + 48);
    let mut pos = 0;
    for (off, _, tag) in inserts {
        out.push_str(&text[pos..off]);
        out.push_str(tag);
        pos = off;
    }
    out.push_str(&text[pos..]);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedExample {
    pub sentence: Sentence,
    pub triplets: Vec<CesTriplet>,
}

impl AnnotatedExample {
    pub fn new(sentence: Sentence, triplets: Vec<CesTriplet>) -> Result<Self, IngestError> {
        if triplets.is_empty() || triplets.len() > MAX_TRIPLETS {
            return Err(IngestError::TripletCount {
                id: sentence.id().to_owned(),
                count: triplets.len(),
            });
        }
        for t in &triplets {
            sentence
                .check_triplet(t)
                .map_err(|e| IngestError::Alignment {
                    id: sentence.id().to_owned(),
                    source: e,
                })?;
        }
        Ok(AnnotatedExample { sentence, triplets })
    }
}

/// Column layout of a corpus or prediction table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFormat {
    pub delimiter: u8,
    pub id_column: String,
    pub text_column: String,
    pub relations_column: String,
    pub vocab: TagVocabulary,
}

impl Default for CorpusFormat {
    fn default() -> Self {
        CorpusFormat {
            delimiter: b',',
            id_column: "index".into(),
            text_column: "text".into(),
            relations_column: "causal_text_w_pairs".into(),
            vocab: TagVocabulary::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("table error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("row {row}: {source}")]
    Relation {
        row: usize,
        #[source]
        source: ParseError,
    },
    #[error("example {id}: {count} triplets (expected 1..=4)")]
    TripletCount { id: String, count: usize },
    #[error("example {id}: {source}")]
    Alignment {
        id: String,
        #[source]
        source: AlignmentError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum IngestWarning {
    NoRelations {
        row: usize,
        id: String,
    },
    Truncated {
        row: usize,
        id: String,
        count: usize,
    },
    Snapped {
        row: usize,
        id: String,
        warning: SnapWarning,
    },
    TextMismatch {
        row: usize,
        id: String,
    },
}

/// One table row before relation parsing. `row` is 1-based over data rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRow {
    pub row: usize,
    pub id: String,
    pub text: String,
    pub relations: Option<Vec<String>>,
}

/// Reads all rows. The relations column is optional unless
/// `require_relations` is set.
pub fn read_rows<R: Read>(
    reader: R,
    format: &CorpusFormat,
    require_relations: bool,
) -> Result<Vec<RawRow>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col(&format.id_column)
        .ok_or_else(|| IngestError::MissingColumn(format.id_column.clone()))?;
    let text_col = col(&format.text_column)
        .ok_or_else(|| IngestError::MissingColumn(format.text_column.clone()))?;
    let rel_col = col(&format.relations_column);
    if require_relations && rel_col.is_none() {
        return Err(IngestError::MissingColumn(format.relations_column.clone()));
    }

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| IngestError::Row {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or_default().to_owned();
        let relations = match rel_col {
            Some(c) => Some(
                parse_string_list(record.get(c).unwrap_or_default()).map_err(|message| {
                    IngestError::Row {
                        row,
                        message: format!("column `{}`: {message}", format.relations_column),
                    }
                })?,
            ),
            None => None,
        };
        rows.push(RawRow {
            row,
            id: field(id_col),
            text: field(text_col),
            relations,
        });
    }
    Ok(rows)
}

/// A row with its parsed relations. The relation list may be empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRow {
    pub row: usize,
    pub sentence: Sentence,
    pub triplets: Vec<CesTriplet>,
}

fn parse_row(
    raw: &RawRow,
    vocab: &TagVocabulary,
    warnings: &mut Vec<IngestWarning>,
) -> Result<ParsedRow, IngestError> {
    let relations = raw.relations.as_deref().unwrap_or_default();
    let mut text: Option<String> = None;
    let mut triplets = Vec::with_capacity(relations.len());
    for rel in relations {
        let parsed = parse_tagged(rel, vocab).map_err(|source| IngestError::Relation {
            row: raw.row,
            source,
        })?;
        match &text {
            None => text = Some(parsed.text),
            Some(t) if *t == parsed.text => {}
            Some(_) => {
                return Err(IngestError::Row {
                    row: raw.row,
                    message: "relations disagree on the untagged sentence text".into(),
                })
            }
        }
        for w in parsed.warnings {
            warnings.push(IngestWarning::Snapped {
                row: raw.row,
                id: raw.id.clone(),
                warning: w,
            });
        }
        triplets.push(parsed.triplet);
    }
    let text = match text {
        Some(t) => {
            if t != raw.text {
                warnings.push(IngestWarning::TextMismatch {
                    row: raw.row,
                    id: raw.id.clone(),
                });
            }
            t
        }
        None => raw.text.clone(),
    };
    Ok(ParsedRow {
        row: raw.row,
        sentence: Sentence::new(raw.id.clone(), text),
        triplets,
    })
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub examples: Vec<AnnotatedExample>,
    pub warnings: Vec<IngestWarning>,
}

/// Loads annotated examples. Rows without relations are skipped and rows
/// with more than [`MAX_TRIPLETS`] relations are truncated, both with a
/// warning.
pub fn read_corpus<R: Read>(reader: R, format: &CorpusFormat) -> Result<LoadedCorpus, IngestError> {
    let rows = read_rows(reader, format, true)?;
    let mut out = LoadedCorpus::default();
    for raw in &rows {
        let mut parsed = parse_row(raw, &format.vocab, &mut out.warnings)?;
        if parsed.triplets.is_empty() {
            out.warnings.push(IngestWarning::NoRelations {
                row: raw.row,
                id: raw.id.clone(),
            });
            continue;
        }
        if parsed.triplets.len() > MAX_TRIPLETS {
            out.warnings.push(IngestWarning::Truncated {
                row: raw.row,
                id: raw.id.clone(),
                count: parsed.triplets.len(),
            });
            parsed.triplets.truncate(MAX_TRIPLETS);
        }
        out.examples
            .push(AnnotatedExample::new(parsed.sentence, parsed.triplets)?);
    }
    for w in &out.warnings {
        warn!(?w, "corpus ingestion");
    }
    Ok(out)
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    format: &CorpusFormat,
) -> Result<LoadedCorpus, IngestError> {
    let file = std::fs::File::open(path)?;
    read_corpus(file, format)
}

/// Loads every row, keeping rows without relations. Used for prediction
/// files and for unlabeled extraction input.
pub fn load_rows(
    path: impl AsRef<Path>,
    format: &CorpusFormat,
) -> Result<(Vec<ParsedRow>, Vec<IngestWarning>), IngestError> {
    let file = std::fs::File::open(path)?;
    read_parsed_rows(file, format)
}

pub fn read_parsed_rows<R: Read>(
    reader: R,
    format: &CorpusFormat,
) -> Result<(Vec<ParsedRow>, Vec<IngestWarning>), IngestError> {
    let rows = read_rows(reader, format, false)?;
    let mut warnings = Vec::new();
    let parsed = rows
        .iter()
        .map(|r| parse_row(r, &format.vocab, &mut warnings))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((parsed, warnings))
}

/// Writes one row per sentence, in the given order, with one tagged string
/// per triplet.
pub fn write_predictions<W: Write>(
    writer: W,
    format: &CorpusFormat,
    rows: &[(&Sentence, &[CesTriplet])],
) -> Result<(), IngestError> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(format.delimiter)
        .from_writer(writer);
    wtr.write_record([
        format.id_column.as_str(),
        format.text_column.as_str(),
        format.relations_column.as_str(),
    ])?;
    for (sentence, triplets) in rows {
        let tagged = triplets
            .iter()
            .map(|t| render_tagged(sentence, t, &format.vocab))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| IngestError::Alignment {
                id: sentence.id().to_owned(),
                source,
            })?;
        wtr.write_record([sentence.id(), sentence.text(), &format_string_list(&tagged)])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_sentences: usize,
    pub n_relations: usize,
    pub n_signals: usize,
    /// `n_signals / n_relations`; 0 when there are no relations.
    pub signal_fraction: f64,
    pub fraction_defined: bool,
}

pub fn corpus_stats(examples: &[AnnotatedExample]) -> CorpusStats {
    let n_relations: usize = examples.iter().map(|e| e.triplets.len()).sum();
    let n_signals = examples
        .iter()
        .flat_map(|e| &e.triplets)
        .filter(|t| t.signal.is_some())
        .count();
    let defined = n_relations > 0;
    CorpusStats {
        n_sentences: examples.len(),
        n_relations,
        n_signals,
        signal_fraction: if defined {
            n_signals as f64 / n_relations as f64
        } else {
            0.0
        },
        fraction_defined: defined,
    }
}

/// Parses `['a', "b"]` (Python literal) or `["a", "b"]` (JSON).
pub fn parse_string_list(s: &str) -> Result<Vec<String>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let mut chars = s.char_indices().peekable();
    let skip_ws = |it: &mut std::iter::Peekable<std::str::CharIndices>| {
        while it.peek().is_some_and(|(_, c)| c.is_whitespace()) {
            it.next();
        }
    };
    match chars.next() {
        Some((_, '[')) => {}
        _ => return Err("relation list must start with `[`".into()),
    }
    let mut out = Vec::new();
    loop {
        skip_ws(&mut chars);
        match chars.next() {
            Some((_, ']')) if out.is_empty() => break,
            Some((_, q @ ('\'' | '"'))) => {
                let mut item = String::new();
                loop {
                    match chars.next() {
                        None => return Err("unterminated string in relation list".into()),
                        Some((_, c)) if c == q => break,
                        Some((i, '\\')) => {
                            let Some((_, e)) = chars.next() else {
                                return Err(format!("dangling escape at {i}"));
                            };
                            match e {
                                'n' => item.push('\n'),
                                't' => item.push('\t'),
                                'r' => item.push('\r'),
                                '\\' | '\'' | '"' | '/' => item.push(e),
                                'x' | 'u' => {
                                    let n = if e == 'x' { 2 } else { 4 };
                                    let hex: String = (0..n)
                                        .filter_map(|_| chars.next().map(|(_, c)| c))
                                        .collect();
                                    let code = u32::from_str_radix(&hex, 16)
                                        .ok()
                                        .and_then(char::from_u32)
                                        .ok_or_else(|| format!("bad \\{e} escape at {i}"))?;
                                    item.push(code);
                                }
                                other => {
                                    item.push('\\');
                                    item.push(other);
                                }
                            }
                        }
                        Some((_, c)) => item.push(c),
                    }
                }
                out.push(item);
                skip_ws(&mut chars);
                match chars.next() {
                    Some((_, ',')) => continue,
                    Some((_, ']')) => break,
                    Some((i, c)) => return Err(format!("unexpected `{c}` at {i}")),
                    None => return Err("unterminated relation list".into()),
                }
            }
            Some((i, c)) => return Err(format!("unexpected `{c}` at {i}")),
            None => return Err("unterminated relation list".into()),
        }
    }
    skip_ws(&mut chars);
    if let Some((i, c)) = chars.next() {
        return Err(format!("trailing `{c}` at {i}"));
    }
    Ok(out)
}

/// Formats strings the way Python's `repr` formats a list of `str`.
pub fn format_string_list(items: &[String]) -> String {
    let mut out = String::from("[");
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let quote = if item.contains('\'') && !item.contains('"') {
            '"'
        } else {
            '\''
        };
        out.push(quote);
        for c in item.chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                '\n' => out.push_str("\\n"),
                '\t' => out.push_str("\\t"),
                '\r' => out.push_str("\\r"),
                c if c == quote => {
                    out.push('\\');
                    out.push(c);
                }
                c => out.push(c),
            }
        }
        out.push(quote);
    }
    out.push(']');
    out
}
