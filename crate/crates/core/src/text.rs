//! Sentences, word tokens, spans and CES triplets.
//!
//! Every offset in this crate is a byte offset into the sentence's UTF-8
//! text. Offsets always sit on `char` boundaries because they are produced
//! by the tokenizer, so slicing with them never panics.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-open byte interval of one word token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token {
    pub start: usize,
    pub end: usize,
}

/// Half-open byte interval over a sentence, aligned to token boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignmentError {
    #[error("span {span} is empty or exceeds the sentence length {len}")]
    OutOfBounds { span: Span, len: usize },
    #[error("span {span} does not start and end on token boundaries")]
    NotTokenAligned { span: Span },
    #[error("token range {start}..{end} is invalid for a sentence of {n_tokens} tokens")]
    BadTokenRange {
        start: usize,
        end: usize,
        n_tokens: usize,
    },
}

/// The three components of a causal relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Cause,
    Effect,
    Signal,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Cause, Component::Effect, Component::Signal];

    pub fn name(self) -> &'static str {
        match self {
            Component::Cause => "cause",
            Component::Effect => "effect",
            Component::Signal => "signal",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cause and effect are mandatory; the signal is optional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CesTriplet {
    pub cause: Span,
    pub effect: Span,
    pub signal: Option<Span>,
}

impl CesTriplet {
    pub fn new(cause: Span, effect: Span, signal: Option<Span>) -> Self {
        CesTriplet {
            cause,
            effect,
            signal,
        }
    }

    pub fn get(&self, component: Component) -> Option<Span> {
        match component {
            Component::Cause => Some(self.cause),
            Component::Effect => Some(self.effect),
            Component::Signal => self.signal,
        }
    }
}

/// Which of cause and effect is generated first. The signal is always last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum GenerationOrder {
    #[default]
    CauseEffectSignal,
    EffectCauseSignal,
}

impl GenerationOrder {
    pub fn components(self) -> [Component; 3] {
        match self {
            GenerationOrder::CauseEffectSignal => {
                [Component::Cause, Component::Effect, Component::Signal]
            }
            GenerationOrder::EffectCauseSignal => {
                [Component::Effect, Component::Cause, Component::Signal]
            }
        }
    }
}

impl std::str::FromStr for GenerationOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ces" => Ok(GenerationOrder::CauseEffectSignal),
            "ecs" => Ok(GenerationOrder::EffectCauseSignal),
            other => Err(format!(
                "unknown generation order `{other}` (expected ces or ecs)"
            )),
        }
    }
}

impl fmt::Display for GenerationOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenerationOrder::CauseEffectSignal => f.write_str("ces"),
            GenerationOrder::EffectCauseSignal => f.write_str("ecs"),
        }
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{2026}'
                | '\u{00AB}'
                | '\u{00BB}'
        )
}

/// Splits `text` into word tokens.
///
/// A token is a maximal run of non-whitespace characters, except that
/// punctuation marks at either end of a run are peeled off one character at
/// a time into tokens of their own. Punctuation inside a run ("all-night",
/// "4,000") stays attached.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = run_start.take() {
                split_run(text, s, i, &mut tokens);
            }
        } else if run_start.is_none() {
            run_start = Some(i);
        }
    }
    if let Some(s) = run_start {
        split_run(text, s, text.len(), &mut tokens);
    }
    tokens
}

fn split_run(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let run = &text[start..end];
    let mut lead = Vec::new();
    let mut body_start = 0;
    for (i, c) in run.char_indices() {
        if !is_punct(c) {
            break;
        }
        lead.push(Token {
            start: start + i,
            end: start + i + c.len_utf8(),
        });
        body_start = i + c.len_utf8();
    }
    if body_start == run.len() {
        // all punctuation
        out.extend(lead);
        return;
    }
    let mut trail = Vec::new();
    let mut body_end = run.len();
    for (i, c) in run.char_indices().rev() {
        if i < body_start || !is_punct(c) {
            break;
        }
        trail.push(Token {
            start: start + i,
            end: start + i + c.len_utf8(),
        });
        body_end = i;
    }
    out.extend(lead);
    out.push(Token {
        start: start + body_start,
        end: start + body_end,
    });
    out.extend(trail.into_iter().rev());
}

/// A sentence together with its word tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    id: String,
    text: String,
    tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Sentence {
            id: id.into(),
            text,
            tokens,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_str(&self, index: usize) -> &str {
        let t = self.tokens[index];
        &self.text[t.start..t.end]
    }

    pub fn token_strs(&self) -> impl Iterator<Item = &str> + '_ {
        self.tokens.iter().map(|t| &self.text[t.start..t.end])
    }

    /// Span covering tokens `range.start..range.end`.
    pub fn span_from_tokens(&self, range: Range<usize>) -> Result<Span, AlignmentError> {
        if range.start >= range.end || range.end > self.tokens.len() {
            return Err(AlignmentError::BadTokenRange {
                start: range.start,
                end: range.end,
                n_tokens: self.tokens.len(),
            });
        }
        Ok(Span {
            start: self.tokens[range.start].start,
            end: self.tokens[range.end - 1].end,
        })
    }

    /// Token index range covered by `span`.
    pub fn token_range(&self, span: Span) -> Result<Range<usize>, AlignmentError> {
        if span.start >= span.end || span.end > self.text.len() {
            return Err(AlignmentError::OutOfBounds {
                span,
                len: self.text.len(),
            });
        }
        let first = self
            .tokens
            .binary_search_by_key(&span.start, |t| t.start)
            .map_err(|_| AlignmentError::NotTokenAligned { span })?;
        let last = self
            .tokens
            .binary_search_by_key(&span.end, |t| t.end)
            .map_err(|_| AlignmentError::NotTokenAligned { span })?;
        if last < first {
            return Err(AlignmentError::NotTokenAligned { span });
        }
        Ok(first..last + 1)
    }

    pub fn check_span(&self, span: Span) -> Result<(), AlignmentError> {
        self.token_range(span).map(|_| ())
    }

    pub fn span_text(&self, span: Span) -> Result<&str, AlignmentError> {
        self.check_span(span)?;
        Ok(&self.text[span.start..span.end])
    }

    pub fn check_triplet(&self, triplet: &CesTriplet) -> Result<(), AlignmentError> {
        self.check_span(triplet.cause)?;
        self.check_span(triplet.effect)?;
        if let Some(signal) = triplet.signal {
            self.check_span(signal)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOMBING: &str = "The bombing created panic among villagers.";

    fn strs(text: &str) -> Vec<&str> {
        tokenize(text)
            .into_iter()
            .map(|t| &text[t.start..t.end])
            .collect()
    }

    #[test]
    fn figure_sentence_has_seven_tokens() {
        let toks = strs(BOMBING);
        assert_eq!(toks.len(), 7);
        assert_eq!(toks.last(), Some(&"."));
        assert_eq!(toks[5], "villagers");
    }

    #[test]
    fn empty_and_whitespace() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n").is_empty());
        assert_eq!(
            tokenize("a  b"),
            vec![Token { start: 0, end: 1 }, Token { start: 3, end: 4 }]
        );
    }

    #[test]
    fn punctuation_peeling() {
        assert_eq!(strs("(hello)."), vec!["(", "hello", ")", "."]);
        assert_eq!(strs("all-night 4,000"), vec!["all-night", "4,000"]);
        assert_eq!(strs("..."), vec![".", ".", "."]);
        assert_eq!(
            strs("\u{201C}Nein,\u{201D} er"),
            vec!["\u{201C}", "Nein", ",", "\u{201D}", "er"]
        );
        assert_eq!(strs("U.S."), vec!["U.S", "."]);
    }

    #[test]
    fn span_text_lookups() {
        let s = Sentence::new("1", BOMBING);
        let cause = s.span_from_tokens(0..2).unwrap();
        assert_eq!(s.span_text(cause).unwrap(), "The bombing");
        let full = s.span_from_tokens(0..7).unwrap();
        assert_eq!(s.span_text(full).unwrap(), BOMBING);
        assert_eq!(s.token_range(cause).unwrap(), 0..2);
    }

    #[test]
    fn misaligned_spans_are_rejected() {
        let s = Sentence::new("1", BOMBING);
        assert!(matches!(
            s.span_text(Span::new(1, 11)),
            Err(AlignmentError::NotTokenAligned { .. })
        ));
        assert!(matches!(
            s.span_text(Span::new(0, 3)).map(str::to_owned),
            Ok(ref t) if t == "The"
        ));
        assert!(matches!(
            s.span_text(Span::new(4, 4)),
            Err(AlignmentError::OutOfBounds { .. })
        ));
        assert!(matches!(
            s.span_text(Span::new(0, 100)),
            Err(AlignmentError::OutOfBounds { .. })
        ));
        assert!(s.span_from_tokens(3..3).is_err());
        assert!(s.span_from_tokens(6..8).is_err());
    }

    #[test]
    fn order_parsing() {
        assert_eq!(
            "CES".parse::<GenerationOrder>(),
            Ok(GenerationOrder::CauseEffectSignal)
        );
        assert_eq!(
            "ecs".parse::<GenerationOrder>(),
            Ok(GenerationOrder::EffectCauseSignal)
        );
        assert!("sec".parse::<GenerationOrder>().is_err());
        for order in [
            GenerationOrder::CauseEffectSignal,
            GenerationOrder::EffectCauseSignal,
        ] {
            assert_eq!(order.components()[2], Component::Signal);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn token_invariants(text in "[a-zA-Z .,!()'\"\\-\t\u{e9}\u{2014}]{0,60}") {
                let toks = tokenize(&text);
                let mut prev_end = 0;
                for (i, t) in toks.iter().enumerate() {
                    prop_assert!(t.start < t.end);
                    prop_assert!(t.end <= text.len());
                    if i > 0 { prop_assert!(t.start >= prev_end); }
                    prev_end = t.end;
                    prop_assert!(!text[t.start..t.end].chars().any(char::is_whitespace));
                }
                prop_assert_eq!(tokenize(&text), toks.clone());
                // tokens cover every non-whitespace character
                let covered: usize = toks.iter().map(|t| t.end - t.start).sum();
                let non_ws: usize = text.chars().filter(|c| !c.is_whitespace()).map(char::len_utf8).sum();
                prop_assert_eq!(covered, non_ws);
            }

            #[test]
            fn span_round_trip(text in "[a-z]{1,6}( [a-z,.]{1,6}){0,12}", a in 0usize..20, b in 0usize..20) {
                let s = Sentence::new("p", text.clone());
                let n = s.len_tokens();
                prop_assume!(n > 0);
                let (lo, hi) = (a.min(b) % n, a.max(b) % n);
                let (lo, hi) = (lo.min(hi), lo.max(hi) + 1);
                let span = s.span_from_tokens(lo..hi).unwrap();
                let sub = s.span_text(span).unwrap();
                prop_assert_eq!(&text[span.start..span.start + sub.len()], sub);
                prop_assert_eq!(s.token_range(span).unwrap(), lo..hi);
            }
        }
    }
}
