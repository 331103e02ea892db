//! Maps free-form generations back onto sentence spans.
//!
//! The best span is the token-aligned substring with the highest token-level
//! F1 against the generated tokens. Ties prefer the shorter substring, then
//! the one starting further left.
//!
//! [`best_f1_substring`] searches window lengths in decreasing order of an
//! upper bound on the F1 any window of that length can reach, slides each
//! window with an incremental multiset-overlap counter and stops once no
//! remaining length can beat the incumbent. For a window of `L` tokens,
//! generation length `g` and total attainable overlap `m` (the multiset
//! intersection of the generation with the whole sentence),
//!
//! ```text
//! F1 <= 2 * min(L, m) / (L + g)
//! ```
//!
//! [`brute_force_best`] scores every substring from scratch and serves as the
//! reference.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::Serialize;

use crate::prompt::EMPTY_TOKEN;
use crate::text::{tokenize, Sentence, Span};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchResult {
    pub span: Option<Span>,
    pub f1: f64,
    /// Number of substrings that were scored.
    pub candidates_evaluated: usize,
}

impl MatchResult {
    fn none(candidates_evaluated: usize) -> Self {
        MatchResult {
            span: None,
            f1: 0.0,
            candidates_evaluated,
        }
    }
}

/// Lower-cased tokens of a generated string.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .map(|t| text[t.start..t.end].to_lowercase())
        .collect()
}

/// Token-level F1 from the multiset intersection of `a` and `b`.
pub fn token_f1<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in a {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in b {
        if let Some(c) = counts.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f1_from_counts(overlap, a.len() + b.len())
}

fn f1_from_counts(overlap: usize, total_len: usize) -> f64 {
    2.0 * overlap as f64 / total_len as f64
}

/// Exact rational score `2 * overlap / (len + g)`.
#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    fn cmp(self, other: Ratio) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

/// Case-folded sentence tokens mapped to dense ids, plus the generation's
/// count per id. Generated tokens absent from the sentence only contribute
/// to the generation length.
struct Interned {
    sentence: Vec<usize>,
    wanted: Vec<u32>,
}

fn intern(generated: &[String], sentence: &Sentence) -> Interned {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let sentence: Vec<usize> = sentence
        .token_strs()
        .map(|t| {
            let n = ids.len();
            *ids.entry(t.to_lowercase()).or_insert(n)
        })
        .collect();
    let mut wanted = vec![0u32; ids.len()];
    for g in generated {
        if let Some(&id) = ids.get(g.as_str()) {
            wanted[id] += 1;
        }
    }
    Interned { sentence, wanted }
}

/// Multiset overlap of a window with the generation, maintained as tokens
/// enter and leave.
struct WindowOverlap<'a> {
    wanted: &'a [u32],
    have: Vec<u32>,
    overlap: usize,
}

impl<'a> WindowOverlap<'a> {
    fn new(wanted: &'a [u32]) -> Self {
        WindowOverlap {
            wanted,
            have: vec![0; wanted.len()],
            overlap: 0,
        }
    }

    fn push(&mut self, id: usize) {
        if self.have[id] < self.wanted[id] {
            self.overlap += 1;
        }
        self.have[id] += 1;
    }

    fn pop(&mut self, id: usize) {
        self.have[id] -= 1;
        if self.have[id] < self.wanted[id] {
            self.overlap -= 1;
        }
    }

    fn clear(&mut self) {
        self.have.iter_mut().for_each(|h| *h = 0);
        self.overlap = 0;
    }
}

/// Best-scoring token-aligned substring of `sentence` for the (case-folded)
/// `generated` tokens, with bound-based pruning.
pub fn best_f1_substring(generated: &[String], sentence: &Sentence) -> MatchResult {
    let n = sentence.len_tokens();
    let g = generated.len();
    if g == 0 || n == 0 {
        return MatchResult::none(0);
    }
    let interned = intern(generated, sentence);

    // overlap attainable by the whole sentence
    let mut whole = WindowOverlap::new(&interned.wanted);
    for &id in &interned.sentence {
        whole.push(id);
    }
    let max_overlap = whole.overlap;
    if max_overlap == 0 {
        return MatchResult::none(0);
    }

    let bound = |len: usize| Ratio {
        num: 2 * len.min(max_overlap) as u64,
        den: (len + g) as u64,
    };
    let mut lengths: Vec<usize> = (1..=n).collect();
    lengths.sort_by(|&a, &b| bound(b).cmp(bound(a)).then(a.cmp(&b)));

    // (score, len, start)
    let mut best: Option<(Ratio, usize, usize)> = None;
    let mut evaluated = 0usize;
    let mut window = WindowOverlap::new(&interned.wanted);

    for len in lengths {
        let b = bound(len);
        if let Some((score, best_len, _)) = best {
            match b.cmp(score) {
                Ordering::Less => break,
                // a tie can only win by being shorter
                Ordering::Equal if len >= best_len => continue,
                _ => {}
            }
        }
        window.clear();
        for &id in &interned.sentence[..len] {
            window.push(id);
        }
        for start in 0..=n - len {
            if start > 0 {
                window.pop(interned.sentence[start - 1]);
                window.push(interned.sentence[start + len - 1]);
            }
            evaluated += 1;
            if window.overlap == 0 {
                continue;
            }
            let score = Ratio {
                num: 2 * window.overlap as u64,
                den: (len + g) as u64,
            };
            let better = match best {
                None => true,
                Some((s, l, st)) => match score.cmp(s) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => (len, start) < (l, st),
                },
            };
            if better {
                best = Some((score, len, start));
            }
        }
    }

    match best {
        Some((score, len, start)) => MatchResult {
            span: Some(
                sentence
                    .span_from_tokens(start..start + len)
                    .expect("window inside sentence"),
            ),
            f1: f1_from_counts(score.num as usize / 2, score.den as usize),
            candidates_evaluated: evaluated,
        },
        None => MatchResult::none(evaluated),
    }
}

/// Reference search: every substring, scored from scratch with [`token_f1`].
pub fn brute_force_best(generated: &[String], sentence: &Sentence) -> MatchResult {
    let toks: Vec<String> = sentence.token_strs().map(str::to_lowercase).collect();
    let n = toks.len();
    let mut best: Option<(f64, usize, usize)> = None;
    let mut evaluated = 0;
    for start in 0..n {
        for end in start + 1..=n {
            evaluated += 1;
            let f1 = token_f1(generated, &toks[start..end]);
            if f1 == 0.0 {
                continue;
            }
            let len = end - start;
            let better = match best {
                None => true,
                Some((bf, bl, bs)) => f1 > bf || (f1 == bf && (len, start) < (bl, bs)),
            };
            if better {
                best = Some((f1, len, start));
            }
        }
    }
    match best {
        Some((f1, len, start)) => MatchResult {
            span: Some(sentence.span_from_tokens(start..start + len).unwrap()),
            f1,
            candidates_evaluated: evaluated,
        },
        None => MatchResult::none(evaluated),
    }
}

/// Matches raw generated text. The empty-signal token never matches.
pub fn match_generation(generated: &str, sentence: &Sentence) -> MatchResult {
    if generated.trim() == EMPTY_TOKEN {
        return MatchResult::none(0);
    }
    best_f1_substring(&normalize_tokens(generated), sentence)
}
