use rand::Rng;
use thiserror::Error;

use crate::text::{CesTriplet, Sentence, Span};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("sentence `{id}` has {tokens} token(s); disjoint cause and effect need at least 2")]
pub struct BaselineError {
    pub id: String,
    pub tokens: usize,
}

fn uniform_span<R: Rng + ?Sized>(sentence: &Sentence, rng: &mut R) -> Span {
    // uniform over all n(n+1)/2 token ranges
    let n = sentence.len_tokens();
    let k = rng.random_range(0..n * (n + 1) / 2);
    let (mut start, mut rest) = (0, k);
    while rest >= n - start {
        rest -= n - start;
        start += 1;
    }
    sentence
        .span_from_tokens(start..start + rest + 1)
        .expect("range within sentence")
}

/// Uniformly random cause, effect and signal spans; cause and effect never
/// overlap (rejection sampling). The signal is unconstrained.
pub fn random_baseline<R: Rng + ?Sized>(
    sentence: &Sentence,
    rng: &mut R,
) -> Result<CesTriplet, BaselineError> {
    if sentence.len_tokens() < 2 {
        return Err(BaselineError {
            id: sentence.id().to_owned(),
            tokens: sentence.len_tokens(),
        });
    }
    let (cause, effect) = loop {
        let c = uniform_span(sentence, rng);
        let e = uniform_span(sentence, rng);
        if !c.overlaps(&e) {
            break (c, e);
        }
    };
    let signal = uniform_span(sentence, rng);
    Ok(CesTriplet::new(cause, effect, Some(signal)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn two_token_sentence() {
        let s = Sentence::new("1", "rain floods");
        let a = s.span_from_tokens(0..1).unwrap();
        let b = s.span_from_tokens(1..2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = random_baseline(&s, &mut rng).unwrap();
            assert!((t.cause, t.effect) == (a, b) || (t.cause, t.effect) == (b, a));
        }
    }

    #[test]
    fn single_token_is_an_error() {
        let s = Sentence::new("1", "rain");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            random_baseline(&s, &mut rng),
            Err(BaselineError {
                id: "1".into(),
                tokens: 1
            })
        );
    }

    #[test]
    fn seeded_and_never_overlapping() {
        let s = Sentence::new("1", "The bombing created panic among villagers.");
        let a = random_baseline(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_baseline(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10_000 {
            let t = random_baseline(&s, &mut rng).unwrap();
            assert!(!t.cause.overlaps(&t.effect));
            s.check_triplet(&t).unwrap();
        }
    }

    #[test]
    fn spans_are_uniform() {
        // 4 tokens -> 10 spans
        let s = Sentence::new("1", "a b c d");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts: HashMap<Span, usize> = HashMap::new();
        let draws = 20_000;
        for _ in 0..draws {
            *counts.entry(uniform_span(&s, &mut rng)).or_default() += 1;
        }
        assert_eq!(counts.len(), 10);
        for c in counts.values() {
            assert!((*c as f64 / draws as f64 - 0.1).abs() < 0.01);
        }
    }
}
