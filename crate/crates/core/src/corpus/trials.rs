//! Intact/random context trials built from a tokenized corpus.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::text::TokenLevel;
use super::{Corpus, CorpusError};

/// Where a sentence is cut into context and shared segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    /// After the first `, and` marker that satisfies the length constraints.
    Conjunction,
    /// After the first `n` tokens of a long sentence.
    TokenIndex(usize),
    /// Between two consecutive sentences of a paragraph, the first ending in `.`.
    FullStop,
}

impl fmt::Display for Segmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segmentation::Conjunction => f.write_str("conjunction"),
            Segmentation::TokenIndex(n) => write!(f, "token_index:{n}"),
            Segmentation::FullStop => f.write_str("full_stop"),
        }
    }
}

impl FromStr for Segmentation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conjunction" => Ok(Segmentation::Conjunction),
            "full_stop" => Ok(Segmentation::FullStop),
            _ => {
                let n = s
                    .strip_prefix("token_index:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n > 0)
                    .ok_or_else(|| {
                        format!("unknown segmentation `{s}` (expected conjunction|full_stop|token_index:N)")
                    })?;
                Ok(Segmentation::TokenIndex(n))
            }
        }
    }
}

/// Length limits are inclusive minimums, in tokens of the corpus level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConstraints {
    pub min_shared: usize,
    pub min_context: usize,
    /// Sentences whose mean per-token perplexity is not below this are dropped.
    pub max_ppl: Option<f64>,
}

/// Scores a token sequence; implemented by language models.
pub trait SentenceScorer {
    /// Mean per-token perplexity of `tokens`.
    fn perplexity(&self, tokens: &[u32]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextCondition {
    /// Random contexts are segments taken from other sentences.
    Replaced,
    /// Random contexts are permutations of the intact context.
    Shuffled,
}

/// Position of a trial in the corpus token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    /// Indices into [`Corpus::sentences`] covered by the trial.
    pub sentences: Vec<usize>,
    pub start: usize,
    /// First token of the shared segment.
    pub boundary: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub context: Vec<u32>,
    pub shared: Vec<u32>,
    pub segmentation: Segmentation,
    pub randoms: Vec<Vec<u32>>,
    pub condition: ContextCondition,
    pub source: SourceSpan,
    /// Seed used for the random contexts, if any were drawn.
    pub seed: Option<u64>,
}

impl TrialSpec {
    pub fn intact_sequence(&self) -> Vec<u32> {
        [self.context.as_slice(), self.shared.as_slice()].concat()
    }

    pub fn random_sequence(&self, i: usize) -> Vec<u32> {
        [self.randoms[i].as_slice(), self.shared.as_slice()].concat()
    }
}

/// Serialized trial file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub mode: Segmentation,
    pub level: TokenLevel,
    pub constraints: TrialConstraints,
    pub trials: Vec<TrialSpec>,
}

/// Token offsets inside `tokens` immediately after each `, and` marker.
///
/// Word level matches `,` followed by `and` (any case). Char level matches
/// `,` then an optional space then `and`; when spaces are kept, `and` must
/// also end the word.
pub fn conjunction_boundaries(corpus: &Corpus, tokens: &[u32]) -> Vec<usize> {
    let v = &corpus.vocab;
    let Some(comma) = v.id(",") else {
        return Vec::new();
    };
    let mut out = Vec::new();
    match corpus.level() {
        TokenLevel::Word => {
            let is_and = |t: u32| v.token(t).is_some_and(|s| s.eq_ignore_ascii_case("and"));
            for j in 0..tokens.len().saturating_sub(1) {
                if tokens[j] == comma && is_and(tokens[j + 1]) {
                    out.push(j + 2);
                }
            }
        }
        TokenLevel::Char => {
            let ch =
                |i: usize| -> Option<char> { tokens.get(i).and_then(|&t| v.token(t)).and_then(|s| s.chars().next()) };
            for j in 0..tokens.len() {
                if tokens[j] != comma {
                    continue;
                }
                let mut k = j + 1;
                if ch(k) == Some(' ') {
                    k += 1;
                }
                let word: String = (k..k + 3).filter_map(ch).collect();
                if !word.eq_ignore_ascii_case("and") {
                    continue;
                }
                let keeps_spaces = !v.text_config.strip_whitespace;
                if keeps_spaces && ch(k + 3).is_some_and(char::is_alphabetic) {
                    continue;
                }
                out.push(k + 3);
            }
        }
    }
    out
}

/// Cuts every qualifying sentence into a trial, in corpus order.
pub fn extract_trials(
    corpus: &Corpus,
    segmentation: Segmentation,
    constraints: &TrialConstraints,
    scorer: Option<&dyn SentenceScorer>,
) -> Vec<TrialSpec> {
    let passes_ppl = |tokens: &[u32]| match (constraints.max_ppl, scorer) {
        (Some(max), Some(s)) => s.perplexity(tokens) < max,
        _ => true,
    };
    let fits = |context: usize, shared: usize| context >= constraints.min_context && shared >= constraints.min_shared;
    let mut trials = Vec::new();
    let sentences = &corpus.sentences;
    for (i, sentence) in sentences.iter().enumerate() {
        let tokens = corpus.sentence_tokens(i);
        let start = sentence.span.start;
        let cut = match segmentation {
            Segmentation::Conjunction => conjunction_boundaries(corpus, tokens)
                .into_iter()
                .find(|&b| fits(b, tokens.len() - b))
                .map(|b| (vec![i], start + b, sentence.span.end)),
            Segmentation::TokenIndex(n) => {
                let long = tokens.len() >= constraints.min_context + constraints.min_shared;
                (long && n < tokens.len() && fits(n, tokens.len() - n)).then(|| (vec![i], start + n, sentence.span.end))
            }
            Segmentation::FullStop => {
                let next = sentences.get(i + 1);
                next.filter(|nx| {
                    nx.paragraph == sentence.paragraph && corpus.ends_with_full_stop(i) && fits(tokens.len(), nx.len())
                })
                .map(|nx| (vec![i, i + 1], sentence.span.end, nx.span.end))
            }
        };
        let Some((covered, boundary, end)) = cut else {
            continue;
        };
        let scored_ok = covered.iter().all(|&s| passes_ppl(corpus.sentence_tokens(s)));
        if !scored_ok {
            continue;
        }
        trials.push(TrialSpec {
            context: corpus.tokens[start..boundary].to_vec(),
            shared: corpus.tokens[boundary..end].to_vec(),
            segmentation,
            randoms: Vec::new(),
            condition: ContextCondition::Replaced,
            source: SourceSpan {
                sentences: covered,
                start,
                boundary,
                end,
            },
            seed: None,
        });
    }
    trials
}

/// A random-context candidate: a token range inside one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub sentence: usize,
    pub tokens: Range<usize>,
}

/// Segments that end where a context of the given segmentation would end:
/// prefixes up to a `, and`, whole sentences, or the first `n` tokens.
pub fn candidate_contexts(corpus: &Corpus, segmentation: Segmentation, min_len: usize) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (i, s) in corpus.sentences.iter().enumerate() {
        let start = s.span.start;
        match segmentation {
            Segmentation::Conjunction => {
                for b in conjunction_boundaries(corpus, corpus.sentence_tokens(i)) {
                    if b >= min_len {
                        out.push(Candidate {
                            sentence: i,
                            tokens: start..start + b,
                        });
                    }
                }
            }
            Segmentation::FullStop => {
                if s.len() >= min_len {
                    out.push(Candidate {
                        sentence: i,
                        tokens: s.span.clone(),
                    });
                }
            }
            Segmentation::TokenIndex(n) => {
                if s.len() >= n && n >= min_len {
                    out.push(Candidate {
                        sentence: i,
                        tokens: start..start + n,
                    });
                }
            }
        }
    }
    out
}

/// Draws `n` random contexts without replacement from sentences outside the
/// trial.
pub fn sample_random_contexts(
    corpus: &Corpus,
    trial: &TrialSpec,
    n: usize,
    min_len: usize,
    seed: u64,
) -> Result<TrialSpec, CorpusError> {
    let pool: Vec<Candidate> = candidate_contexts(corpus, trial.segmentation, min_len)
        .into_iter()
        .filter(|c| !trial.source.sentences.contains(&c.sentence))
        .collect();
    if pool.len() < n {
        return Err(CorpusError::InsufficientCandidates {
            needed: n,
            available: pool.len(),
            min_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let randoms = sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|k| corpus.tokens[pool[k].tokens.clone()].to_vec())
        .collect();
    Ok(TrialSpec {
        randoms,
        condition: ContextCondition::Replaced,
        seed: Some(seed),
        ..trial.clone()
    })
}

/// Replaces the random contexts by permutations of the intact context,
/// keeping the number of random conditions (at least one).
pub fn shuffle_context(trial: &TrialSpec, seed: u64) -> TrialSpec {
    let count = trial.randoms.len().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let randoms = (0..count)
        .map(|_| {
            let mut c = trial.context.clone();
            c.shuffle(&mut rng);
            c
        })
        .collect();
    TrialSpec {
        randoms,
        condition: ContextCondition::Shuffled,
        seed: Some(seed),
        ..trial.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TextConfig;

    const TEXT: &str = "One two three four, and five six seven eight nine. \
        No conjunction here at all today. \
        Alpha beta, and gamma delta epsilon zeta, and eta.\n\n\
        Last paragraph sentence here, and more words follow.";

    fn word_corpus() -> Corpus {
        Corpus::from_text("t", TEXT, TextConfig::word(), 1000).unwrap()
    }

    fn loose(min_context: usize, min_shared: usize) -> TrialConstraints {
        TrialConstraints {
            min_shared,
            min_context,
            max_ppl: None,
        }
    }

    #[test]
    fn segmentation_parses() {
        for s in ["conjunction", "full_stop", "token_index:15"] {
            assert_eq!(s.parse::<Segmentation>().unwrap().to_string(), s);
        }
        assert!("token_index:0".parse::<Segmentation>().is_err());
        assert!("nope".parse::<Segmentation>().is_err());
    }

    #[test]
    fn conjunction_boundary_follows_marker() {
        let c = word_corpus();
        let trials = extract_trials(&c, Segmentation::Conjunction, &loose(1, 1), None);
        assert_eq!(trials.len(), 3);
        let t = &trials[0];
        assert_eq!(c.vocab.decode(&t.context), "One two three four , and");
        assert_eq!(c.vocab.decode(&t.shared), "five six seven eight nine .");
        // The first marker is too early for min_context = 5, the second one qualifies.
        let later = extract_trials(&c, Segmentation::Conjunction, &loose(5, 1), None);
        assert_eq!(
            c.vocab.decode(&later[1].context),
            "Alpha beta , and gamma delta epsilon zeta , and"
        );
    }

    #[test]
    fn sentence_without_conjunction_is_skipped() {
        let c = Corpus::from_text("t", "No conjunction here at all.", TextConfig::word(), 100).unwrap();
        assert!(extract_trials(&c, Segmentation::Conjunction, &loose(0, 0), None).is_empty());
    }

    #[test]
    fn char_level_conjunction() {
        let c = Corpus::from_text("t", TEXT, TextConfig::char_spaced(), 0).unwrap();
        let t = &extract_trials(&c, Segmentation::Conjunction, &loose(1, 1), None)[0];
        assert_eq!(c.vocab.decode(&t.context), "one two three four, and");
        assert_eq!(c.vocab.decode(&t.shared), " five six seven eight nine. ");

        let s = Corpus::from_text("t", "x y, andy z, and w.", TextConfig::char_spaced(), 0).unwrap();
        let b = conjunction_boundaries(&s, s.sentence_tokens(0));
        assert_eq!(b, vec!["x y, andy z, and".len()]);
        let s = Corpus::from_text("t", "x y, and w.", TextConfig::char_stripped(), 0).unwrap();
        let b = conjunction_boundaries(&s, s.sentence_tokens(0));
        assert_eq!(b, vec!["xy,and".len()]);
    }

    #[test]
    fn token_index_and_full_stop() {
        let c = word_corpus();
        let t = extract_trials(&c, Segmentation::TokenIndex(3), &loose(3, 5), None);
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|t| t.context.len() == 3));

        let f = extract_trials(&c, Segmentation::FullStop, &loose(1, 1), None);
        // The third sentence ends a paragraph, so only two pairs exist.
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].source.sentences, vec![0, 1]);
        assert_eq!(f[0].shared, c.sentence_tokens(1));
    }

    struct Fixed(f64);

    impl SentenceScorer for Fixed {
        fn perplexity(&self, _tokens: &[u32]) -> f64 {
            self.0
        }
    }

    #[test]
    fn perplexity_filter() {
        let c = word_corpus();
        let cons = TrialConstraints {
            max_ppl: Some(200.0),
            ..loose(1, 1)
        };
        assert_eq!(
            extract_trials(&c, Segmentation::Conjunction, &cons, Some(&Fixed(50.0))).len(),
            3
        );
        assert!(extract_trials(&c, Segmentation::Conjunction, &cons, Some(&Fixed(200.0))).is_empty());
    }

    #[test]
    fn random_contexts_exclude_own_sentence() {
        let c = word_corpus();
        let trials = extract_trials(&c, Segmentation::Conjunction, &loose(1, 1), None);
        let t = sample_random_contexts(&c, &trials[0], 3, 1, 7).unwrap();
        assert_eq!(t.randoms.len(), 3);
        assert_eq!(t.shared, trials[0].shared);
        assert!(t.randoms.iter().all(|r| r != &trials[0].context));
        let again = sample_random_contexts(&c, &trials[0], 3, 1, 7).unwrap();
        assert_eq!(t, again);
        assert!(sample_random_contexts(&c, &trials[0], 0, 1, 7)
            .unwrap()
            .randoms
            .is_empty());
        match sample_random_contexts(&c, &trials[0], 4, 1, 7) {
            Err(CorpusError::InsufficientCandidates {
                needed: 4,
                available: 3,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shuffle_preserves_multiset() {
        let c = word_corpus();
        let trial = &extract_trials(&c, Segmentation::Conjunction, &loose(1, 1), None)[0];
        let s = shuffle_context(trial, 3);
        assert_eq!(s.randoms.len(), 1);
        let mut a = s.randoms[0].clone();
        let mut b = trial.context.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(s, shuffle_context(trial, 3));
        assert_eq!(s.condition, ContextCondition::Shuffled);

        let single = TrialSpec {
            context: vec![5],
            ..trial.clone()
        };
        assert_eq!(shuffle_context(&single, 1).randoms, vec![vec![5]]);
    }

    #[test]
    fn trial_set_json_roundtrip() {
        let c = word_corpus();
        let trials = extract_trials(&c, Segmentation::TokenIndex(2), &loose(2, 2), None);
        let set = TrialSet {
            mode: Segmentation::TokenIndex(2),
            level: TokenLevel::Word,
            constraints: loose(2, 2),
            trials,
        };
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.contains("\"randoms\""));
        let back: TrialSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }
}
