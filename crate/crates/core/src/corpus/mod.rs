//! Text ingestion, tokenization and construction of intact/random context
//! trials.

mod text;
mod trials;
mod vocab;

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use text::{normalize_chars, pretokenize, segment, split_sentences, TextConfig, TokenLevel};
pub use trials::{
    candidate_contexts, conjunction_boundaries, extract_trials, sample_random_contexts, shuffle_context, Candidate,
    ContextCondition, Segmentation, SentenceScorer, SourceSpan, TrialConstraints, TrialSet, TrialSpec,
};
pub use vocab::{Vocabulary, EOS, UNK};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("text is empty")]
    EmptyText,
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("word vocabulary has no <unk> entry")]
    MissingUnk,
    #[error("vocabulary level {vocab} does not match requested level {requested}")]
    LevelMismatch { vocab: TokenLevel, requested: TokenLevel },
    #[error("need {needed} random contexts of length >= {min_len}, only {available} candidates outside the trial")]
    InsufficientCandidates {
        needed: usize,
        available: usize,
        min_len: usize,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    /// Token range inside [`Corpus::tokens`].
    pub span: Range<usize>,
    pub paragraph: usize,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.span.len()
    }

    pub fn is_empty(&self) -> bool {
        self.span.is_empty()
    }
}

/// Tokenized text with sentence boundaries.
///
/// Word mode places `<eos>` between paragraphs (outside every sentence).
/// Char mode keeps the single separating space at the end of each sentence
/// unless whitespace is stripped.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub raw: String,
    pub vocab: Vocabulary,
    pub tokens: Vec<u32>,
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    /// Builds the vocabulary from `raw` itself.
    pub fn from_text(
        name: impl Into<String>,
        raw: impl Into<String>,
        cfg: TextConfig,
        max_vocab: usize,
    ) -> Result<Self, CorpusError> {
        let raw = raw.into();
        let vocab = Vocabulary::build(&raw, cfg, max_vocab)?;
        Self::with_vocab(name, raw, vocab)
    }

    pub fn with_vocab(name: impl Into<String>, raw: impl Into<String>, vocab: Vocabulary) -> Result<Self, CorpusError> {
        let raw = raw.into();
        let cfg = vocab.text_config;
        let paragraphs = segment(&raw, cfg.sentence_per_line);
        if paragraphs.is_empty() {
            return Err(CorpusError::EmptyText);
        }
        let mut tokens = Vec::new();
        let mut sentences = Vec::new();
        let n_paragraphs = paragraphs.len();
        for (p, paragraph) in paragraphs.iter().enumerate() {
            let n_sent = paragraph.len();
            for (s, sentence) in paragraph.iter().enumerate() {
                let start = tokens.len();
                let ids = vocab.encode(sentence)?;
                if ids.is_empty() {
                    continue;
                }
                tokens.extend(ids);
                let last_overall = p + 1 == n_paragraphs && s + 1 == n_sent;
                if cfg.level == TokenLevel::Char && !cfg.strip_whitespace && !last_overall {
                    let space = vocab.id(" ").ok_or(CorpusError::UnknownChar(' '))?;
                    tokens.push(space);
                }
                sentences.push(Sentence {
                    span: start..tokens.len(),
                    paragraph: p,
                });
            }
            if cfg.level == TokenLevel::Word {
                tokens.push(vocab.eos_id().ok_or(CorpusError::MissingUnk)?);
            }
        }
        Ok(Self {
            name: name.into(),
            raw,
            vocab,
            tokens,
            sentences,
        })
    }

    pub fn from_file(path: &Path, cfg: TextConfig, max_vocab: usize) -> Result<Self, CorpusError> {
        let raw = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_text(name, raw, cfg, max_vocab)
    }

    pub fn level(&self) -> TokenLevel {
        self.vocab.level()
    }

    pub fn sentence_tokens(&self, i: usize) -> &[u32] {
        &self.tokens[self.sentences[i].span.clone()]
    }

    /// Splits the token stream at a sentence boundary so that roughly
    /// `valid_fraction` of the tokens end up in the second range.
    pub fn train_valid_split(&self, valid_fraction: f64) -> (Range<usize>, Range<usize>) {
        let n = self.tokens.len();
        let target = ((1.0 - valid_fraction.clamp(0.0, 1.0)) * n as f64) as usize;
        let cut = self
            .sentences
            .iter()
            .map(|s| s.span.start)
            .find(|&start| start >= target)
            .unwrap_or(n);
        (0..cut, cut..n)
    }

    /// Whether sentence `i` ends in a full stop (ignoring a trailing space).
    pub fn ends_with_full_stop(&self, i: usize) -> bool {
        let Some(period) = self.vocab.period_id() else {
            return false;
        };
        let space = self.vocab.id(" ");
        self.sentence_tokens(i)
            .iter()
            .rev()
            .find(|&&t| Some(t) != space)
            .is_some_and(|&t| t == period)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "Alice sat. She was tired, and bored.\n\nThe Rabbit ran!";

    #[test]
    fn word_corpus_layout() {
        let c = Corpus::from_text("t", TEXT, TextConfig::word(), 100).unwrap();
        assert_eq!(c.sentences.len(), 3);
        assert_eq!(c.vocab.decode(c.sentence_tokens(0)), "Alice sat .");
        assert_eq!(c.vocab.decode(c.sentence_tokens(1)), "She was tired , and bored .");
        assert_eq!(c.sentences[2].paragraph, 1);
        let eos = c.vocab.eos_id().unwrap();
        assert_eq!(c.tokens.iter().filter(|&&t| t == eos).count(), 2);
        assert_eq!(c.tokens[c.sentences[1].span.end], eos);
        assert!(c.ends_with_full_stop(0));
        assert!(!c.ends_with_full_stop(2));
        for w in c.sentences.windows(2) {
            assert!(w[0].span.end <= w[1].span.start);
        }
        assert!(c.tokens.iter().all(|&t| (t as usize) < c.vocab.len()));
    }

    #[test]
    fn char_corpus_keeps_separator_space() {
        let c = Corpus::from_text("t", TEXT, TextConfig::char_spaced(), 0).unwrap();
        assert_eq!(c.vocab.decode(c.sentence_tokens(0)), "alice sat. ");
        assert_eq!(c.vocab.decode(c.sentence_tokens(2)), "the rabbit ran!");
        assert_eq!(
            c.vocab.decode(&c.tokens),
            normalize_chars(TEXT, &TextConfig::char_spaced())
        );
        assert!(c.ends_with_full_stop(0));

        let s = Corpus::from_text("t", TEXT, TextConfig::char_stripped(), 0).unwrap();
        assert_eq!(s.vocab.decode(s.sentence_tokens(1)), "shewastired,andbored.");
    }

    #[test]
    fn split_is_at_sentence_boundary() {
        let c = Corpus::from_text("t", TEXT, TextConfig::word(), 100).unwrap();
        let (train, valid) = c.train_valid_split(0.5);
        assert_eq!(train.end, valid.start);
        assert!(c.sentences.iter().any(|s| s.span.start == valid.start));
    }
}
