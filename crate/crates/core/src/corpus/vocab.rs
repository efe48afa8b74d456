use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::text::{normalize_chars, normalize_word, pretokenize, TextConfig, TokenLevel};
use super::CorpusError;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Bijective token <-> id map with dense ids in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    pub text_config: TextConfig,
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
    unk_id: Option<u32>,
    eos_id: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    text_config: TextConfig,
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Vocabulary::from_parts(r.text_config, r.tokens, r.counts)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            text_config: v.text_config,
            tokens: v.tokens,
            counts: v.counts,
        }
    }
}

impl Vocabulary {
    fn from_parts(text_config: TextConfig, tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let (unk_id, eos_id) = match text_config.level {
            TokenLevel::Word => (index.get(UNK).copied(), index.get(EOS).copied()),
            TokenLevel::Char => (None, None),
        };
        Self {
            text_config,
            tokens,
            counts,
            index,
            unk_id,
            eos_id,
        }
    }

    /// Word mode keeps the `max_size` most frequent tokens (ties broken
    /// lexicographically) and appends `<unk>` and `<eos>`; char mode keeps
    /// every distinct normalized character.
    pub fn build(text: &str, cfg: TextConfig, max_size: usize) -> Result<Self, CorpusError> {
        let mut freq: HashMap<String, u64> = HashMap::new();
        match cfg.level {
            TokenLevel::Word => {
                for t in pretokenize(text) {
                    *freq.entry(normalize_word(t, &cfg).into_owned()).or_default() += 1;
                }
            }
            TokenLevel::Char => {
                for c in normalize_chars(text, &cfg).chars() {
                    *freq.entry(c.to_string()).or_default() += 1;
                }
            }
        }
        if freq.is_empty() {
            return Err(CorpusError::EmptyText);
        }
        let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if cfg.level == TokenLevel::Word {
            ranked.retain(|(t, _)| t != UNK && t != EOS);
            ranked.truncate(max_size);
            ranked.push((UNK.to_string(), 0));
            ranked.push((EOS.to_string(), 0));
        }
        let (tokens, counts) = ranked.into_iter().unzip();
        Ok(Self::from_parts(cfg, tokens, counts))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn level(&self) -> TokenLevel {
        self.text_config.level
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk_id
    }

    pub fn eos_id(&self) -> Option<u32> {
        self.eos_id
    }

    /// Id of the sentence-final full stop, if present.
    pub fn period_id(&self) -> Option<u32> {
        self.id(".")
    }

    /// Maps text to ids. Word mode sends out-of-vocabulary tokens to `<unk>`;
    /// char mode fails on characters the vocabulary does not cover.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, CorpusError> {
        match self.level() {
            TokenLevel::Word => {
                let unk = self.unk_id.ok_or(CorpusError::MissingUnk)?;
                Ok(pretokenize(text)
                    .into_iter()
                    .map(|t| self.id(&normalize_word(t, &self.text_config)).unwrap_or(unk))
                    .collect())
            }
            TokenLevel::Char => normalize_chars(text, &self.text_config)
                .chars()
                .map(|c| {
                    let mut buf = [0u8; 4];
                    self.id(c.encode_utf8(&mut buf)).ok_or(CorpusError::UnknownChar(c))
                })
                .collect(),
        }
    }

    /// Inverse of [`Vocabulary::encode`] up to normalization: words are
    /// joined by single spaces, characters are concatenated.
    pub fn decode(&self, ids: &[u32]) -> String {
        let sep = match self.level() {
            TokenLevel::Word => " ",
            TokenLevel::Char => "",
        };
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(sep)
    }
}
