//! Raw-text handling: paragraph and sentence segmentation, normalization
//! and the word pre-tokenizer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenLevel {
    Word,
    Char,
}

impl std::fmt::Display for TokenLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenLevel::Word => "word",
            TokenLevel::Char => "char",
        })
    }
}

impl std::str::FromStr for TokenLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(TokenLevel::Word),
            "char" => Ok(TokenLevel::Char),
            other => Err(format!("unknown token level `{other}` (expected word|char)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub level: TokenLevel,
    pub lowercase: bool,
    /// Char mode only: drop all whitespace instead of collapsing it to one space.
    pub strip_whitespace: bool,
    /// Treat every non-empty line as one sentence.
    pub sentence_per_line: bool,
}

impl TextConfig {
    pub fn word() -> Self {
        Self {
            level: TokenLevel::Word,
            lowercase: false,
            strip_whitespace: false,
            sentence_per_line: false,
        }
    }

    /// Character model with lower-casing and whitespace removal.
    pub fn char_stripped() -> Self {
        Self {
            level: TokenLevel::Char,
            lowercase: true,
            strip_whitespace: true,
            sentence_per_line: false,
        }
    }

    /// Character model that keeps single spaces between words.
    pub fn char_spaced() -> Self {
        Self {
            strip_whitespace: false,
            ..Self::char_stripped()
        }
    }
}

const LEADING_PUNCT: &[char] = &['"', '\'', '`', '(', '['];
const TRAILING_PUNCT: &[char] = &[',', '.', ';', ':', '!', '?', '"', '\'', '`', ')', ']'];
const TERMINALS: &[char] = &['.', '!', '?'];
const CLOSERS: &[char] = &['"', '\'', '`', ')', ']'];

/// Splits whitespace-delimited text into word tokens with punctuation
/// detached. Apostrophes inside a word (`don't`) stay attached and `--`
/// becomes its own token.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut first = true;
        for piece in chunk.split("--") {
            if !first {
                out.push("--");
            }
            first = false;
            push_word_pieces(piece, &mut out);
        }
    }
    out
}

fn push_word_pieces<'a>(mut w: &'a str, out: &mut Vec<&'a str>) {
    while let Some(c) = w.chars().next() {
        if LEADING_PUNCT.contains(&c) {
            out.push(&w[..c.len_utf8()]);
            w = &w[c.len_utf8()..];
        } else {
            break;
        }
    }
    let mut trailing = Vec::new();
    while let Some(c) = w.chars().next_back() {
        if TRAILING_PUNCT.contains(&c) {
            let at = w.len() - c.len_utf8();
            trailing.push(&w[at..]);
            w = &w[..at];
        } else {
            break;
        }
    }
    if !w.is_empty() {
        out.push(w);
    }
    out.extend(trailing.into_iter().rev());
}

/// Lower-casing and whitespace handling shared by char-level tokenization.
pub fn normalize_chars(text: &str, cfg: &TextConfig) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space && !cfg.strip_whitespace {
            out.push(' ');
        }
        pending_space = false;
        if cfg.lowercase {
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

/// Applies the case setting to a word-level token.
pub fn normalize_word<'a>(w: &'a str, cfg: &TextConfig) -> std::borrow::Cow<'a, str> {
    if cfg.lowercase {
        std::borrow::Cow::Owned(w.to_lowercase())
    } else {
        std::borrow::Cow::Borrowed(w)
    }
}

/// Paragraphs (blank-line separated, or single lines) split into sentences.
pub fn segment(text: &str, sentence_per_line: bool) -> Vec<Vec<String>> {
    let mut paragraphs = Vec::new();
    if sentence_per_line {
        for line in text.lines() {
            let line = line.split_whitespace().collect::<Vec<_>>().join(" ");
            if !line.is_empty() {
                paragraphs.push(vec![line]);
            }
        }
        return paragraphs;
    }
    let mut current: Vec<&str> = Vec::new();
    let flush = |current: &mut Vec<&str>, paragraphs: &mut Vec<Vec<String>>| {
        if !current.is_empty() {
            let joined = current.join(" ");
            let sentences = split_sentences(&joined);
            if !sentences.is_empty() {
                paragraphs.push(sentences);
            }
            current.clear();
        }
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut paragraphs);
        } else {
            current.push(line);
        }
    }
    flush(&mut current, &mut paragraphs);
    paragraphs
}

/// Sentence boundaries fall after `.`, `!` or `?` plus any closing quotes or
/// brackets, when followed by whitespace or the end of the paragraph.
pub fn split_sentences(paragraph: &str) -> Vec<String> {
    let words: Vec<&str> = paragraph.split_whitespace().collect();
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for w in words {
        current.push(w);
        let core = w.trim_end_matches(CLOSERS);
        if core.ends_with(TERMINALS) {
            sentences.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        sentences.push(current.join(" "));
    }
    sentences
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretokenize_detaches_punctuation() {
        assert_eq!(pretokenize("the cat."), vec!["the", "cat", "."]);
        assert_eq!(
            pretokenize("`and what is the use of a book,' thought Alice"),
            vec!["`", "and", "what", "is", "the", "use", "of", "a", "book", ",", "'", "thought", "Alice"]
        );
        assert_eq!(
            pretokenize("don't--(really)!"),
            vec!["don't", "--", "(", "really", ")", "!"]
        );
        assert_eq!(pretokenize("a, and b"), vec!["a", ",", "and", "b"]);
    }

    #[test]
    fn char_normalization() {
        let stripped = TextConfig::char_stripped();
        assert_eq!(normalize_chars("Ab c", &stripped), "abc");
        let spaced = TextConfig::char_spaced();
        assert_eq!(normalize_chars("  Ab \n  c ", &spaced), "ab c");
    }

    #[test]
    fn sentences_and_paragraphs() {
        let text = "CHAPTER I\n\nAlice was tired.  `Oh dear!' said\nthe Rabbit. And so on\n\nNext one?";
        let p = segment(text, false);
        assert_eq!(p.len(), 3);
        assert_eq!(p[0], vec!["CHAPTER I"]);
        assert_eq!(
            p[1],
            vec!["Alice was tired.", "`Oh dear!'", "said the Rabbit.", "And so on"]
        );
        assert_eq!(p[2], vec!["Next one?"]);
        let lines = segment("one two.\n\nthree\n", true);
        assert_eq!(lines, vec![vec!["one two.".to_string()], vec!["three".to_string()]]);
    }
}
