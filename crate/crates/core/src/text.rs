//! Vocabularies and the two tokenizers used by the tiny backends.
//!
//! [`WordTokenizer`] feeds the encoders: lowercased word and punctuation
//! tokens carrying character offsets into the source text.
//! [`PieceTokenizer`] feeds the generator: GPT-2 style pieces that keep their
//! leading space, so decoding is plain concatenation and round-trips any
//! in-vocabulary text exactly.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use sha2::{Digest, Sha256};

/// Separator token used between every sequence segment.
pub const SEP: &str = "<s>";
pub const UNK: &str = "<unk>";
/// End-of-text marker for the generator; recognised literally in text.
pub const EOT: &str = "<|endoftext|>";

static WORD_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\w+|[^\w\s]").unwrap());
static PIECE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"<\|endoftext\|>|\n| ?\w+| ?[^\w\s]| +|[^\S\n]").unwrap()
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary: `specials` first in the given order, then every
    /// other token sorted, so construction is independent of input order.
    pub fn new<I, S>(specials: &[&str], tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let rest: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        let mut all: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        for t in rest {
            if !specials.contains(&t.as_str()) {
                all.push(t);
            }
        }
        Self::from_tokens(all)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// One token with its id and, for text tokens, the byte span it covers in
/// the text it was cut from. Special tokens have no span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub id: usize,
    pub span: Option<(usize, usize)>,
}

impl Token {
    pub fn is_special(&self) -> bool {
        self.span.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn push(&mut self, token: Token) {
        self.tokens.push(token);
    }

    pub fn extend(&mut self, tokens: impl IntoIterator<Item = Token>) {
        self.tokens.extend(tokens);
    }

    /// Splits on separator tokens, dropping the separators themselves.
    /// The leading and trailing separators produce no empty segments.
    pub fn segments(&self, sep_id: usize) -> Vec<Vec<Token>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        let mut seen_sep = false;
        for t in &self.tokens {
            if t.is_special() && t.id == sep_id {
                if seen_sep {
                    out.push(std::mem::take(&mut current));
                }
                seen_sep = true;
            } else {
                current.push(t.clone());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(&t.text)?;
        }
        Ok(())
    }
}

/// Lowercasing word/punctuation tokenizer with character offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTokenizer {
    vocab: Vocab,
}

impl WordTokenizer {
    pub const SPECIALS: [&'static str; 2] = [UNK, SEP];

    pub fn new(vocab: Vocab) -> Self {
        WordTokenizer { vocab }
    }

    /// Vocabulary over every word in `texts` plus the label words.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: BTreeSet<String> = crate::label::Label::ALL
            .iter()
            .map(|l| l.as_str().to_string())
            .collect();
        for text in texts {
            for m in WORD_RE.find_iter(text) {
                words.insert(m.as_str().to_lowercase());
            }
        }
        Self::new(Vocab::new(&Self::SPECIALS, words))
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn sep_id(&self) -> usize {
        self.vocab.id(SEP).expect("separator in vocab")
    }

    pub fn sep(&self) -> Token {
        Token {
            text: SEP.to_string(),
            id: self.sep_id(),
            span: None,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let unk = self.vocab.id(UNK).expect("unk in vocab");
        WORD_RE
            .find_iter(text)
            .map(|m| Token {
                text: m.as_str().to_string(),
                id: self.vocab.id(&m.as_str().to_lowercase()).unwrap_or(unk),
                span: Some((m.start(), m.end())),
            })
            .collect()
    }
}

/// Space-preserving piece tokenizer for the generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PieceTokenizer {
    vocab: Vocab,
}

impl PieceTokenizer {
    pub const SPECIALS: [&'static str; 2] = [UNK, EOT];

    pub fn new(vocab: Vocab) -> Self {
        PieceTokenizer { vocab }
    }

    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut pieces = BTreeSet::new();
        pieces.insert("\n".to_string());
        for text in texts {
            for m in PIECE_RE.find_iter(text) {
                pieces.insert(m.as_str().to_string());
            }
        }
        Self::new(Vocab::new(&Self::SPECIALS, pieces))
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn eot_id(&self) -> usize {
        self.vocab.id(EOT).expect("eot in vocab")
    }

    pub fn newline_id(&self) -> Option<usize> {
        self.vocab.id("\n")
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let unk = self.vocab.id(UNK).expect("unk in vocab");
        PIECE_RE
            .find_iter(text)
            .map(|m| self.vocab.id(m.as_str()).unwrap_or(unk))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab.token(i)).collect()
    }

    /// Pieces of `text` not covered by the vocabulary.
    pub fn unknown_pieces(&self, text: &str) -> Vec<String> {
        PIECE_RE
            .find_iter(text)
            .filter(|m| self.vocab.id(m.as_str()).is_none())
            .map(|m| m.as_str().to_string())
            .collect()
    }
}

/// Byte spans of whitespace-delimited words.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
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

/// Byte range of the alphanumeric core of a word: from its first to its last
/// alphanumeric character. Words without any alphanumeric character are
/// their own core.
pub fn word_core(word: &str) -> (usize, usize) {
    let first = word.char_indices().find(|(_, c)| c.is_alphanumeric());
    let last = word.char_indices().rev().find(|(_, c)| c.is_alphanumeric());
    match (first, last) {
        (Some((s, _)), Some((e, c))) => (s, e + c.len_utf8()),
        _ => (0, word.len()),
    }
}
