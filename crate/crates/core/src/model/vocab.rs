use std::collections::{HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Role, Token, TokenSequence};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Index into a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Word list with reserved unknown and end-of-sequence entries.
///
/// Lookup is case-insensitive: entries are indexed by their lowercase form.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: TokenId,
    eos: TokenId,
}

impl Vocab {
    /// Builds a vocabulary from `words`, placing `<unk>` and `<eos>` at ids 0
    /// and 1 when they are not already present. Duplicates (case-insensitive)
    /// are dropped, keeping the first occurrence.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        let mut push = |w: &str, list: &mut Vec<String>| {
            let key = w.to_lowercase();
            if seen.insert(key) {
                list.push(w.to_string());
            }
        };
        push(UNK, &mut list);
        push(EOS, &mut list);
        for w in words {
            let w = w.as_ref().trim();
            if !w.is_empty() {
                push(w, &mut list);
            }
        }
        Self::from_words(list).expect("reserved tokens inserted above")
    }

    fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() > u32::MAX as usize {
            return Err(Error::Config("vocabulary too large".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        let mut dups = Vec::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.to_lowercase(), TokenId(i as u32)).is_some() {
                dups.push(w.clone());
            }
        }
        if !dups.is_empty() {
            return Err(Error::Format(format!("duplicate vocabulary entries: {dups:?}")));
        }
        let unk = *index
            .get(UNK)
            .ok_or_else(|| Error::Format(format!("vocabulary lacks {UNK}")))?;
        let eos = *index
            .get(EOS)
            .ok_or_else(|| Error::Format(format!("vocabulary lacks {EOS}")))?;
        Ok(Self {
            words,
            index,
            unk,
            eos,
        })
    }

    /// Parses the text format: one token per line, line number = id.
    pub fn from_lines(text: &str) -> Result<Self> {
        let words: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        if words.iter().any(|w| w.is_empty()) {
            return Err(Error::Format("empty line in vocabulary".into()));
        }
        Self::from_words(words)
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> TokenId {
        self.id(word).unwrap_or(self.unk)
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id.index()]
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    /// Token for a vocabulary id, with the canonical surface form.
    pub fn token(&self, id: TokenId) -> Token {
        let surface = if id == self.eos {
            String::new()
        } else {
            self.word(id).to_string()
        };
        Token {
            id,
            surface,
            offset: None,
        }
    }

    /// Splits on whitespace; every non-alphanumeric, non-whitespace character
    /// is a token of its own. Unknown words map to `<unk>`. All roles are
    /// [`Role::Prompt`]; offsets are byte ranges into `text`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let tokens: Vec<Token> = split_words(text)
            .into_iter()
            .map(|r| {
                let surface = &text[r.clone()];
                Token {
                    id: self.id_or_unk(surface),
                    surface: surface.to_string(),
                    offset: Some(r),
                }
            })
            .collect();
        let roles = vec![Role::Prompt; tokens.len()];
        TokenSequence::new(tokens, roles).expect("all-prompt roles are valid")
    }
}

/// Byte ranges of the reference tokenizer's pieces.
pub fn split_words(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push(s..i);
        }
        if !ch.is_whitespace() {
            out.push(i..i + ch.len_utf8());
        }
    }
    if let Some(s) = word_start {
        out.push(s..text.len());
    }
    out
}

fn is_punct(s: &str) -> bool {
    let mut chars = s.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if !c.is_alphanumeric())
}

/// Joins token surfaces into text. Punctuation attaches to the preceding
/// token; a word directly after `-`, `/` or an opening bracket attaches too.
/// Only whitespace differs from the tokenized input.
pub fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for tok in tokens {
        let s = tok.surface.as_str();
        if s.is_empty() {
            continue;
        }
        let glue = match prev {
            None => true,
            Some(p) => is_punct(s) || matches!(p, "-" | "/" | "(" | "["),
        };
        if !glue {
            out.push(' ');
        }
        out.push_str(s);
        prev = Some(s);
    }
    out
}
