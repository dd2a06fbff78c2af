//! Word-level tokenizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Splits on whitespace and makes every ASCII punctuation character its
/// own word.
pub fn segment(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, ch) in chunk.char_indices() {
            if ch.is_ascii_punctuation() && ch != '-' && ch != '\'' {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + ch.len_utf8()]);
                start = i + ch.len_utf8();
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Vocabulary of the four specials followed by `words` in first-seen order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut t = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in SPECIALS.iter().copied().chain(words) {
            if !t.index.contains_key(w) {
                t.index.insert(w.to_string(), t.words.len());
                t.words.push(w.to_string());
            }
        }
        t
    }

    /// Builds the vocabulary from the segmented words of `texts`.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = Vec::new();
        for text in texts {
            words.extend(segment(text));
        }
        Self::from_words(words)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        segment(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.words
    }
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = String;

    fn try_from(words: Vec<String>) -> Result<Self, String> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err("vocabulary must start with <pad> <bos> <eos> <unk>".into());
        }
        let t = Self::from_words(words[SPECIALS.len()..].iter().map(String::as_str));
        if t.words.len() != words.len() {
            return Err("vocabulary contains duplicate words".into());
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_has_no_tokens() {
        let t = Tokenizer::fit(["alpha beta"]);
        assert!(t.encode("").is_empty());
    }

    #[test]
    fn repeated_word_maps_to_same_id() {
        let t = Tokenizer::fit(["alpha beta"]);
        let ids = t.encode("alpha alpha");
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
        assert_eq!(ids[0], t.id("alpha").unwrap());
    }

    #[test]
    fn punctuation_is_split() {
        assert_eq!(segment("what is it?  yes, so."), ["what", "is", "it", "?", "yes", ",", "so", "."]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let t = Tokenizer::fit(["alpha"]);
        assert_eq!(t.encode("alpha gamma"), vec![t.id("alpha").unwrap(), UNK]);
    }

    #[test]
    fn serde_round_trip() {
        let t = Tokenizer::fit(["b a c a"]);
        let json = serde_json::to_string(&t).unwrap();
        let back: Tokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
    }
}
