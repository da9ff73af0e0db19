//! Word-level tokenizer over a closed vocabulary.
//!
//! One token per word, one token per digit — numbers are always spelled
//! digit by digit, so two-digit values occupy two adjacent positions. The
//! verdict vocabulary is collapsed to two canonical ids: `valid` and
//! `invalid`. Their synonyms (`correct`/`right`, `incorrect`/`wrong`) are
//! aliases of the same ids, which keeps the answer-token sets of the
//! classification metric exact singletons.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Names paired with the pronoun used to refer to them in templates.
pub const NAMES: &[(&str, &str)] = &[
    ("jane", "she"),
    ("mark", "he"),
    ("lisa", "she"),
    ("tom", "he"),
    ("anna", "she"),
    ("peter", "he"),
    ("sara", "she"),
    ("john", "he"),
    ("emma", "she"),
    ("alex", "he"),
    ("ruby", "she"),
    ("max", "he"),
];

pub const OBJECTS: &[&str] = &[
    "apples", "pears", "books", "pens", "keys", "coins", "toys", "cards", "hats", "cups", "bags",
    "rings",
];

pub const ADD_VERBS: &[&str] = &["buys", "wins", "finds", "gets", "earns", "gains"];
pub const SUB_VERBS: &[&str] = &["loses", "sells", "drops", "donates"];

/// Instruction phrasings. All variants have the same token count, and the
/// verdict words inside them collapse to the same ids under aliasing.
pub const INSTRUCTIONS: &[&str] = &[
    "check if this is valid or invalid",
    "decide if this is valid or invalid",
    "judge if this is correct or incorrect",
    "verify if this is right or wrong",
];

const PUNCT: &[&str] = &[".", ",", "?", ":", "=", "+", "-", "*", "/"];

const ALIASES: &[(&str, &str)] = &[
    ("correct", "valid"),
    ("right", "valid"),
    ("incorrect", "invalid"),
    ("wrong", "invalid"),
];

#[derive(Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// The shared vocabulary used by every template and model in this crate.
    pub fn shared() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    fn build() -> Vocab {
        let mut v = Vocab { words: Vec::new(), index: HashMap::new() };
        for p in PUNCT {
            v.insert(p);
        }
        for d in 0..10u32 {
            v.insert(&d.to_string());
        }
        v.insert("valid");
        v.insert("invalid");
        for (name, _) in NAMES {
            v.insert(name);
        }
        v.insert("she");
        v.insert("he");
        for o in OBJECTS {
            v.insert(o);
        }
        for w in ADD_VERBS.iter().chain(SUB_VERBS) {
            v.insert(w);
        }
        for text in INSTRUCTIONS.iter().copied().chain(crate::dataset::template_texts()) {
            for word in text.split_whitespace() {
                if !word.starts_with('[') {
                    v.insert(word);
                }
            }
        }
        v
    }

    fn insert(&mut self, word: &str) {
        let canonical = canonical_word(word);
        if !self.index.contains_key(canonical) {
            self.index.insert(canonical.to_string(), self.words.len());
            self.words.push(canonical.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(canonical_word(word))
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, vocab: self.words.len() })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.word(id)).collect();
        Ok(words?.join(" "))
    }

    pub fn digit_id(&self, d: u32) -> TokenId {
        debug_assert!(d < 10);
        self.index[&d.to_string()]
    }

    /// The two digit tokens of a two-digit value, tens digit first.
    pub fn two_digit(&self, value: u32) -> Result<[TokenId; 2]> {
        if !(10..=99).contains(&value) {
            return Err(Error::Dataset(format!("{value} is not a two-digit value")));
        }
        Ok([self.digit_id(value / 10), self.digit_id(value % 10)])
    }

    pub fn valid_id(&self) -> TokenId {
        self.index["valid"]
    }

    pub fn invalid_id(&self) -> TokenId {
        self.index["invalid"]
    }
}

fn canonical_word(word: &str) -> &str {
    for (alias, target) in ALIASES {
        if word == *alias {
            return target;
        }
    }
    word
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synonyms_collapse_to_canonical_ids() {
        let v = Vocab::shared();
        assert_eq!(v.id("correct").unwrap(), v.valid_id());
        assert_eq!(v.id("right").unwrap(), v.valid_id());
        assert_eq!(v.id("wrong").unwrap(), v.invalid_id());
        assert_eq!(v.id("incorrect").unwrap(), v.invalid_id());
        assert_ne!(v.valid_id(), v.invalid_id());
    }

    #[test]
    fn digits_are_single_tokens() {
        let v = Vocab::shared();
        let [a, b] = v.two_digit(16).unwrap();
        assert_eq!(v.word(a).unwrap(), "1");
        assert_eq!(v.word(b).unwrap(), "6");
        assert!(v.two_digit(7).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::shared();
        let ids = v.encode("jane has 5 apples .").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "jane has 5 apples .");
        assert!(v.encode("zebra").is_err());
    }

    #[test]
    fn instructions_share_token_length() {
        let v = Vocab::shared();
        let lens: Vec<usize> =
            INSTRUCTIONS.iter().map(|i| v.encode(i).unwrap().len()).collect();
        assert!(lens.iter().all(|&l| l == lens[0]));
    }
}
