use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const IMG: u32 = 3;
pub const DESC: u32 = 4;
pub const RAT: u32 = 5;
pub const ANS: u32 = 6;

pub const RESERVED: [&str; 7] = ["<bos>", "<eos>", "<sep>", "<img>", "<desc>", "<rat>", "<ans>"];

const NO_SPACE_BEFORE: &[char] = &[')', ',', '.', '?', ':', ';', '!'];
const NO_SPACE_AFTER: &[char] = &['('];

/// Closed-world word-level vocabulary: reserved control tokens, digits
/// 0-9, then corpus words in first-appearance order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.id_to_token == other.id_to_token
    }
}

impl Vocab {
    pub fn build(corpus: &[String]) -> Result<Self, ModelError> {
        if corpus.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for d in 0..10u32 {
            id_to_token.push(d.to_string());
        }
        let mut seen: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for text in corpus {
            for word in split_words(text) {
                if !seen.contains_key(&word) {
                    seen.insert(word.clone(), id_to_token.len() as u32);
                    id_to_token.push(word);
                }
            }
        }
        Ok(Self::from_tokens(id_to_token))
    }

    /// Rebuilds the lookup table from a stored token list (checkpoint load).
    pub fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { id_to_token, token_to_id }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.token_to_id.get(word).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(ModelError::UnknownWord(w)))
            .collect()
    }

    /// Inverse of [`Vocab::tokenize`] up to whitespace normalization:
    /// tokens are joined with single spaces, except around punctuation.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_no_space_after = false;
        for &id in ids {
            let tok = self.token(id);
            let first_char = tok.chars().next().unwrap_or(' ');
            if !out.is_empty()
                && !prev_no_space_after
                && !(tok.len() == 1 && NO_SPACE_BEFORE.contains(&first_char))
            {
                out.push(' ');
            }
            out.push_str(tok);
            prev_no_space_after = tok.len() == 1 && NO_SPACE_AFTER.contains(&first_char);
        }
        out
    }
}

/// Whitespace split with punctuation peeled off into standalone tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if NO_SPACE_BEFORE.contains(&ch) || NO_SPACE_AFTER.contains(&ch) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Collapses whitespace runs; the equivalence relation under which
/// tokenize/detokenize round-trip.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_vocab() -> Vocab {
        Vocab::build(&[
            "red circle".to_string(),
            "Cell ( 2 , 3 ) contains a red circle with value 4 .".to_string(),
            "sum of values".to_string(),
        ])
        .unwrap()
    }

    #[test]
    fn reserved_then_digits_then_words() {
        let v = demo_vocab();
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.token(ANS), "<ans>");
        assert_eq!(v.id("7"), Some(7 + 7));
        assert_eq!(v.id("red"), Some(17));
        assert_eq!(v.id("circle"), Some(18));
    }

    #[test]
    fn identical_corpus_identical_ids() {
        let a = demo_vocab();
        let b = demo_vocab();
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn tokenize_round_trip() {
        let v = demo_vocab();
        let s = "Cell (2, 3) contains a red circle with value 4.";
        let ids = v.tokenize(s).unwrap();
        assert_eq!(v.detokenize(&ids), normalize_ws(s));
    }

    #[test]
    fn short_phrase_round_trip() {
        let v = demo_vocab();
        let ids = v.tokenize("sum of values").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(v.detokenize(&ids), "sum of values");
    }

    #[test]
    fn empty_text_tokenizes_empty() {
        let v = demo_vocab();
        assert!(v.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn unknown_word_is_named() {
        let v = demo_vocab();
        match v.tokenize("qux") {
            Err(ModelError::UnknownWord(w)) => assert_eq!(w, "qux"),
            other => panic!("expected unknown-word error, got {:?}", other),
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocab::build(&[]), Err(ModelError::EmptyCorpus)));
    }
}
