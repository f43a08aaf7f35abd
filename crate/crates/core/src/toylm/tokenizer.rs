use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;

/// Lowercasing whitespace tokenizer with a closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokenizer: String,
    vocab: std::collections::BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Vocabulary of the special tokens followed by every distinct word of
    /// `texts` in order of first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut t = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in [PAD, UNK, SEP] {
            t.push(s.to_string());
        }
        for text in texts {
            for w in split(text) {
                if !t.index.contains_key(&w) {
                    t.push(w);
                }
            }
        }
        t
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Titles joined oldest first with a separator; only the most recent
    /// `max_tokens` tokens are kept.
    pub fn encode_titles(&self, titles: &[&str], max_tokens: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for (i, t) in titles.iter().enumerate() {
            if i > 0 {
                ids.push(SEP_ID);
            }
            ids.extend(self.encode(t));
        }
        if ids.iter().all(|&i| i == SEP_ID) {
            return Err(CocoError::Model("titles produced no tokens".into()));
        }
        let start = ids.len().saturating_sub(max_tokens);
        Ok(ids[start..].to_vec())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokenizer: "whitespace-lowercase".into(),
            vocab: self.index.iter().map(|(k, &v)| (k.clone(), v)).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        let n = file.vocab.len();
        let mut tokens = vec![None; n];
        for (tok, id) in &file.vocab {
            match tokens.get_mut(*id) {
                Some(slot @ None) => *slot = Some(tok.clone()),
                _ => return Err(CocoError::Model(format!("vocabulary id {id} is duplicated or out of range"))),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("ids are a permutation")).collect();
        if tokens.len() < 3 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK || tokens[SEP_ID] != SEP {
            return Err(CocoError::Model("vocabulary lacks the special tokens".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }
}

fn split(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_unknowns_map_to_unk() {
        let t = Tokenizer::build(["CAT1 item 3", "cat1 Item 4"]);
        assert_eq!(t.vocab_size(), 3 + 4);
        assert_eq!(t.encode("cat1 ITEM zebra"), vec![3, 4, UNK_ID]);
    }

    #[test]
    fn titles_keep_most_recent_tokens() {
        let t = Tokenizer::build(["a b", "c"]);
        let ids = t.encode_titles(&["a b", "c"], 10).unwrap();
        assert_eq!(ids, vec![3, 4, SEP_ID, 5]);
        assert_eq!(t.encode_titles(&["a b", "c"], 2).unwrap(), vec![SEP_ID, 5]);
        assert!(t.encode_titles(&["  "], 10).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = Tokenizer::build(["x y z"]);
        assert_eq!(Tokenizer::from_json(&t.to_json().unwrap()).unwrap(), t);
    }
}
