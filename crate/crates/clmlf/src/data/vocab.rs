//! Whitespace-token vocabulary with fixed reserved ids.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const UNK_TOKEN: &str = "[UNK]";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    map: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            map: HashMap::new(),
        };
        for t in [PAD_TOKEN, CLS_TOKEN, SEP_TOKEN, UNK_TOKEN] {
            v.add(t);
        }
        v
    }

    /// Insert tokens from whitespace-split texts in first-seen order, so the
    /// same corpus always yields the same ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::new();
        for text in texts {
            for tok in text.split_whitespace() {
                v.add(tok);
            }
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.map.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.map.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.map.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let map = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, map }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::new();
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);
        assert_eq!(v.id(CLS_TOKEN), CLS_ID);
        assert_eq!(v.id(SEP_TOKEN), SEP_ID);
        assert_eq!(v.id(UNK_TOKEN), UNK_ID);
        assert_eq!(v.id("never-seen"), UNK_ID);
    }

    #[test]
    fn build_is_first_seen_order() {
        let v = Vocab::build(["b a", "a c"]);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("c"), 6);
        assert_eq!(v.len(), 7);
    }
}
