use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSettings {
    /// Tokens seen fewer times than this map to `[UNK]`.
    pub min_freq: usize,
}

impl Default for VocabSettings {
    fn default() -> Self {
        VocabSettings { min_freq: 1 }
    }
}

/// Token/id map with the five reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(Error::Parse(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let content = tokens[SPECIAL_TOKENS.len()..].to_vec();
        Vocabulary::from_tokens(content)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `content` in the given order.
    pub fn from_tokens(content: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content ids of `text`, without `[CLS]`/`[SEP]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// `[CLS] tokens [SEP]`, truncating content to fit `max_len`.
    pub fn encode_example(&self, text: &str, max_len: usize) -> Vec<u32> {
        wrap(self.encode(text), max_len)
    }

    /// Tokens of `ids` with padding and `[CLS]`/`[SEP]` removed.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD_ID | CLS_ID | SEP_ID))
            .map(|&i| self.token(i).unwrap_or("[UNK]").to_string())
            .collect()
    }
}

pub(crate) fn wrap(mut content: Vec<u32>, max_len: usize) -> Vec<u32> {
    content.truncate(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(content.len() + 2);
    ids.push(CLS_ID);
    ids.extend(content);
    ids.push(SEP_ID);
    ids
}

/// Builds a vocabulary from `lines` and encodes each line's content tokens.
///
/// Ids after the reserved block are assigned by descending frequency, ties
/// broken by the token string.
pub fn tokenize_corpus<S: AsRef<str>>(
    lines: &[S],
    settings: &VocabSettings,
) -> Result<(Vocabulary, Vec<Vec<u32>>)> {
    if lines.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let tokenized: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l.as_ref())).collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokenized.iter().flatten() {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= settings.min_freq.max(1) && !SPECIAL_TOKENS.contains(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let vocab = Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect())?;
    let encoded = tokenized
        .iter()
        .map(|toks| toks.iter().map(|t| vocab.id(t)).collect())
        .collect();
    Ok((vocab, encoded))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_folding() {
        let (v, enc) = tokenize_corpus(&["The cat", "the CAT"], &VocabSettings::default()).unwrap();
        assert_eq!(enc[0], enc[1]);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn cutoff_maps_rare_tokens_to_unk() {
        let (v, enc) =
            tokenize_corpus(&["a a b", "a c c"], &VocabSettings { min_freq: 2 }).unwrap();
        assert_eq!(v.id("b"), UNK_ID);
        assert_eq!(enc[0][2], UNK_ID);
        // "a" (3) before "c" (2)
        assert_eq!(v.id("a"), NUM_SPECIAL);
        assert_eq!(v.id("c"), NUM_SPECIAL + 1);
    }

    #[test]
    fn ties_break_alphabetically_and_are_deterministic() {
        let lines = ["zeta alpha beta", "beta zeta alpha"];
        let (a, _) = tokenize_corpus(&lines, &VocabSettings::default()).unwrap();
        let (b, _) = tokenize_corpus(&lines, &VocabSettings::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a.tokens()[5..], &["alpha", "beta", "zeta"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(tokenize_corpus(&empty, &VocabSettings::default()).is_err());
        assert!(tokenize_corpus(&["   "], &VocabSettings::default()).is_err());
    }

    #[test]
    fn example_encoding_round_trips() {
        let (v, _) = tokenize_corpus(
            &["Hello big world", "hello"],
            &VocabSettings { min_freq: 2 },
        )
        .unwrap();
        let ids = v.encode_example("hello Big world", 16);
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(*ids.last().unwrap(), SEP_ID);
        assert_eq!(v.decode(&ids), vec!["hello", "[UNK]", "[UNK]"]);
        assert_eq!(v.encode_example("a b c d e", 4).len(), 4);
    }

    #[test]
    fn serde_round_trip() {
        let (v, _) = tokenize_corpus(&["x y z"], &VocabSettings::default()).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
        assert!(serde_json::from_str::<Vocabulary>("[\"x\"]").is_err());
    }
}
