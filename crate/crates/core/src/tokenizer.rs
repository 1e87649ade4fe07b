//! Word-level vocabulary and token-id sequences.
//!
//! Text is lowercased and split on whitespace; every non-alphanumeric
//! character becomes a token of its own. The same normalization is used by
//! the metrics so model output and references are compared on equal terms.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_CAPTION_LEN: usize = 40;
pub const DEFAULT_KNOWLEDGE_LEN: usize = 30;
pub const DEFAULT_QUESTION_LEN: usize = 30;

/// Lowercase and split into word and punctuation tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus lines. Tokens seen at least `min_freq`
    /// times are kept, ordered by descending frequency then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in normalize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(kept.into_iter().map(|(t, _)| t)),
        )
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut token_to_id = HashMap::new();
        let mut id_to_token = Vec::new();
        for tok in tokens {
            if token_to_id.contains_key(&tok) {
                return Err(Error::format("vocabulary", format!("duplicate token `{tok}`")));
            }
            token_to_id.insert(tok.clone(), id_to_token.len() as u32);
            id_to_token.push(tok);
        }
        for (id, special) in SPECIALS.iter().enumerate() {
            if id_to_token.get(id).map(String::as_str) != Some(*special) {
                return Err(Error::format(
                    "vocabulary",
                    format!("line {id} must hold `{special}`"),
                ));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// `BOS body EOS`, truncated so EOS survives, PAD-filled to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 3 {
            return Err(Error::Config(format!(
                "max_len {max_len} cannot hold BOS, one token and EOS"
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(
            normalize(text)
                .iter()
                .take(max_len - 2)
                .map(|t| self.id(t).unwrap_or(UNK)),
        );
        ids.push(EOS);
        let length = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids, length })
    }

    /// Joins body tokens with single spaces, stopping at the first EOS.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        self.decode_ids(seq.ids())
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => words.push(tok),
            }
        }
        Ok(words.join(" "))
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Token ids with PAD only as a contiguous suffix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    length: usize,
}

impl TokenSequence {
    /// Validates ids against the vocabulary size and the PAD-suffix rule.
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::IdOutOfRange {
                id,
                size: vocab_size,
            });
        }
        let length = ids.iter().position(|&id| id == PAD).unwrap_or(ids.len());
        if ids[length..].iter().any(|&id| id != PAD) {
            return Err(Error::Shape("PAD ids must form a contiguous suffix".into()));
        }
        Ok(Self { ids, length })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Number of non-PAD ids.
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// The non-PAD prefix.
    pub fn body(&self) -> &[u32] {
        &self.ids[..self.length]
    }

    /// Next-token targets aligned with `body()`: position n holds token n+1,
    /// the final position holds PAD and is ignored by the loss.
    pub fn shifted_targets(&self) -> Vec<u32> {
        let body = self.body();
        let mut t: Vec<u32> = body.iter().skip(1).copied().collect();
        if !body.is_empty() {
            t.push(PAD);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab_vocab() -> Vocabulary {
        Vocabulary::build(&["a a b"], 1).unwrap()
    }

    #[test]
    fn build_counts_and_threshold() {
        let v = ab_vocab();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        let v2 = Vocabulary::build(&["a a b"], 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.id("b"), None);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn specials_are_fixed() {
        let v = ab_vocab();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
    }

    #[test]
    fn encode_pads_and_maps_unknowns() {
        let v = ab_vocab();
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        assert_eq!(v.encode("a b", 5).unwrap().ids(), &[BOS, a, b, EOS, PAD]);
        assert_eq!(v.encode("z", 4).unwrap().ids(), &[BOS, UNK, EOS, PAD]);
        assert!(v.encode("a", 2).is_err());
    }

    #[test]
    fn encode_truncation_keeps_eos() {
        let v = ab_vocab();
        let s = v.encode("a b a b a b", 4).unwrap();
        assert_eq!(s.ids().len(), 4);
        assert_eq!(s.ids()[3], EOS);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = ab_vocab();
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        assert_eq!(v.decode_ids(&[BOS, a, EOS, PAD]).unwrap(), "a");
        assert_eq!(v.decode_ids(&[BOS, EOS]).unwrap(), "");
        assert_eq!(v.decode_ids(&[BOS, a, EOS, b]).unwrap(), "a");
        assert!(matches!(
            v.decode_ids(&[BOS, 99]),
            Err(Error::IdOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn normalize_splits_punctuation() {
        assert_eq!(
            normalize("Basketball court, used  for games?"),
            vec!["basketball", "court", ",", "used", "for", "games", "?"]
        );
    }

    #[test]
    fn token_sequence_rejects_interior_pad() {
        assert!(TokenSequence::new(vec![BOS, PAD, 4, EOS], 6).is_err());
        assert!(TokenSequence::new(vec![BOS, 4, 9], 6).is_err());
        let s = TokenSequence::new(vec![BOS, 4, EOS, PAD], 6).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.shifted_targets(), vec![4, EOS, PAD]);
    }

    #[test]
    fn text_file_round_trip() {
        let v = Vocabulary::build(&["the river, the bridge"], 1).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_text("a\nb\nc\nd\n").is_err());
    }
}
