use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[pad]";
pub const UNK: &str = "[unk]";
pub const BOS: &str = "[bos]";
pub const EOS: &str = "[eos]";
pub const SPEAKER1: &str = "[speaker1]";
pub const SPEAKER2: &str = "[speaker2]";

/// Reserved tokens, in index order.
pub const SPECIALS: [&str; 6] = [PAD, UNK, BOS, EOS, SPEAKER1, SPEAKER2];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const SPEAKER1_ID: usize = 4;
pub const SPEAKER2_ID: usize = 5;
pub const NUM_SPECIALS: usize = SPECIALS.len();

/// Bijective token/index map. The six special tokens always occupy
/// indices 0..6, in the order of [`SPECIALS`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// A vocabulary holding only the special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(std::iter::empty::<String>()).expect("specials are unique")
    }

    /// Specials followed by `tokens` in order. Fails on a duplicate or on a
    /// token that collides with a special.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for special in SPECIALS {
            vocab.push(special.to_string())?;
        }
        for token in tokens {
            vocab.push(token.into())?;
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> Result<usize> {
        if self.index.contains_key(&token) {
            return Err(Error::Data(format!("duplicate token `{token}` in vocabulary")));
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Never true: the specials are always present.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to `[unk]`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIALS {
            return Err(Error::Data(
                "serialized vocabulary must start with the six special tokens".into(),
            ));
        }
        Vocabulary::from_tokens(tokens.into_iter().skip(NUM_SPECIALS))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(vocab: Vocabulary) -> Self {
        vocab.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_at_fixed_indices() {
        let vocab = Vocabulary::from_tokens(["good", "bad"]).unwrap();
        assert_eq!(vocab.len(), 8);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(vocab.id(s), Some(i));
        }
        assert_eq!(vocab.id("good"), Some(6));
        assert_eq!(vocab.token(7), Some("bad"));
        assert_eq!(vocab.id_or_unk("missing"), UNK_ID);
    }

    #[test]
    fn bijection_holds() {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        for (i, t) in vocab.tokens().iter().enumerate() {
            assert_eq!(vocab.id(t), Some(i));
        }
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocabulary::from_tokens(["a", "a"]).is_err());
        assert!(Vocabulary::from_tokens(["[pad]"]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let vocab = Vocabulary::from_tokens(["x", "y"]).unwrap();
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(vocab, back);
        assert!(serde_json::from_str::<Vocabulary>(r#"["x"]"#).is_err());
    }
}
