//! Conversation ingestion and next-utterance example construction.

mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synthetic::{
    default_clusters, parse_clusters, synthetic_corpus, synthetic_embeddings, TEMPLATES,
};

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, EOS_ID, SPEAKER1_ID, SPEAKER2_ID};

/// Contexts keep at most this many of the most recent tokens.
pub const MAX_CONTEXT: usize = 50;

/// Lowercase, split on whitespace, and split every ASCII punctuation
/// character into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// An ordered list of turns from two alternating speakers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub turns: Vec<String>,
}

impl Conversation {
    pub fn new(turns: Vec<String>) -> Result<Self> {
        let conv = Self { turns };
        conv.validate()?;
        Ok(conv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.len() < 2 {
            return Err(Error::Data("fewer than 2 turns".into()));
        }
        if let Some(i) = self.turns.iter().position(|t| tokenize(t).is_empty()) {
            return Err(Error::Data(format!("turn {} is empty after tokenization", i + 1)));
        }
        Ok(())
    }
}

/// One (context, response) pair. `response_ids` always ends in `[eos]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
}

impl TrainingExample {
    /// Decoder input: `[bos]` followed by the response minus its final token.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(crate::vocab::BOS_ID)
            .chain(self.response_ids[..self.response_ids.len() - 1].iter().copied())
            .collect()
    }

    /// Response tokens without the trailing `[eos]`.
    pub fn response_body(&self) -> &[usize] {
        &self.response_ids[..self.response_ids.len() - 1]
    }
}

/// Read a JSON-lines corpus; blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path)
}

pub(crate) fn parse_corpus(text: &str, path: &Path) -> Result<Vec<Conversation>> {
    let mut conversations = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::format(path, lineno, format!("invalid JSON: {e}")))?;
        if value.get("turns").is_none() {
            return Err(Error::format(path, lineno, "missing `turns`"));
        }
        let conv: Conversation = serde_json::from_value(value)
            .map_err(|e| Error::format(path, lineno, format!("malformed record: {e}")))?;
        conv.validate()
            .map_err(|e| Error::format(path, lineno, e.to_string()))?;
        conversations.push(conv);
    }
    Ok(conversations)
}

/// Serialize as JSON lines, the format [`load_corpus`] reads.
pub fn corpus_to_jsonl(conversations: &[Conversation]) -> Result<String> {
    let mut out = String::new();
    for conv in conversations {
        out.push_str(&serde_json::to_string(conv)?);
        out.push('\n');
    }
    Ok(out)
}

/// One example per turn after the first. The context concatenates the
/// earlier turns, each preceded by its speaker token (`[speaker1]` first),
/// and keeps the last [`MAX_CONTEXT`] tokens.
pub fn build_examples(conv: &Conversation, vocab: &Vocabulary) -> Vec<TrainingExample> {
    let turns: Vec<Vec<usize>> = conv
        .turns
        .iter()
        .map(|t| tokenize(t).iter().map(|tok| vocab.id_or_unk(tok)).collect())
        .collect();
    let mut examples = Vec::with_capacity(turns.len().saturating_sub(1));
    let mut flat: Vec<usize> = Vec::new();
    for (i, turn) in turns.iter().enumerate() {
        if i > 0 {
            let start = flat.len().saturating_sub(MAX_CONTEXT);
            let mut response_ids = turn.clone();
            response_ids.push(EOS_ID);
            examples.push(TrainingExample {
                context_ids: flat[start..].to_vec(),
                response_ids,
            });
        }
        flat.push(if i % 2 == 0 { SPEAKER1_ID } else { SPEAKER2_ID });
        flat.extend_from_slice(turn);
    }
    examples
}

pub fn build_corpus_examples(conversations: &[Conversation], vocab: &Vocabulary) -> Vec<TrainingExample> {
    conversations
        .iter()
        .flat_map(|c| build_examples(c, vocab))
        .collect()
}

/// Specials, then every token seen at least `min_count` times, by
/// descending frequency with lexicographic tie-break.
pub fn build_vocab(conversations: &[Conversation], min_count: usize) -> Result<Vocabulary> {
    if conversations.is_empty() {
        return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
    }
    if min_count == 0 {
        return Err(Error::Contract("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for conv in conversations {
        for turn in &conv.turns {
            for token in tokenize(turn) {
                *counts.entry(token).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}
