use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    build_target_distribution, one_hot, uniform_smoothed_distribution, SmoothingConfig,
    SynonymLexicon, TargetDistribution,
};
use crate::embeddings::{cosine_row, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Echo of the settings a table was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub policy: String,
    pub s: Option<f64>,
    pub t: Option<f64>,
    pub w: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TableData {
    Explicit { entries: Vec<TargetDistribution> },
    /// Materialized on lookup; k·(k-1) entries would not fit for large k.
    Uniform { s: f64 },
}

/// Target distribution for every vocabulary index.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    config: TableConfig,
    vocab_size: usize,
    data: TableData,
    similarity_rows: usize,
}

impl TargetTable {
    pub fn one_hot(vocab_size: usize) -> Self {
        let entries = (0..vocab_size)
            .map(|j| one_hot(j, vocab_size).expect("in range"))
            .collect();
        Self {
            config: TableConfig {
                policy: "hard".into(),
                s: None,
                t: None,
                w: None,
            },
            vocab_size,
            data: TableData::Explicit { entries },
            similarity_rows: 0,
        }
    }

    pub fn uniform(vocab_size: usize, s: f64) -> Result<Self> {
        // validates k and s up front
        uniform_smoothed_distribution(0, vocab_size, s)?;
        Ok(Self {
            config: TableConfig {
                policy: "uniform".into(),
                s: Some(s),
                t: None,
                w: None,
            },
            vocab_size,
            data: TableData::Uniform { s },
            similarity_rows: 0,
        })
    }

    pub fn config(&self) -> &TableConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of cosine-similarity rows computed while building the table.
    pub fn similarity_rows(&self) -> usize {
        self.similarity_rows
    }

    pub fn get(&self, j: usize) -> Result<Cow<'_, TargetDistribution>> {
        if j >= self.vocab_size {
            return Err(Error::Bounds {
                index: j,
                len: self.vocab_size,
            });
        }
        Ok(match &self.data {
            TableData::Explicit { entries } => Cow::Borrowed(&entries[j]),
            TableData::Uniform { s } => {
                Cow::Owned(uniform_smoothed_distribution(j, self.vocab_size, *s)?)
            }
        })
    }
}

/// Similarity-weighted targets for every non-special index; specials map
/// to one-hot. Rows are computed in parallel.
pub fn precompute_target_table(
    vocab: &Vocabulary,
    embeddings: &EmbeddingMatrix,
    config: &SmoothingConfig,
    lexicon: Option<&SynonymLexicon>,
) -> Result<TargetTable> {
    config.validate()?;
    let k = vocab.len();
    if embeddings.rows() != k {
        return Err(Error::Contract(format!(
            "embedding matrix has {} rows but vocabulary has {k} entries",
            embeddings.rows()
        )));
    }
    if config.t.is_none() {
        return Err(Error::Contract(
            "similarity-weighted table needs a threshold".into(),
        ));
    }
    if config.use_synonym_mask && lexicon.is_none() {
        return Err(Error::Config(
            "synonym mask requested but no lexicon was supplied".into(),
        ));
    }
    let entries = (0..k)
        .into_par_iter()
        .map(|j| {
            if Vocabulary::is_special(j) {
                one_hot(j, k)
            } else {
                let sims = cosine_row(embeddings, j)?;
                build_target_distribution(j, &sims, config, vocab, lexicon)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetTable {
        config: TableConfig {
            policy: "semantic".into(),
            s: Some(config.s),
            t: config.t,
            w: Some(config.use_synonym_mask),
        },
        vocab_size: k,
        data: TableData::Explicit { entries },
        similarity_rows: k.saturating_sub(crate::vocab::NUM_SPECIALS),
    })
}

pub const TABLE_FORMAT: &str = "semsmooth-targets";
pub const TABLE_VERSION: u32 = 1;

/// On-disk form of a [`TargetTable`]: config echo, vocabulary, and a
/// SHA-256 checksum over the serialized content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFile {
    pub format: String,
    pub version: u32,
    pub config: TableConfig,
    pub checksum: String,
    pub vocab: Vocabulary,
    data: TableData,
}

fn checksum(config: &TableConfig, vocab: &Vocabulary, data: &TableData) -> Result<String> {
    let bytes = serde_json::to_vec(&(config, vocab, data))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl TableFile {
    pub fn new(table: &TargetTable, vocab: &Vocabulary) -> Result<Self> {
        if vocab.len() != table.vocab_size {
            return Err(Error::Contract("table and vocabulary sizes differ".into()));
        }
        Ok(Self {
            format: TABLE_FORMAT.into(),
            version: TABLE_VERSION,
            checksum: checksum(&table.config, vocab, &table.data)?,
            config: table.config.clone(),
            vocab: vocab.clone(),
            data: table.data.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parse and verify format tag and checksum.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(text)?;
        if file.format != TABLE_FORMAT || file.version != TABLE_VERSION {
            return Err(Error::Data(format!(
                "unsupported target table format {} v{}",
                file.format, file.version
            )));
        }
        let expected = checksum(&file.config, &file.vocab, &file.data)?;
        if expected != file.checksum {
            return Err(Error::Data("target table checksum mismatch".into()));
        }
        Ok(file)
    }

    pub fn into_table(self) -> (Vocabulary, TargetTable) {
        let table = TargetTable {
            config: self.config,
            vocab_size: self.vocab.len(),
            data: self.data,
            similarity_rows: 0,
        };
        (self.vocab, table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub token: String,
    pub probability: f64,
}

/// What one word's target looks like under a given table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionRecord {
    pub word: String,
    pub config: TableConfig,
    pub correct_probability: f64,
    pub support_size: usize,
    pub support: Vec<SupportEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Support of `word`'s target, sorted by descending probability (ties by
/// index).
pub fn inspect_distribution(
    word: &str,
    vocab: &Vocabulary,
    table: &TargetTable,
) -> Result<InspectionRecord> {
    let j = vocab.id(word).ok_or_else(|| Error::Lookup(word.to_string()))?;
    let dist = table.get(j)?;
    let mut support = dist.support.clone();
    support.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let note = support
        .is_empty()
        .then(|| "empty support: equivalent to vanilla CE targets".to_string());
    Ok(InspectionRecord {
        word: word.to_string(),
        config: table.config.clone(),
        correct_probability: dist.correct_probability,
        support_size: support.len(),
        support: support
            .into_iter()
            .map(|(m, p)| SupportEntry {
                token: vocab.token(m).unwrap_or_default().to_string(),
                probability: p,
            })
            .collect(),
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_setup(k_words: usize, dim: usize, seed: u64) -> (Vocabulary, EmbeddingMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::from_tokens((0..k_words).map(|i| format!("w{i}"))).unwrap();
        let values = Array2::from_shape_fn((vocab.len(), dim), |_| rng.gen_range(-1.0..1.0));
        (vocab, EmbeddingMatrix::new(values).unwrap())
    }

    #[test]
    fn table_matches_fresh_builds() {
        let (vocab, emb) = random_setup(40, 5, 3);
        let cfg = SmoothingConfig::semantic(0.1, 0.2, false);
        let table = precompute_target_table(&vocab, &emb, &cfg, None).unwrap();
        assert_eq!(table.similarity_rows(), 40);
        for j in 0..vocab.len() {
            let got = table.get(j).unwrap();
            if Vocabulary::is_special(j) {
                assert!(got.is_one_hot());
                continue;
            }
            let fresh =
                build_target_distribution(j, &cosine_row(&emb, j).unwrap(), &cfg, &vocab, None)
                    .unwrap();
            assert_eq!(*got, fresh);
            assert!((got.total_mass() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (vocab, emb) = random_setup(5, 3, 1);
        let other = Vocabulary::from_tokens(["x"]).unwrap();
        let cfg = SmoothingConfig::semantic(0.1, 0.5, false);
        assert!(matches!(precompute_target_table(&other, &emb, &cfg, None), Err(Error::Contract(_))));
        let with_w = SmoothingConfig::semantic(0.1, 0.5, true);
        assert!(matches!(precompute_target_table(&vocab, &emb, &with_w, None), Err(Error::Config(_))));
    }

    #[test]
    fn file_round_trip_and_checksum() {
        let (vocab, emb) = random_setup(20, 4, 9);
        let table = precompute_target_table(&vocab, &emb, &SmoothingConfig::semantic(0.2, 0.0, false), None).unwrap();
        let file = TableFile::new(&table, &vocab).unwrap();
        let json = file.to_json().unwrap();
        assert_eq!(json, TableFile::new(&table, &vocab).unwrap().to_json().unwrap());
        let (v2, t2) = TableFile::from_json(&json).unwrap().into_table();
        assert_eq!(v2, vocab);
        for j in 0..vocab.len() {
            assert_eq!(t2.get(j).unwrap(), table.get(j).unwrap());
        }
        let tampered = json.replacen("0.8", "0.7", 1);
        assert!(TableFile::from_json(&tampered).is_err());
    }

    #[test]
    fn inspection_sorted_and_noted() {
        let vocab = Vocabulary::from_tokens(["fun", "play", "game", "box"]).unwrap();
        let values = Array2::from_shape_vec(
            (10, 2),
            vec![0.0, 0.1, 0.1, 0.0, 0.3, 0.2, 0.2, 0.3, 0.4, 0.1, 0.0, 0.5,
                 1.0, 0.0, 0.9, 0.2, 0.8, 0.6, -1.0, 0.1],
        )
        .unwrap();
        let emb = EmbeddingMatrix::new(values).unwrap();
        let table = precompute_target_table(&vocab, &emb, &SmoothingConfig::semantic(0.1, 0.0, false), None).unwrap();
        let rec = inspect_distribution("fun", &vocab, &table).unwrap();
        assert_eq!(rec.support_size, 2);
        assert_eq!(rec.support[0].token, "play");
        assert!(rec.support[0].probability > rec.support[1].probability);
        assert!(rec.note.is_none());

        let strict = precompute_target_table(&vocab, &emb, &SmoothingConfig::semantic(0.1, 1.0, false), None).unwrap();
        let rec = inspect_distribution("fun", &vocab, &strict).unwrap();
        assert_eq!(rec.support_size, 0);
        assert_eq!(rec.correct_probability, 1.0);
        assert!(rec.note.unwrap().contains("equivalent to vanilla CE targets"));
        assert!(matches!(inspect_distribution("nope", &vocab, &strict), Err(Error::Lookup(_))));
    }

    #[test]
    fn uniform_table_lookup() {
        let t = TargetTable::uniform(10, 0.1).unwrap();
        let d = t.get(7).unwrap();
        assert_eq!(d.support.len(), 9);
        assert!((d.total_mass() - 1.0).abs() < 1e-12);
        assert!(t.get(10).is_err());
        assert!(TargetTable::uniform(10, 1.5).is_err());
    }
}
