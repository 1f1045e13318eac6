//! Word-vector loading and cosine similarity against the full vocabulary.
//!
//! Vector files use the plain GloVe text layout: one `token v1 v2 ... vd`
//! entry per line, single spaces, no header.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, NUM_SPECIALS};

/// Mixed into every per-token seed so that seeded vectors do not coincide
/// with other uses of the same hash.
pub const TOKEN_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Half-width of the uniform range used for seeded vectors.
pub const SEEDED_RANGE: f64 = 0.1;

/// A k×d matrix of word vectors, one row per vocabulary index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
    norms: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding matrix contains non-finite entries".into()));
        }
        let norms = values
            .axis_iter(Axis(0))
            .map(|row| row.dot(&row).sqrt())
            .collect();
        Ok(Self { values, norms })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, index: usize) -> ArrayView1<'_, f64> {
        self.values.row(index)
    }

    pub fn norm(&self, index: usize) -> f64 {
        self.norms[index]
    }

    /// Build the matrix for `vocab`, copying rows of `source` for tokens it
    /// knows and seeding the rest. Returns the matrix and the number of
    /// tokens that had to be seeded (specials excluded).
    pub fn aligned_to(&self, source_vocab: &Vocabulary, vocab: &Vocabulary) -> (Self, usize) {
        let dim = self.dim();
        let mut values = Array2::zeros((vocab.len(), dim));
        let mut missing = 0;
        for (i, token) in vocab.tokens().iter().enumerate() {
            match source_vocab.id(token) {
                Some(src) => values.row_mut(i).assign(&self.values.row(src)),
                None => {
                    if i >= NUM_SPECIALS {
                        missing += 1;
                    }
                    values.row_mut(i).assign(&ArrayView1::from(&seeded_vector(token, dim)));
                }
            }
        }
        (Self::new(values).expect("finite by construction"), missing)
    }
}

/// Cosine similarities between one vocabulary entry and every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    pub target_index: usize,
    pub sims: Vec<f64>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Seed used for a token's pseudo-random vector: FNV-1a of its UTF-8 bytes
/// xor [`TOKEN_SEED_SALT`].
pub fn token_seed(token: &str) -> u64 {
    fnv1a64(token.as_bytes()) ^ TOKEN_SEED_SALT
}

/// Deterministic vector with entries from uniform(-0.1, 0.1), seeded by
/// [`token_seed`].
pub fn seeded_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(token_seed(token));
    (0..dim)
        .map(|_| rng.gen_range(-SEEDED_RANGE..SEEDED_RANGE))
        .collect()
}

/// Load a text vector file. The returned vocabulary is the six specials
/// followed by file tokens in file order. Specials, and tokens listed
/// without any values, get [`seeded_vector`]s.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<(Vocabulary, EmbeddingMatrix)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path, expected_dim)
}

pub(crate) fn parse_embeddings(
    text: &str,
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<(Vocabulary, EmbeddingMatrix)> {
    let mut entries: Vec<(String, Option<Vec<f64>>)> = Vec::new();
    let mut dim = expected_dim;
    let mut seen = std::collections::HashSet::new();

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end_matches(['\r', ' ']);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default().to_string();
        if token.is_empty() {
            return Err(Error::format(path, lineno, "missing token"));
        }
        if !seen.insert(token.clone()) {
            return Err(Error::format(path, lineno, format!("duplicate token `{token}`")));
        }
        let mut vector = Vec::new();
        for field in fields {
            let value: f64 = field.parse().map_err(|_| {
                Error::format(path, lineno, format!("non-numeric field `{field}`"))
            })?;
            if !value.is_finite() {
                return Err(Error::format(path, lineno, format!("non-finite value `{field}`")));
            }
            vector.push(value);
        }
        if vector.is_empty() {
            entries.push((token, None));
            continue;
        }
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("dimension mismatch: expected {d} values, found {}", vector.len()),
                ));
            }
            Some(_) => {}
        }
        entries.push((token, Some(vector)));
    }

    if entries.is_empty() {
        return Err(Error::format(path, 0, "vector file has no entries"));
    }
    let dim = dim.ok_or_else(|| Error::format(path, 0, "no entry carries a vector"))?;
    assemble(entries, dim)
}

/// Build a vocabulary and matrix from in-memory `(token, vector)` pairs,
/// with the same special-token handling as [`load_embeddings`].
pub fn embeddings_from_pairs(pairs: &[(String, Vec<f64>)]) -> Result<(Vocabulary, EmbeddingMatrix)> {
    let dim = pairs
        .first()
        .map(|(_, v)| v.len())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Data("no word vectors given".into()))?;
    let mut seen = std::collections::HashSet::new();
    for (token, v) in pairs {
        if v.len() != dim {
            return Err(Error::Data(format!(
                "vector for `{token}` has {} values, expected {dim}",
                v.len()
            )));
        }
        if !seen.insert(token.as_str()) {
            return Err(Error::Data(format!("duplicate token `{token}`")));
        }
    }
    assemble(
        pairs.iter().map(|(t, v)| (t.clone(), Some(v.clone()))).collect(),
        dim,
    )
}

fn assemble(entries: Vec<(String, Option<Vec<f64>>)>, dim: usize) -> Result<(Vocabulary, EmbeddingMatrix)> {
    let mut file_vectors = std::collections::HashMap::new();
    let mut plain_tokens = Vec::new();
    for (token, vector) in entries {
        if crate::vocab::SPECIALS.contains(&token.as_str()) {
            if let Some(v) = vector {
                file_vectors.insert(token, v);
            }
            continue;
        }
        if let Some(v) = vector {
            file_vectors.insert(token.clone(), v);
        }
        plain_tokens.push(token);
    }

    let vocab = Vocabulary::from_tokens(plain_tokens)?;
    let mut values = Array2::zeros((vocab.len(), dim));
    for (i, token) in vocab.tokens().iter().enumerate() {
        let row = match file_vectors.remove(token) {
            Some(v) => v,
            None => seeded_vector(token, dim),
        };
        values.row_mut(i).assign(&ArrayView1::from(&row));
    }
    Ok((vocab, EmbeddingMatrix::new(values)?))
}

/// Cosine similarity of row `target` against every row. Zero-norm rows
/// have similarity 0 to everything; results are clamped to [-1, 1].
pub fn cosine_row(embeddings: &EmbeddingMatrix, target: usize) -> Result<SimilarityRow> {
    let k = embeddings.rows();
    if target >= k {
        return Err(Error::Bounds { index: target, len: k });
    }
    let target_norm = embeddings.norm(target);
    let mut sims = vec![0.0; k];
    if target_norm > 0.0 {
        let dots = embeddings.values.dot(&embeddings.values.row(target));
        for (m, sim) in sims.iter_mut().enumerate() {
            let norm = embeddings.norm(m);
            if norm > 0.0 {
                *sim = (dots[m] / (target_norm * norm)).clamp(-1.0, 1.0);
            }
        }
        sims[target] = 1.0;
    }
    Ok(SimilarityRow {
        target_index: target,
        sims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<(Vocabulary, EmbeddingMatrix)> {
        parse_embeddings(text, Path::new("vectors.txt"), None)
    }

    #[test]
    fn two_token_file_yields_eight_rows() {
        let (vocab, emb) = parse("good 0.1 0.2 0.3\nbad -0.1 0.0 0.5\n").unwrap();
        assert_eq!(vocab.len(), 8);
        assert_eq!((emb.rows(), emb.dim()), (8, 3));
        assert_eq!(vocab.id("good"), Some(6));
        assert_eq!(emb.row(7).to_vec(), vec![-0.1, 0.0, 0.5]);
    }

    #[test]
    fn loading_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        std::fs::write(&path, "good 0.1 0.2 0.3\nlonely\nbad 1 2 3\n").unwrap();
        let (v1, e1) = load_embeddings(&path, None).unwrap();
        let (v2, e2) = load_embeddings(&path, None).unwrap();
        assert_eq!(v1, v2);
        let bits = |e: &EmbeddingMatrix| e.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&e1), bits(&e2));
        // token without a vector is seeded within range
        let lonely = e1.row(v1.id("lonely").unwrap());
        assert!(lonely.iter().all(|x| x.abs() < SEEDED_RANGE));
        assert_eq!(lonely.to_vec(), seeded_vector("lonely", 3));
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let err = parse("good 0.1 0.2\nbad 0.1 0.2 0.3\n").unwrap_err();
        match err {
            Error::Format { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("dimension"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn format_errors() {
        assert!(matches!(parse("good 0.1 x\n"), Err(Error::Format { line: 1, .. })));
        assert!(matches!(parse("a 1\nb 2\na 3\n"), Err(Error::Format { line: 3, .. })));
        assert!(matches!(parse(""), Err(Error::Format { .. })));
        assert!(matches!(parse("\n\n"), Err(Error::Format { .. })));
        assert!(matches!(parse("a nan\n"), Err(Error::Format { .. })));
        assert!(matches!(
            parse_embeddings("a 1 2\n", Path::new("v"), Some(3)),
            Err(Error::Format { line: 1, .. })
        ));
    }

    #[test]
    fn cosine_basic_cases() {
        let emb = EmbeddingMatrix::new(array![[1.0, 0.0], [1.0, 1.0], [0.0, 2.0], [1.0, 0.0], [0.0, 0.0]]).unwrap();
        let row = cosine_row(&emb, 0).unwrap();
        assert_eq!(row.sims[0], 1.0);
        assert!((row.sims[1] - 0.707_106_78).abs() < 1e-8);
        assert_eq!(row.sims[2], 0.0);
        assert_eq!(row.sims[3], 1.0);
        assert_eq!(row.sims[4], 0.0);
        let zero = cosine_row(&emb, 4).unwrap();
        assert!(zero.sims.iter().all(|&s| s == 0.0));
        assert!(matches!(cosine_row(&emb, 5), Err(Error::Bounds { index: 5, len: 5 })));
    }

    #[test]
    fn alignment_seeds_missing_tokens() {
        let (src_vocab, src) = parse("good 1 0\nbad 0 1\n").unwrap();
        let vocab = Vocabulary::from_tokens(["bad", "novel"]).unwrap();
        let (aligned, missing) = src.aligned_to(&src_vocab, &vocab);
        assert_eq!(missing, 1);
        assert_eq!(aligned.row(6).to_vec(), vec![0.0, 1.0]);
        assert_eq!(aligned.row(7).to_vec(), seeded_vector("novel", 2));
    }

    fn matrix_strategy() -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-1.0f64..1.0, 50 * 6)
            .prop_map(|v| Array2::from_shape_vec((50, 6), v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn symmetry_and_self_similarity(values in matrix_strategy()) {
            let emb = EmbeddingMatrix::new(values).unwrap();
            let rows: Vec<_> = (0..50).map(|j| cosine_row(&emb, j).unwrap()).collect();
            for a in 0..50 {
                prop_assert!((rows[a].sims[a] - 1.0).abs() < 1e-9);
                for b in 0..50 {
                    prop_assert!((rows[a].sims[b] - rows[b].sims[a]).abs() < 1e-9);
                    prop_assert!(rows[a].sims[b].abs() <= 1.0);
                }
            }
        }

        #[test]
        fn positive_row_scaling_is_invisible(values in matrix_strategy(), row in 0usize..50, scale in 0.01f64..100.0) {
            let before = cosine_row(&EmbeddingMatrix::new(values.clone()).unwrap(), row).unwrap();
            let mut scaled = values;
            scaled.row_mut(row).mapv_inplace(|x| x * scale);
            let after = cosine_row(&EmbeddingMatrix::new(scaled).unwrap(), row).unwrap();
            for (x, y) in before.sims.iter().zip(&after.sims) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
