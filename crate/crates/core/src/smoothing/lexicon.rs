use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Symmetric synonym relation over token strings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl SynonymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record `a ~ b` in both directions. Self-pairs are ignored.
    pub fn insert(&mut self, a: &str, b: &str) {
        if a == b {
            return;
        }
        self.entries.entry(a.to_string()).or_default().insert(b.to_string());
        self.entries.entry(b.to_string()).or_default().insert(a.to_string());
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut lexicon = Self::new();
        for (a, b) in pairs {
            lexicon.insert(a, b);
        }
        lexicon
    }

    /// Every member of a cluster becomes a synonym of every other member.
    pub fn from_clusters<S: AsRef<str>>(clusters: &[Vec<S>]) -> Self {
        let mut lexicon = Self::new();
        for cluster in clusters {
            for a in cluster {
                for b in cluster {
                    lexicon.insert(a.as_ref(), b.as_ref());
                }
            }
        }
        lexicon
    }

    pub fn synonyms(&self, token: &str) -> impl Iterator<Item = &str> {
        self.entries
            .get(token)
            .into_iter()
            .flat_map(|set| set.iter().map(String::as_str))
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.entries.get(a).is_some_and(|set| set.contains(b))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Render in the `token<TAB>syn1,syn2` file layout, one line per token.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (token, synonyms) in &self.entries {
            out.push_str(token);
            out.push('\t');
            out.push_str(&synonyms.iter().cloned().collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub(crate) fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lexicon = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (token, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, lineno + 1, "expected `token<TAB>synonyms`"))?;
            let token = token.trim();
            if token.is_empty() {
                return Err(Error::format(path, lineno + 1, "empty head token"));
            }
            for synonym in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                lexicon.insert(token, synonym);
            }
        }
        Ok(lexicon)
    }
}

/// Load a `token<TAB>comma,separated,synonyms` file. `#` lines are comments.
pub fn load_synonyms(path: impl AsRef<Path>) -> Result<SynonymLexicon> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SynonymLexicon::parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<SynonymLexicon> {
        SynonymLexicon::parse(text, Path::new("syn.tsv"))
    }

    #[test]
    fn symmetric_closure() {
        let lex = parse("good\tgreat,awesome\n").unwrap();
        let good: Vec<_> = lex.synonyms("good").collect();
        assert_eq!(good, vec!["awesome", "great"]);
        assert!(lex.are_synonyms("great", "good"));
        assert!(lex.are_synonyms("awesome", "good"));
        assert!(!lex.are_synonyms("great", "awesome"));
    }

    #[test]
    fn self_reference_dropped() {
        let lex = parse("fun\tfun\n").unwrap();
        assert_eq!(lex.synonyms("fun").count(), 0);
    }

    #[test]
    fn comments_and_blank_lines() {
        let lex = parse("# header\n\nhi\thello\n").unwrap();
        assert!(lex.are_synonyms("hello", "hi"));
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn missing_tab_reports_line() {
        match parse("a\tb\nno tab here\n") {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_string_round_trips() {
        let lex = SynonymLexicon::from_clusters(&[vec!["good", "great", "awesome"], vec!["bad", "awful"]]);
        assert_eq!(parse(&lex.to_file_string()).unwrap(), lex);
    }
}
