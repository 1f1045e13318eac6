//! Corpus BLEU, ROUGE-1/2/L and a METEOR variant over pre-tokenized text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoothing::SynonymLexicon;

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Suffixes tried, in order, by [`stem`].
pub const STEM_SUFFIXES: [&str; 5] = ["ing", "ed", "es", "ly", "s"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrecisionRecall {
    fn from_counts(matched: usize, hyp_total: usize, ref_total: usize) -> Self {
        if hyp_total == 0 || ref_total == 0 || matched == 0 {
            return Self { precision: 0.0, recall: 0.0, f1: 0.0 };
        }
        let precision = matched as f64 / hyp_total as f64;
        let recall = matched as f64 / ref_total as f64;
        Self {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap(hyp: &HashMap<Vec<&str>, usize>, reference: &HashMap<Vec<&str>, usize>) -> usize {
    hyp.iter()
        .map(|(gram, &c)| c.min(reference.get(gram).copied().unwrap_or(0)))
        .sum()
}

/// Corpus BLEU-4 on a 0-100 scale. Orders with no matches use exponential
/// smoothing: the m-th such order scores 1/(2^m · total), where an order
/// with no hypothesis n-grams at all counts its total as 1.
pub fn bleu_corpus<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("BLEU needs at least one sentence pair".into()));
    }
    let mut matched = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            matched[n - 1] += clipped_overlap(&h, &r);
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    // sacreBLEU stops early when nothing matches at any order
    if hyp_len == 0 || matched.iter().all(|&m| m == 0) {
        return Ok(0.0);
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if matched[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * totals[n].max(1) as f64)
        } else {
            matched[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok((100.0 * brevity * (log_sum / 4.0).exp()).min(100.0))
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut stack = [0usize; 64];
    let mut heap = Vec::new();
    let row: &mut [usize] = if b.len() < stack.len() {
        &mut stack[..=b.len()]
    } else {
        heap.resize(b.len() + 1, 0);
        &mut heap
    };
    // row[j] holds the previous row until overwritten; `diag` is its old
    // row[j - 1]
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { above.max(row[j]) };
            diag = above;
        }
    }
    row[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> PrecisionRecall {
    let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    PrecisionRecall::from_counts(lcs_length(&h, &r), h.len(), r.len())
}

pub fn rouge_n<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> Result<PrecisionRecall> {
    if !(1..=2).contains(&n) {
        return Err(Error::Contract(format!("ROUGE-{n} is not supported (n must be 1 or 2)")));
    }
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    Ok(PrecisionRecall::from_counts(
        clipped_overlap(&h, &r),
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    ))
}

/// Strip the first suffix in [`STEM_SUFFIXES`] that leaves at least three
/// characters.
pub fn stem(token: &str) -> &str {
    for suffix in STEM_SUFFIXES {
        if let Some(base) = token.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    token
}

/// METEOR from alignment statistics; 0 when nothing matched.
pub fn meteor_from_counts(matches: usize, hyp_len: usize, ref_len: usize, chunks: usize) -> f64 {
    if matches == 0 || hyp_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let p = matches as f64 / hyp_len as f64;
    let r = matches as f64 / ref_len as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / matches as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// `ref_for[i]` is the reference position aligned to hypothesis token `i`.
    pub ref_for: Vec<Option<usize>>,
}

impl Alignment {
    pub fn matches(&self) -> usize {
        self.ref_for.iter().flatten().count()
    }

    /// Runs of aligned tokens adjacent in both hypothesis and reference.
    pub fn chunks(&self) -> usize {
        let mut chunks = 0;
        let mut prev: Option<usize> = None;
        for r in &self.ref_for {
            match (prev, r) {
                (Some(p), Some(r)) if *r == p + 1 => {}
                (_, Some(_)) => chunks += 1,
                _ => {}
            }
            prev = *r;
        }
        chunks
    }
}

/// Three-stage greedy alignment: exact, then stem, then synonym, each stage
/// only over tokens still unaligned. Within a stage, hypothesis tokens are
/// visited left to right; each takes the matching reference position that
/// extends an existing chunk if one does, otherwise the first one after the
/// most recent aligned reference position, otherwise the first one.
pub fn meteor_alignment<S: AsRef<str>>(
    hyp: &[S],
    reference: &[S],
    lexicon: Option<&SynonymLexicon>,
) -> Alignment {
    let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let mut ref_for: Vec<Option<usize>> = vec![None; h.len()];
    let mut ref_used = vec![false; r.len()];

    let exact = |a: &str, b: &str| a == b;
    let stemmed = |a: &str, b: &str| stem(a) == stem(b);
    let synonym = |a: &str, b: &str| lexicon.is_some_and(|lex| lex.are_synonyms(a, b));
    let stages: [&dyn Fn(&str, &str) -> bool; 3] = [&exact, &stemmed, &synonym];

    for matcher in stages {
        let mut last: Option<usize> = None;
        for i in 0..h.len() {
            if let Some(j) = ref_for[i] {
                last = Some(j);
                continue;
            }
            let candidates: Vec<usize> = (0..r.len())
                .filter(|&j| !ref_used[j] && matcher(h[i], r[j]))
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let extends = |j: usize| {
                (i > 0 && j > 0 && ref_for[i - 1] == Some(j - 1))
                    || (i + 1 < h.len() && ref_for[i + 1] == Some(j + 1))
            };
            let chosen = candidates
                .iter()
                .copied()
                .find(|&j| extends(j))
                .or_else(|| candidates.iter().copied().find(|&j| last.is_none_or(|l| j > l)))
                .unwrap_or(candidates[0]);
            ref_for[i] = Some(chosen);
            ref_used[chosen] = true;
            last = Some(chosen);
        }
    }
    Alignment { ref_for }
}

pub fn meteor<S: AsRef<str>>(hyp: &[S], reference: &[S], lexicon: Option<&SynonymLexicon>) -> f64 {
    let alignment = meteor_alignment(hyp, reference, lexicon);
    meteor_from_counts(alignment.matches(), hyp.len(), reference.len(), alignment.chunks())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "sacreBLEU,ROUGE-1,ROUGE-2,ROUGE-L,METEOR";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.bleu, self.rouge1, self.rouge2, self.rouge_l, self.meteor
        )
    }

    pub fn in_range(&self) -> bool {
        (0.0..=100.0).contains(&self.bleu)
            && [self.rouge1, self.rouge2, self.rouge_l, self.meteor]
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
    }
}

/// Corpus BLEU with macro-averaged sentence ROUGE F1 and METEOR.
pub fn evaluate_run<S: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<S>],
    lexicon: Option<&SynonymLexicon>,
) -> Result<MetricReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let pairs: Vec<(Vec<&str>, Vec<&str>)> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| {
            (
                h.iter().map(AsRef::as_ref).collect(),
                r.iter().map(AsRef::as_ref).collect(),
            )
        })
        .collect();
    let bleu = bleu_corpus(&pairs)?;
    let (mut r1, mut r2, mut rl, mut met) = (0.0, 0.0, 0.0, 0.0);
    for (h, r) in &pairs {
        r1 += rouge_n(h, r, 1)?.f1;
        r2 += rouge_n(h, r, 2)?.f1;
        rl += rouge_l(h, r).f1;
        met += meteor(h, r, lexicon);
    }
    let n = pairs.len() as f64;
    Ok(MetricReport {
        bleu,
        rouge1: r1 / n,
        rouge2: r2 / n,
        rouge_l: rl / n,
        meteor: met / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn bleu_worked_example() {
        // p1 = p2 = p3 = 1, p4 smoothed to 1/2, BP = exp(1 - 4/3)
        let expected = 100.0 * (-1.0f64 / 3.0).exp() * 0.5f64.powf(0.25);
        let got = bleu_corpus(&[(toks("the cat sat"), toks("the cat sat down"))]).unwrap();
        assert!(close(got, expected), "{got} vs {expected}");
        assert!(close(got, 60.252_861_047_854_54));
    }

    #[test]
    fn bleu_edge_cases() {
        let same = vec![(toks("a b c d e"), toks("a b c d e")), (toks("x y z w"), toks("x y z w"))];
        assert!(close(bleu_corpus(&same).unwrap(), 100.0));
        let empty = vec![(Vec::<String>::new(), toks("a b")), (vec![], toks("c"))];
        assert_eq!(bleu_corpus(&empty).unwrap(), 0.0);
        assert!(bleu_corpus::<String>(&[]).is_err());
        let disjoint = vec![(toks("red blue"), toks("one two three"))];
        assert_eq!(bleu_corpus(&disjoint).unwrap(), 0.0);
    }

    #[test]
    fn rouge_worked_examples() {
        let l = rouge_l(&toks("a c"), &toks("a b c"));
        assert!(close(l.precision, 1.0) && close(l.recall, 2.0 / 3.0) && close(l.f1, 0.8));
        let one = rouge_n(&toks("a a b"), &toks("a b"), 1).unwrap();
        assert!(close(one.precision, 2.0 / 3.0) && close(one.recall, 1.0));
        assert_eq!(rouge_n(&toks("a"), &toks("a b"), 2).unwrap().f1, 0.0);
        assert_eq!(rouge_l(&[] as &[&str], &["a"]).f1, 0.0);
        assert!(rouge_n(&toks("a"), &toks("a"), 3).is_err());
        let id = rouge_n(&toks("p q r"), &toks("p q r"), 2).unwrap();
        assert_eq!((id.precision, id.recall, id.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn meteor_worked_examples() {
        let four = toks("we like the film");
        assert!(close(meteor(&four, &four, None), 0.9921875));
        let lex = SynonymLexicon::from_pairs([("good", "great")]);
        assert!(close(meteor(&toks("good"), &toks("great"), Some(&lex)), 0.5));
        assert_eq!(meteor(&toks("good"), &toks("great"), None), 0.0);
        assert_eq!(meteor(&toks("a b"), &toks("c d"), Some(&lex)), 0.0);
    }

    #[test]
    fn meteor_stages() {
        assert_eq!(stem("walking"), "walk");
        assert_eq!(stem("boxes"), "box");
        assert_eq!(stem("is"), "is");
        assert_eq!(stem("sing"), "sing");
        let a = meteor_alignment(&toks("he walked home"), &toks("he walks home"), None);
        assert_eq!(a.ref_for, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(a.chunks(), 1);
    }

    #[test]
    fn meteor_prefers_extending_chunks() {
        // the second "the" should pair with the reference "the" that
        // follows the aligned "on"
        let a = meteor_alignment(&toks("on the mat"), &toks("the cat on the mat"), None);
        assert_eq!(a.ref_for, vec![Some(2), Some(3), Some(4)]);
        assert_eq!(a.chunks(), 1);
    }

    #[test]
    fn evaluate_run_two_pair_toy() {
        let hyps = vec![toks("a c"), toks("a a b")];
        let refs = vec![toks("a b c"), toks("a b")];
        let report = evaluate_run(&hyps, &refs, None).unwrap();
        let r1 = (rouge_n(&hyps[0], &refs[0], 1).unwrap().f1 + 2.0 * (2.0 / 3.0) / (2.0 / 3.0 + 1.0)) / 2.0;
        assert!(close(report.rouge1, r1));
        assert!(close(report.rouge_l, (0.8 + 0.8) / 2.0));
        assert!(report.in_range());
        let same = evaluate_run(&refs, &refs, None).unwrap();
        assert!(close(same.bleu, 100.0) || refs.iter().any(|r| r.len() < 4));
        assert_eq!((same.rouge1, same.rouge_l), (1.0, 1.0));
        assert!(evaluate_run(&hyps[..1], &refs, None).is_err());
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"rougeL\""));
    }

    fn subsequences(seq: &[u8]) -> Vec<Vec<u8>> {
        (0..1u32 << seq.len())
            .map(|mask| {
                seq.iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, &c)| c)
                    .collect()
            })
            .collect()
    }

    fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier: Vec<Vec<u8>> = vec![vec![]];
        for _ in 0..max_len {
            frontier = frontier
                .iter()
                .flat_map(|s| (0..3u8).map(move |c| [s.as_slice(), &[c]].concat()))
                .collect();
            out.extend(frontier.iter().cloned());
        }
        out
    }

    #[test]
    fn lcs_matches_enumeration_up_to_length_five() {
        let seqs = all_sequences(5);
        let subs: Vec<std::collections::HashSet<Vec<u8>>> =
            seqs.iter().map(|s| subsequences(s).into_iter().collect()).collect();
        for (a, sa) in seqs.iter().zip(&subs) {
            for (b, sb) in seqs.iter().zip(&subs) {
                let brute = sa.intersection(sb).map(Vec::len).max().unwrap_or(0);
                assert_eq!(lcs_length(a, b), brute, "{a:?} {b:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn relabeling_leaves_scores_unchanged(
            hyp in proptest::collection::vec(0u8..6, 0..10),
            reference in proptest::collection::vec(0u8..6, 1..10),
        ) {
            let name = |alphabet: &[&str], s: &[u8]| -> Vec<String> {
                s.iter().map(|&c| alphabet[c as usize].to_string()).collect()
            };
            let a = ["cat", "dog", "sun", "box", "tree", "lamp"];
            let b = ["q", "w", "e", "r", "t", "y"];
            let (h1, r1) = (name(&a, &hyp), name(&a, &reference));
            let (h2, r2) = (name(&b, &hyp), name(&b, &reference));
            let x = evaluate_run(&[h1], &[r1], None).unwrap();
            let y = evaluate_run(&[h2], &[r2], None).unwrap();
            prop_assert_eq!(x, y);
            prop_assert!(x.in_range());
        }

        #[test]
        fn rouge_l_bounds(
            hyp in proptest::collection::vec(0u8..4, 0..12),
            reference in proptest::collection::vec(0u8..4, 0..12),
        ) {
            let h: Vec<String> = hyp.iter().map(u8::to_string).collect();
            let r: Vec<String> = reference.iter().map(u8::to_string).collect();
            let s = rouge_l(&h, &r);
            prop_assert!((0.0..=1.0).contains(&s.precision) && (0.0..=1.0).contains(&s.recall));
            prop_assert!(s.f1 <= 1.0f64.min(2.0 * s.precision.min(s.recall)) + 1e-12);
        }

        #[test]
        fn meteor_more_matches_never_hurts(
            matches in 1usize..30,
            chunks_frac in 0.0f64..1.0,
            extra_h in 0usize..10,
            extra_r in 0usize..10,
        ) {
            let chunks = 1 + ((matches - 1) as f64 * chunks_frac) as usize;
            let h = matches + extra_h;
            let r = matches + extra_r;
            let before = meteor_from_counts(matches, h, r, chunks);
            let appended = meteor_from_counts(matches + 1, h + 1, r + 1, chunks);
            prop_assert!(appended >= before - 1e-15);
            if extra_h > 0 && extra_r > 0 {
                let realigned = meteor_from_counts(matches + 1, h, r, chunks);
                prop_assert!(realigned >= before - 1e-15);
            }
        }
    }
}
