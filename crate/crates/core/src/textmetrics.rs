//! Edit distance, character error rate, and word error rate.
//!
//! Distances are over Unicode scalar values. CER divides by the longer of the
//! two normalized strings, so it stays in `[0, 1]`; WER divides by the
//! reference word count and is not clamped.

use serde::{Deserialize, Serialize};

use crate::textnorm::{normalize, normalize_2d};

/// Which normalization a text metric applies to its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TextMode {
    #[default]
    Flat,
    /// Keep line breaks and intra-line spacing (text2d scoring).
    Layout,
}

impl TextMode {
    pub fn apply(self, s: &str) -> String {
        match self {
            TextMode::Flat => normalize(s),
            TextMode::Layout => normalize_2d(s),
        }
    }
}

/// Levenshtein distance over arbitrary sequences, two-row DP sized by the
/// shorter input. A shared prefix and suffix never cost anything, so they
/// are dropped before the DP.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[..a.len() - suffix], &b[..b.len() - suffix]);
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0usize; short.len() + 1];
    for (i, x) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

/// CER on already-normalized strings.
pub fn cer_normalized(pred: &str, reference: &str) -> f64 {
    let p: Vec<char> = pred.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    match (p.is_empty(), r.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => edit_distance(&p, &r) as f64 / p.len().max(r.len()).max(1) as f64,
    }
}

pub fn cer_with(pred: &str, reference: &str, mode: TextMode) -> f64 {
    cer_normalized(&mode.apply(pred), &mode.apply(reference))
}

pub fn cer(pred: &str, reference: &str) -> f64 {
    cer_with(pred, reference, TextMode::Flat)
}

/// Word-level edit decomposition: substitutions, deletions, insertions, and
/// reference word count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Align prediction words to reference words with a full DP table and walk
/// back one cost-minimal path, preferring diagonal, then deletion, then
/// insertion steps.
fn align_words(pred: &[&str], reference: &[&str]) -> EditCounts {
    let (n, m) = (reference.len(), pred.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for (j, cell) in dp[..=m].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != pred[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts {
        reference_words: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == pred[j - 1];
            if dp[(i - 1) * w + j - 1] + usize::from(!same) == here {
                counts.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Word-level (S, D, I, N) after flat normalization.
pub fn word_align_counts(pred: &str, reference: &str) -> EditCounts {
    let p = normalize(pred);
    let r = normalize(reference);
    let pw: Vec<&str> = p.split_whitespace().collect();
    let rw: Vec<&str> = r.split_whitespace().collect();
    align_words(&pw, &rw)
}

pub fn wer(pred: &str, reference: &str) -> f64 {
    let p = normalize(pred);
    let r = normalize(reference);
    match (p.is_empty(), r.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return 1.0,
        _ => {}
    }
    let pw: Vec<&str> = p.split_whitespace().collect();
    let rw: Vec<&str> = r.split_whitespace().collect();
    let c = align_words(&pw, &rw);
    c.errors() as f64 / c.reference_words.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-matrix Wagner-Fischer reference.
    fn full_matrix(a: &[char], b: &[char]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in d[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + c);
            }
        }
        d[a.len()][b.len()]
    }

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("", ""), 0);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(full_matrix(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("héllo", "hello"), 1);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc"), 0.0);
        assert_eq!(cer("", "abc"), 1.0);
        assert_eq!(cer("abc", "   "), 1.0);
        assert_eq!(cer(" ", "\t"), 0.0);
        assert_eq!(full_matrix(&chars("abcd"), &chars("abed")), 1);
        assert_eq!(cer("abcd", "abed"), 0.25);
    }

    #[test]
    fn cer_layout_mode_counts_spacing() {
        assert_eq!(cer("A    B", "A B"), 0.0);
        assert!(cer_with("A    B", "A B", TextMode::Layout) > 0.0);
        assert_eq!(cer_with("A\n\nB\n", "A\n\nB", TextMode::Layout), 0.0);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c", "a b c"), 0.0);
        assert_eq!(wer("a x c", "a b c"), 1.0 / 3.0);
        assert_eq!(wer("", "a b"), 1.0);
        assert_eq!(wer("a b", ""), 1.0);
        assert_eq!(wer("", " "), 0.0);
        // Insertions push WER past 1.
        assert_eq!(wer("a b c d e", "a"), 4.0);
    }

    #[test]
    fn word_counts_examples() {
        let c = |s, d, i, n| EditCounts {
            substitutions: s,
            deletions: d,
            insertions: i,
            reference_words: n,
        };
        assert_eq!(word_align_counts("a b", "a b"), c(0, 0, 0, 2));
        assert_eq!(word_align_counts("a b c d", "a b"), c(0, 0, 2, 2));
        assert_eq!(word_align_counts("x", "a b"), c(1, 1, 0, 2));
    }

    fn short() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!['a', 'b', 'c', 'd']), 0..=12)
            .prop_map(|v| v.into_iter().collect())
    }

    fn words() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["x", "y", "zz", "w"]), 0..8).prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn matches_full_matrix(a in short(), b in short()) {
            prop_assert_eq!(levenshtein(&a, &b), full_matrix(&chars(&a), &chars(&b)));
        }

        #[test]
        fn is_a_metric(a in short(), b in short(), c in short()) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn cer_bounded(a in short(), b in short()) {
            let v = cer(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(cer(&a, &a), 0.0);
        }

        #[test]
        fn word_counts_sum_to_distance(p in words(), r in words()) {
            let c = word_align_counts(&p, &r);
            let pw: Vec<&str> = p.split_whitespace().collect();
            let rw: Vec<&str> = r.split_whitespace().collect();
            prop_assert_eq!(c.errors(), edit_distance(&pw, &rw));
            prop_assert!(c.substitutions + c.deletions <= c.reference_words);
            let scaled = wer(&p, &r) * c.reference_words.max(1) as f64;
            prop_assert!((scaled - scaled.round()).abs() < 1e-9);
        }
    }
}
