//! Word and character error rates under minimum-edit-distance alignment,
//! pooled corpus aggregation, and the per-word accuracy analysis.

use crate::alphabet::Transcript;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Edit-operation counts from an alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl ErrorCounts {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// (S + D + I) / N; may exceed 1 when insertions dominate.
    pub fn rate(&self) -> f64 {
        self.edits() as f64 / self.reference_length as f64
    }
}

/// One step of an alignment path over (reference, hypothesis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    /// Reference token i aligned to an identical hypothesis token.
    Match { ref_idx: usize },
    /// Reference token i replaced by a different hypothesis token.
    Substitute { ref_idx: usize },
    /// Reference token i absent from the hypothesis.
    Delete { ref_idx: usize },
    /// Hypothesis token with no reference counterpart.
    Insert,
}

/// Minimum-edit-distance alignment with unit costs. Ties are broken by
/// preferring substitutions (diagonal moves) over insert+delete pairs.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (ErrorCounts, Vec<AlignOp>) {
    let m = reference.len();
    let n = hypothesis.len();
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=n {
        d[0][j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + cost)
                .min(d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1);
        }
    }
    // Backtrace, diagonal first.
    let mut ops = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (m, n);
    let mut counts = ErrorCounts {
        reference_length: m,
        ..Default::default()
    };
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + cost {
                if cost == 0 {
                    ops.push(AlignOp::Match { ref_idx: i - 1 });
                } else {
                    ops.push(AlignOp::Substitute { ref_idx: i - 1 });
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(AlignOp::Delete { ref_idx: i - 1 });
            counts.deletions += 1;
            i -= 1;
        } else {
            ops.push(AlignOp::Insert);
            counts.insertions += 1;
            j -= 1;
        }
    }
    ops.reverse();
    (counts, ops)
}

/// Word error rate of a hypothesis against a non-empty reference.
pub fn wer(reference: &Transcript, hypothesis: &Transcript) -> Result<(f64, ErrorCounts)> {
    let ref_words = reference.words();
    if ref_words.is_empty() {
        return Err(Error::domain("wer reference must be non-empty"));
    }
    let hyp_words = hypothesis.words();
    let (counts, _) = align(&ref_words, &hyp_words);
    Ok((counts.rate(), counts))
}

/// Character error rate (spaces count as characters).
pub fn cer(reference: &Transcript, hypothesis: &Transcript) -> Result<(f64, ErrorCounts)> {
    if reference.is_empty() {
        return Err(Error::domain("cer reference must be non-empty"));
    }
    let ref_chars: Vec<char> = reference.as_str().chars().collect();
    let hyp_chars: Vec<char> = hypothesis.as_str().chars().collect();
    let (counts, _) = align(&ref_chars, &hyp_chars);
    Ok((counts.rate(), counts))
}

/// Pooled corpus-level aggregation: sum(S+D+I) / sum(N) across utterances
/// (rates above 100% stay representable).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Pooled {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
    pub utterances: usize,
}

impl Pooled {
    pub fn add(&mut self, counts: &ErrorCounts) {
        self.substitutions += counts.substitutions;
        self.deletions += counts.deletions;
        self.insertions += counts.insertions;
        self.reference_length += counts.reference_length;
        self.utterances += 1;
    }

    pub fn rate(&self) -> f64 {
        if self.reference_length == 0 {
            0.0
        } else {
            (self.substitutions + self.deletions + self.insertions) as f64
                / self.reference_length as f64
        }
    }
}

/// Accuracy of one vocabulary word before and after an attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordStats {
    pub word: String,
    pub count: usize,
    pub length: usize,
    pub clean_accuracy: f64,
    pub attacked_accuracy: f64,
    pub accuracy_drop: f64,
}

/// Per reference-word-occurrence correctness: a word counts as correct iff
/// the edit-distance alignment maps it to an identical hypothesis word.
pub fn word_correctness(reference: &Transcript, hypothesis: &Transcript) -> Vec<bool> {
    let ref_words = reference.words();
    let hyp_words = hypothesis.words();
    let (_, ops) = align(&ref_words, &hyp_words);
    let mut correct = vec![false; ref_words.len()];
    for op in ops {
        if let AlignOp::Match { ref_idx } = op {
            correct[ref_idx] = true;
        }
    }
    correct
}

/// Aggregate per-word accuracies from paired clean/attacked transcriptions.
/// Input: (reference, clean hypothesis, attacked hypothesis) per utterance.
pub fn per_word_analysis(
    results: &[(Transcript, Transcript, Transcript)],
) -> Vec<WordStats> {
    #[derive(Default)]
    struct Tally {
        count: usize,
        clean_ok: usize,
        attacked_ok: usize,
    }
    let mut table: BTreeMap<String, Tally> = BTreeMap::new();
    for (reference, clean_hyp, attacked_hyp) in results {
        let words = reference.words();
        let clean_ok = word_correctness(reference, clean_hyp);
        let attacked_ok = word_correctness(reference, attacked_hyp);
        for ((word, c_ok), a_ok) in words.iter().zip(clean_ok).zip(attacked_ok) {
            let t = table.entry((*word).to_string()).or_default();
            t.count += 1;
            t.clean_ok += usize::from(c_ok);
            t.attacked_ok += usize::from(a_ok);
        }
    }
    table
        .into_iter()
        .map(|(word, t)| {
            let clean_accuracy = t.clean_ok as f64 / t.count as f64;
            let attacked_accuracy = t.attacked_ok as f64 / t.count as f64;
            WordStats {
                length: word.chars().count(),
                word,
                count: t.count,
                clean_accuracy,
                attacked_accuracy,
                accuracy_drop: clean_accuracy - attacked_accuracy,
            }
        })
        .collect()
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
