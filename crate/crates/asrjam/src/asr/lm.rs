//! Character n-gram language model for shallow fusion during beam decoding.

use crate::alphabet::{Alphabet, Transcript};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Add-k smoothed character n-gram scorer with stupid backoff to shorter
/// contexts. Scores are natural-log probabilities (always <= 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmScorer {
    pub order: usize,
    /// Shallow-fusion weight applied to LM scores during decoding.
    pub weight: f64,
    /// Additive bonus per emitted word.
    pub word_bonus: f64,
    /// context (label indices, len < order) -> normalized char distribution.
    tables: BTreeMap<Vec<u8>, Vec<f64>>,
    backoff_penalty: f64,
}

const ADD_K: f64 = 0.1;

impl LmScorer {
    /// Estimate tables of every order up to `order` from the corpus
    /// transcripts.
    pub fn train(transcripts: &[Transcript], order: usize, weight: f64, word_bonus: f64) -> Self {
        assert!(order >= 1);
        let alpha = Alphabet;
        let classes = alpha.len();
        let mut counts: BTreeMap<Vec<u8>, Vec<f64>> = BTreeMap::new();
        for tr in transcripts {
            let labels: Vec<u8> = tr.labels().iter().map(|&l| l as u8).collect();
            for i in 0..labels.len() {
                let lo = i.saturating_sub(order - 1);
                for j in lo..=i {
                    let ctx = labels[j..i].to_vec();
                    let row = counts
                        .entry(ctx)
                        .or_insert_with(|| vec![0.0; classes]);
                    row[labels[i] as usize] += 1.0;
                }
            }
        }
        let tables = counts
            .into_iter()
            .map(|(ctx, row)| {
                let total: f64 = row.iter().sum::<f64>() + ADD_K * classes as f64;
                let probs = row.iter().map(|&c| (c + ADD_K) / total).collect();
                (ctx, probs)
            })
            .collect();
        LmScorer {
            order,
            weight,
            word_bonus,
            tables,
            backoff_penalty: 0.4f64.ln(),
        }
    }

    /// log P(next | context). The longest known suffix of `context` is used;
    /// each backoff step applies a fixed penalty. Unknown unigram context
    /// falls back to a uniform distribution.
    pub fn log_prob(&self, context: &[usize], next: usize) -> f64 {
        let classes = Alphabet.len() as f64;
        let start = context.len().saturating_sub(self.order - 1);
        let mut penalty = 0.0;
        for lo in start..=context.len() {
            let key: Vec<u8> = context[lo..].iter().map(|&l| l as u8).collect();
            if let Some(row) = self.tables.get(&key) {
                return penalty + row[next].ln();
            }
            penalty += self.backoff_penalty;
        }
        penalty + (1.0 / classes).ln()
    }

    /// Total LM log-probability of a label sequence.
    pub fn score_sequence(&self, labels: &[usize]) -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| self.log_prob(&labels[..i], l))
            .sum()
    }

    /// Number of stored context tables (diagnostics).
    pub fn num_contexts(&self) -> usize {
        self.tables.len()
    }
}

/// Words in a label sequence: maximal runs of non-space characters.
pub fn word_count(labels: &[usize]) -> usize {
    let space = Alphabet.char_to_index(' ').unwrap();
    let mut count = 0;
    let mut in_word = false;
    for &l in labels {
        if l == space {
            in_word = false;
        } else if !in_word {
            count += 1;
            in_word = true;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<Transcript> {
        ["the cat sat", "the dog sat", "the cat ran"]
            .iter()
            .map(|s| Transcript::new(*s).unwrap())
            .collect()
    }

    #[test]
    fn conditional_distributions_are_normalized() {
        let lm = LmScorer::train(&corpus(), 4, 1.0, 0.0);
        for row in lm.tables.values() {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn log_probs_are_non_positive() {
        let lm = LmScorer::train(&corpus(), 4, 1.0, 0.0);
        let alpha = Alphabet;
        let ctx = alpha.encode("the ").unwrap();
        for next in 0..alpha.len() {
            assert!(lm.log_prob(&ctx, next) <= 0.0);
        }
    }

    #[test]
    fn seen_continuations_beat_unseen() {
        let lm = LmScorer::train(&corpus(), 4, 1.0, 0.0);
        let alpha = Alphabet;
        let ctx = alpha.encode("th").unwrap();
        let e = alpha.char_to_index('e').unwrap();
        let q = alpha.char_to_index('q').unwrap();
        assert!(lm.log_prob(&ctx, e) > lm.log_prob(&ctx, q));
    }

    #[test]
    fn word_count_rules() {
        let alpha = Alphabet;
        assert_eq!(word_count(&alpha.encode("a b c").unwrap()), 3);
        assert_eq!(word_count(&alpha.encode("abc").unwrap()), 1);
        assert_eq!(word_count(&[]), 0);
        assert_eq!(word_count(&alpha.encode(" a  b ").unwrap()), 2);
    }
}
