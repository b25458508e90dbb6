//! CTC decoding: best-path (greedy) and beam search with shallow LM fusion.

use super::lm::LmScorer;
use crate::alphabet::{Alphabet, Transcript};
use ndarray::ArrayView2;

/// Per-frame argmax with ties broken toward the lowest class index, then
/// collapse repeats and drop blanks.
pub fn greedy_from_log_probs(log_probs: ArrayView2<'_, f64>) -> Transcript {
    let alpha = Alphabet;
    let blank = alpha.blank();
    let mut labels = Vec::new();
    let mut last = blank;
    for row in log_probs.outer_iter() {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        if best != blank && best != last {
            labels.push(best);
        }
        last = best;
    }
    Transcript::new(alpha.decode(&labels).trim().to_string()).expect("alphabet-closed decode")
}

#[derive(Clone)]
struct Beam {
    prefix: Vec<usize>,
    last: usize,
    score: f64,
}

/// Path-synchronous beam search over frame alignments. Each hypothesis
/// scores acoustic log-probability plus, on every newly emitted character,
/// `lm.weight * log P_lm(char | prefix)` and `lm.word_bonus` at word starts.
/// With width 1 and zero LM weight this reduces exactly to the greedy
/// best-path decode.
pub fn beam_from_log_probs(
    log_probs: ArrayView2<'_, f64>,
    lm: &LmScorer,
    beam_width: usize,
) -> Transcript {
    assert!(beam_width >= 1, "beam width must be at least 1");
    let alpha = Alphabet;
    let blank = alpha.blank();
    let space = alpha.char_to_index(' ').unwrap();
    let classes = alpha.classes();

    let mut beams = vec![Beam {
        prefix: Vec::new(),
        last: blank,
        score: 0.0,
    }];
    for row in log_probs.outer_iter() {
        // key: (prefix, last) -> index into `next`
        let mut index: std::collections::HashMap<(Vec<usize>, usize), usize> =
            std::collections::HashMap::new();
        let mut next: Vec<Beam> = Vec::with_capacity(beams.len() * classes);
        for beam in &beams {
            for c in 0..classes {
                let mut score = beam.score + row[c];
                let mut prefix = beam.prefix.clone();
                if c != blank && c != beam.last {
                    let starts_word =
                        c != space && prefix.last().map_or(true, |&p| p == space);
                    score += lm.weight * lm.log_prob(&prefix, c);
                    if starts_word {
                        score += lm.word_bonus;
                    }
                    prefix.push(c);
                }
                let key = (prefix, c);
                match index.get(&key) {
                    Some(&i) => {
                        if score > next[i].score {
                            next[i].score = score;
                        }
                    }
                    None => {
                        index.insert(key.clone(), next.len());
                        next.push(Beam {
                            prefix: key.0,
                            last: c,
                            score,
                        });
                    }
                }
            }
        }
        // Stable sort: equal scores keep lower class indices first, matching
        // the greedy tie-break.
        next.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        next.truncate(beam_width);
        beams = next;
    }
    let best = &beams[0];
    Transcript::new(alpha.decode(&best.prefix).trim().to_string())
        .expect("alphabet-closed decode")
}

/// Exhaustive best-path search used as a test oracle: enumerates all
/// classes^T alignments and scores them with the same acoustic + LM rule.
pub fn exhaustive_best_path(
    log_probs: ArrayView2<'_, f64>,
    lm: &LmScorer,
) -> Transcript {
    let alpha = Alphabet;
    let blank = alpha.blank();
    let (t_len, classes) = log_probs.dim();
    let mut best_score = f64::NEG_INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut path = vec![0usize; t_len];
    loop {
        let acoustic: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &c)| log_probs[[t, c]])
            .sum();
        let collapsed = crate::oracle::ctc_collapse(&path, blank);
        let score = acoustic
            + lm.weight * lm.score_sequence(&collapsed)
            + lm.word_bonus * super::lm::word_count(&collapsed) as f64;
        if score > best_score {
            best_score = score;
            best = collapsed;
        }
        let mut i = 0;
        loop {
            if i == t_len {
                return Transcript::new(alpha.decode(&best).trim().to_string()).unwrap();
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::Alphabet;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn one_hot_frames(symbols: &[usize]) -> Array2<f64> {
        let classes = Alphabet.classes();
        let mut m = Array2::from_elem((symbols.len(), classes), -20.0);
        for (t, &s) in symbols.iter().enumerate() {
            m[[t, s]] = 0.0;
        }
        m
    }

    #[test]
    fn greedy_collapses_repeats_and_blanks() {
        let alpha = Alphabet;
        let a = alpha.char_to_index('a').unwrap();
        let b = alpha.char_to_index('b').unwrap();
        let blank = alpha.blank();
        let lp = one_hot_frames(&[a, a, blank, b]);
        assert_eq!(greedy_from_log_probs(lp.view()).as_str(), "ab");
    }

    #[test]
    fn greedy_all_blank_is_empty() {
        let blank = Alphabet.blank();
        let lp = one_hot_frames(&[blank, blank, blank]);
        assert_eq!(greedy_from_log_probs(lp.view()).as_str(), "");
    }

    #[test]
    fn greedy_blank_separates_repeats() {
        let alpha = Alphabet;
        let a = alpha.char_to_index('a').unwrap();
        let blank = alpha.blank();
        let lp = one_hot_frames(&[a, blank, a]);
        assert_eq!(greedy_from_log_probs(lp.view()).as_str(), "aa");
    }

    #[test]
    fn beam_width_one_without_lm_equals_greedy() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let lm = LmScorer::train(
            &[crate::alphabet::Transcript::new("xyz").unwrap()],
            2,
            0.0,
            0.0,
        );
        for _ in 0..100 {
            let t_len = rng.gen_range(1..12);
            let lp = Array2::from_shape_fn((t_len, Alphabet.classes()), |_| {
                rng.gen_range(-5.0..0.0)
            });
            let g = greedy_from_log_probs(lp.view());
            let b = beam_from_log_probs(lp.view(), &lm, 1);
            assert_eq!(g, b);
        }
    }

    #[test]
    fn lm_prefers_real_word_on_toy_lattice() {
        // 3-frame lattice where the acoustics slightly prefer "thx" but the
        // LM knows only "the".
        let alpha = Alphabet;
        let t = alpha.char_to_index('t').unwrap();
        let h = alpha.char_to_index('h').unwrap();
        let e = alpha.char_to_index('e').unwrap();
        let x = alpha.char_to_index('x').unwrap();
        let mut lp = Array2::from_elem((3, alpha.classes()), -12.0);
        lp[[0, t]] = -0.1;
        lp[[1, h]] = -0.1;
        lp[[2, x]] = -0.6;
        lp[[2, e]] = -0.9; // acoustically second place
        let corpus: Vec<_> = ["the", "the", "the end"]
            .iter()
            .map(|s| crate::alphabet::Transcript::new(*s).unwrap())
            .collect();
        let lm = LmScorer::train(&corpus, 4, 1.5, 0.0);

        let no_lm = LmScorer::train(&corpus, 4, 0.0, 0.0);
        assert_eq!(beam_from_log_probs(lp.view(), &no_lm, 8).as_str(), "thx");
        let decoded = beam_from_log_probs(lp.view(), &lm, 8);
        assert_eq!(decoded.as_str(), "the");
        // exhaustive scoring agrees
        assert_eq!(exhaustive_best_path(lp.view(), &lm), decoded);
    }

    #[test]
    fn full_width_beam_matches_exhaustive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        // Tiny effective alphabet: mass on {a, b, space, blank} so the
        // exhaustive enumeration stays cheap while classes stay 29.
        let alpha = Alphabet;
        let live = [
            alpha.char_to_index('a').unwrap(),
            alpha.char_to_index('b').unwrap(),
            alpha.char_to_index(' ').unwrap(),
            alpha.blank(),
        ];
        let corpus: Vec<_> = ["ab a", "ba b", "ab ab"]
            .iter()
            .map(|s| crate::alphabet::Transcript::new(*s).unwrap())
            .collect();
        let lm = LmScorer::train(&corpus, 3, 0.7, -0.2);
        for _ in 0..5 {
            let t_len = rng.gen_range(2..=4);
            let mut lp = Array2::from_elem((t_len, alpha.classes()), -30.0);
            for t in 0..t_len {
                for &c in &live {
                    lp[[t, c]] = rng.gen_range(-3.0..0.0);
                }
            }
            // Width >= number of reachable states = exhaustive coverage.
            let wide = beam_from_log_probs(lp.view(), &lm, 100_000);
            let oracle = exhaustive_best_path(lp.view(), &lm);
            assert_eq!(wide, oracle);
        }
    }
}
