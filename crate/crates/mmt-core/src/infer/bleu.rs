//! Corpus-level BLEU-4: clipped n-gram precisions, geometric mean, brevity
//! penalty, no smoothing.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Serialize)]
pub struct BleuReport {
    /// 0..100.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: u64,
    pub reference_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU against one reference per candidate.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::Data("empty corpus for BLEU".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates against {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=MAX_ORDER {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &c) in &cand_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += c.min(clip);
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1) as u64;
        }
    }
    let mut precisions = [0.0f64; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_len: cand_len,
        reference_len: ref_len,
    })
}

impl BleuReport {
    pub fn summary(&self) -> String {
        format!(
            "bleu={:.2} p1={:.4} p2={:.4} p3={:.4} p4={:.4} bp={:.4} cand_len={} ref_len={}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.candidate_len,
            self.reference_len
        )
    }
}

pub fn words(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        words(s)
    }

    #[test]
    fn identity_corpus_scores_100() {
        let corpus = vec![w("a b c d e"), w("the cat sat on the mat")];
        let report = corpus_bleu(&corpus, &corpus).unwrap();
        assert!((report.bleu - 100.0).abs() < 1e-9);
        assert_eq!(report.brevity_penalty, 1.0);
    }

    #[test]
    fn brevity_penalty_worked_instance() {
        // cand 4 tokens, ref 5: precisions all 1, bp = e^(1 - 5/4)
        let report = corpus_bleu(&[w("a b c d")], &[w("a b c d e")]).unwrap();
        let expect = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        assert!((report.bleu - expect).abs() < 1e-9);
        assert!((report.bleu - 77.88).abs() < 0.01);
        for p in report.precisions {
            assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn missing_4gram_gives_zero_with_precisions_reported() {
        // unigrams/bigrams/trigram partially match but no 4-gram does
        let report = corpus_bleu(&[w("a b c x")], &[w("a b c d")]).unwrap();
        assert_eq!(report.bleu, 0.0);
        assert!(report.precisions[0] > 0.0);
        assert_eq!(report.precisions[3], 0.0);
        assert_eq!(report.totals[3], 1);
    }

    #[test]
    fn clipping_limits_repeated_ngrams() {
        let report = corpus_bleu(&[w("the the the the")], &[w("the cat sat on the mat")]).unwrap();
        // "the" appears twice in the reference: clipped to 2 of 4
        assert_eq!(report.matches[0], 2);
        assert_eq!(report.totals[0], 4);
    }

    #[test]
    fn permutation_invariance() {
        let cands = vec![w("a b c d"), w("e f g h i")];
        let refs = vec![w("a b c d d"), w("e f g h")];
        let fwd = corpus_bleu(&cands, &refs).unwrap();
        let rev = corpus_bleu(
            &[cands[1].clone(), cands[0].clone()],
            &[refs[1].clone(), refs[0].clone()],
        )
        .unwrap();
        assert_eq!(fwd.bleu, rev.bleu);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(corpus_bleu(&[], &[]), Err(Error::Data(_))));
    }
}
