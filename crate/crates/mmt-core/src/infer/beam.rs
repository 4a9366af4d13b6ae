//! Greedy and beam-search decoding.
//!
//! Beam scores are length-normalized log-probabilities (power 1.0). Finished
//! hypotheses are frozen; the search ends when no live hypothesis can beat
//! the best finished one even with perfect future tokens, or when every live
//! hypothesis reaches `max_len` (eos is then appended). Ties break to the
//! lowest token id.

use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::MultimodalTransformer;
use crate::rng::RngStream;
use crate::tensor::Var;

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// Generated tokens (bos excluded, eos included once finished).
    pub tokens: Vec<u32>,
    /// Cumulative log-probability; non-increasing as tokens append.
    pub logprob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Length-normalized score (power 1.0).
    pub fn score(&self) -> f64 {
        self.logprob / self.tokens.len().max(1) as f64
    }
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let denom: f64 = row.iter().map(|&z| f64::from(z - max).exp()).sum();
    let logz = f64::from(max) + denom.ln();
    row.iter().map(|&z| f64::from(z) - logz).collect()
}

/// Run one decode step and return the next-token log distribution.
fn next_token_logprobs(
    model: &mut MultimodalTransformer,
    prefix: &[u32],
    enc_out: Var,
    src_mask: &[bool],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mask = vec![true; prefix.len()];
    let logits = model.decode(prefix, &mask, enc_out, src_mask, rng, false)?;
    let v = model.tape().shape(logits)[1];
    let t = model.tape().shape(logits)[0];
    Ok(log_softmax_row(&model.tape().data(logits)[(t - 1) * v..t * v]))
}

fn encode_src(
    model: &mut MultimodalTransformer,
    src_ids: &[u32],
    src_mask: &[bool],
    feature: &[f32],
    rng: &mut RngStream,
) -> Result<Var> {
    if src_ids.is_empty() || !src_mask.iter().any(|&m| m) {
        return Err(Error::Data("empty source sentence".into()));
    }
    let visual = model.project_features(feature)?;
    model.encode(src_ids, src_mask, visual, rng, false)
}

/// Argmax decoding; ties go to the lowest token id. Returns the hypothesis
/// (eos-terminated) for score comparison against beam search.
pub fn greedy_decode(
    model: &mut MultimodalTransformer,
    src_ids: &[u32],
    src_mask: &[bool],
    feature: &[f32],
    max_len: usize,
) -> Result<BeamHypothesis> {
    let mut rng = RngStream::named(0, "decode");
    let enc = encode_src(model, src_ids, src_mask, feature, &mut rng)?;
    let mut prefix = vec![BOS];
    let mut hyp = BeamHypothesis { tokens: Vec::new(), logprob: 0.0, finished: false };
    while hyp.tokens.len() < max_len {
        let logp = next_token_logprobs(model, &prefix, enc, src_mask, &mut rng)?;
        let force_eos = hyp.tokens.len() + 1 >= max_len;
        let best = if force_eos {
            EOS as usize
        } else {
            let mut best = 0usize;
            for (tok, &lp) in logp.iter().enumerate().skip(1) {
                if lp > logp[best] {
                    best = tok;
                }
            }
            best
        };
        hyp.logprob += logp[best];
        hyp.tokens.push(best as u32);
        prefix.push(best as u32);
        if best as u32 == EOS {
            hyp.finished = true;
            break;
        }
    }
    if !hyp.finished {
        hyp.tokens.push(EOS);
        hyp.finished = true;
    }
    Ok(hyp)
}

/// Beam search with `beam` live hypotheses.
pub fn beam_search(
    model: &mut MultimodalTransformer,
    src_ids: &[u32],
    src_mask: &[bool],
    feature: &[f32],
    beam: usize,
    max_len: usize,
) -> Result<BeamHypothesis> {
    if beam == 0 {
        return Err(Error::Data("beam must be >= 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Data("max_len must be >= 1".into()));
    }
    let mut rng = RngStream::named(0, "decode");
    let enc = encode_src(model, src_ids, src_mask, feature, &mut rng)?;

    let mut live: Vec<BeamHypothesis> =
        vec![BeamHypothesis { tokens: Vec::new(), logprob: 0.0, finished: false }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    while !live.is_empty() {
        // (cumulative logprob, token, origin) for every live expansion
        let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&hyp.tokens);
            let logp = next_token_logprobs(model, &prefix, enc, src_mask, &mut rng)?;
            if hyp.tokens.len() + 1 >= max_len {
                // cap reached: eos is the only continuation
                candidates.push((hyp.logprob + logp[EOS as usize], EOS, h));
            } else {
                for (tok, &lp) in logp.iter().enumerate() {
                    candidates.push((hyp.logprob + lp, tok as u32, h));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut next_live = Vec::with_capacity(beam);
        for &(lp, tok, h) in candidates.iter().take(beam) {
            let mut tokens = live[h].tokens.clone();
            tokens.push(tok);
            let hyp = BeamHypothesis { tokens, logprob: lp, finished: tok == EOS };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;

        if !finished.is_empty() {
            let best_finished =
                finished.iter().map(BeamHypothesis::score).fold(f64::NEG_INFINITY, f64::max);
            // optimistic bound: zero-cost future tokens out to the length cap
            let best_live_bound = live
                .iter()
                .map(|h| h.logprob / (max_len as f64))
                .fold(f64::NEG_INFINITY, f64::max);
            if live.is_empty() || best_live_bound <= best_finished {
                break;
            }
        }
    }

    finished
        .into_iter()
        .max_by(|a, b| {
            a.score()
                .partial_cmp(&b.score())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| Error::Data("beam search produced no finished hypothesis".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> MultimodalTransformer {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 16,
            ffn_dim: 32,
            heads: 2,
            dropout: 0.0,
            d_feat: 4,
            max_positions: 24,
            vocab_size: 10,
        };
        let mut rng = RngStream::named(seed, "init");
        MultimodalTransformer::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn beam_one_equals_greedy() {
        let mut m = tiny_model(3);
        for seed in 0..5u64 {
            let src = vec![4, 5 + (seed % 3) as u32];
            let mask = vec![true; src.len()];
            let feat = [0.2f32 * seed as f32, -0.1, 0.4, 0.0];
            let g = greedy_decode(&mut m, &src, &mask, &feat, 12).unwrap();
            m.reset();
            let b = beam_search(&mut m, &src, &mask, &feat, 1, 12).unwrap();
            m.reset();
            assert_eq!(g.tokens, b.tokens, "seed {seed}");
        }
    }

    #[test]
    fn max_len_appends_eos() {
        let mut m = tiny_model(4);
        let hyp = beam_search(&mut m, &[4, 5], &[true, true], &[0.1; 4], 2, 3).unwrap();
        assert!(hyp.finished);
        assert_eq!(*hyp.tokens.last().unwrap(), EOS);
        assert!(hyp.tokens.len() <= 3);
    }

    #[test]
    fn empty_source_rejected() {
        let mut m = tiny_model(4);
        assert!(matches!(
            beam_search(&mut m, &[], &[], &[0.1; 4], 2, 5),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn logprob_is_non_increasing_in_length() {
        let mut m = tiny_model(5);
        let hyp = greedy_decode(&mut m, &[4, 6], &[true, true], &[0.3; 4], 16).unwrap();
        assert!(hyp.logprob <= 0.0);
    }

    #[test]
    fn decoding_is_deterministic() {
        let mut m = tiny_model(6);
        let a = beam_search(&mut m, &[4, 5, 6], &[true; 3], &[0.5; 4], 3, 10).unwrap();
        m.reset();
        let b = beam_search(&mut m, &[4, 5, 6], &[true; 3], &[0.5; 4], 3, 10).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.logprob, b.logprob);
    }
}
