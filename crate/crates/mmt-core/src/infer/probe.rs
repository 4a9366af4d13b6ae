//! Representation-similarity probe and incongruent decoding.

use serde::Serialize;

use crate::data::features::FeatureTable;
use crate::data::vocab::{Vocabulary, EOS, PAD, UNK};
use crate::data::{detokenize, ParallelExample};
use crate::error::{Error, Result};
use crate::model::MultimodalTransformer;

use super::beam::beam_search;
use super::bleu::{corpus_bleu, BleuReport};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct SimilarityReport {
    /// Cosine per example, aligned with the probed ids; NaN marks an
    /// undefined (zero-norm) entry.
    pub values: Vec<f64>,
    /// Mean over defined entries.
    pub mean: f64,
    /// Defined values bucketed over [-1, 1].
    pub histogram: [u64; HISTOGRAM_BINS],
    pub undefined: usize,
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += f64::from(x) * f64::from(y);
        na += f64::from(x) * f64::from(x);
        nb += f64::from(y) * f64::from(y);
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Cosine similarity of the two post-projector representations per image id,
/// at eval mode. The model is read-only apart from scratch forward state.
pub fn similarity_probe(
    model: &mut MultimodalTransformer,
    image_ids: &[String],
    syn: &FeatureTable,
    aut: &FeatureTable,
) -> Result<SimilarityReport> {
    if image_ids.is_empty() {
        return Err(Error::Data("no image ids to probe".into()));
    }
    let mut values = Vec::with_capacity(image_ids.len());
    let mut histogram = [0u64; HISTOGRAM_BINS];
    let mut undefined = 0usize;
    let mut sum = 0.0f64;
    let mut defined = 0usize;
    for id in image_ids {
        let fs = syn
            .get(id)
            .ok_or_else(|| Error::Data(format!("image id {id} missing from synthetic table")))?;
        let fa = aut
            .get(id)
            .ok_or_else(|| Error::Data(format!("image id {id} missing from authentic table")))?;
        let hs = model.project_features(fs)?;
        let ha = model.project_features(fa)?;
        let value = cosine(model.tape().data(hs), model.tape().data(ha));
        model.reset();
        match value {
            Some(v) => {
                sum += v;
                defined += 1;
                let bin = (((v + 1.0) / 2.0) * HISTOGRAM_BINS as f64) as usize;
                histogram[bin.min(HISTOGRAM_BINS - 1)] += 1;
                values.push(v);
            }
            None => {
                undefined += 1;
                values.push(f64::NAN);
            }
        }
    }
    let mean = if defined > 0 { sum / defined as f64 } else { f64::NAN };
    Ok(SimilarityReport { values, mean, histogram, undefined })
}

impl SimilarityReport {
    pub fn summary(&self) -> String {
        format!(
            "mean_cosine={:.4} examples={} undefined={}",
            self.mean,
            self.values.len(),
            self.undefined
        )
    }
}

/// Render a decoded id sequence as a detokenized sentence.
pub fn render_tokens(ids: &[u32], vocab: &Vocabulary) -> String {
    let tokens: Vec<String> = ids
        .iter()
        .filter(|&&id| id != EOS && id != PAD && id != crate::data::vocab::BOS)
        .map(|&id| {
            if id == UNK {
                "<unk>".to_string()
            } else {
                vocab.symbol_of(id).unwrap_or("<unk>").to_string()
            }
        })
        .collect();
    detokenize(&tokens)
}

/// Beam-decode a corpus with features from `table` (or all-zero features
/// when `zero_features` is set). Output lines are ordered by input index.
pub fn translate_corpus(
    model: &mut MultimodalTransformer,
    examples: &[ParallelExample],
    table: &FeatureTable,
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
    zero_features: bool,
) -> Result<Vec<String>> {
    let zeros = vec![0.0f32; table.dim()];
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let feature = if zero_features {
            zeros.as_slice()
        } else {
            table.get(&ex.image_id).ok_or_else(|| {
                Error::Data(format!("image id {} missing from feature table", ex.image_id))
            })?
        };
        let mask = vec![true; ex.src.len()];
        let hyp = beam_search(model, &ex.src, &mask, feature, beam, max_len)?;
        model.reset();
        out.push(render_tokens(&hyp.tokens, vocab));
    }
    Ok(out)
}

/// Decode twice, with real features and with all-zero features, and report
/// BLEU for both plus their difference (congruent minus zeroed).
pub fn incongruent_decode(
    model: &mut MultimodalTransformer,
    examples: &[ParallelExample],
    table: &FeatureTable,
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
) -> Result<(BleuReport, BleuReport, f64)> {
    let references: Vec<Vec<String>> = examples
        .iter()
        .map(|ex| {
            let body = &ex.tgt[1..ex.tgt.len() - 1];
            super::bleu::words(&render_tokens(body, vocab))
        })
        .collect();
    let congruent = translate_corpus(model, examples, table, vocab, beam, max_len, false)?;
    let zeroed = translate_corpus(model, examples, table, vocab, beam, max_len, true)?;
    let cong_words: Vec<Vec<String>> = congruent.iter().map(|l| super::bleu::words(l)).collect();
    let zero_words: Vec<Vec<String>> = zeroed.iter().map(|l| super::bleu::words(l)).collect();
    let cong_report = corpus_bleu(&cong_words, &references)?;
    let zero_report = corpus_bleu(&zero_words, &references)?;
    let delta = cong_report.bleu - zero_report.bleu;
    Ok((cong_report, zero_report, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::RngStream;

    fn tiny_model() -> MultimodalTransformer {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 16,
            ffn_dim: 32,
            heads: 2,
            dropout: 0.0,
            d_feat: 4,
            max_positions: 16,
            vocab_size: 10,
        };
        let mut rng = RngStream::named(8, "init");
        MultimodalTransformer::new(cfg, &mut rng).unwrap()
    }

    fn table(entries: &[(&str, [f32; 4])]) -> FeatureTable {
        let mut t = FeatureTable::new(4);
        for (id, v) in entries {
            t.insert(id.to_string(), v.to_vec()).unwrap();
        }
        t
    }

    #[test]
    fn identical_tables_give_cosine_one() {
        let mut m = tiny_model();
        let t = table(&[("a", [0.5, -0.2, 1.0, 0.3]), ("b", [1.0, 0.0, 0.0, -1.0])]);
        let ids = vec!["a".to_string(), "b".to_string()];
        let report = similarity_probe(&mut m, &ids, &t, &t).unwrap();
        for v in &report.values {
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert!((report.mean - 1.0).abs() < 1e-6);
        assert_eq!(report.undefined, 0);
    }

    #[test]
    fn similarity_values_bounded() {
        let mut m = tiny_model();
        let syn = table(&[("a", [0.5, -0.2, 1.0, 0.3])]);
        let aut = table(&[("a", [-0.4, 2.0, 0.1, 0.0])]);
        let ids = vec!["a".to_string()];
        let report = similarity_probe(&mut m, &ids, &syn, &aut).unwrap();
        assert!(report.values[0].abs() <= 1.0);
    }

    #[test]
    fn probe_is_read_only() {
        let mut m = tiny_model();
        let before: Vec<Vec<f32>> = m
            .named_params()
            .iter()
            .map(|(_, v)| m.tape().data(*v).to_vec())
            .collect();
        let t = table(&[("a", [0.5, -0.2, 1.0, 0.3])]);
        let ids = vec!["a".to_string()];
        similarity_probe(&mut m, &ids, &t, &t).unwrap();
        for ((_, v), snap) in m.named_params().iter().zip(&before) {
            assert_eq!(m.tape().data(*v), &snap[..], "probe mutated parameters");
        }
    }

    #[test]
    fn missing_id_is_data_error() {
        let mut m = tiny_model();
        let t = table(&[("a", [0.5, -0.2, 1.0, 0.3])]);
        let ids = vec!["ghost".to_string()];
        assert!(matches!(similarity_probe(&mut m, &ids, &t, &t), Err(Error::Data(_))));
    }

    #[test]
    fn cosine_of_orthogonal_constructed_pair_is_zero() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
    }
}
