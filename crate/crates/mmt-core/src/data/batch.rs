//! Parallel examples and token-budget batching.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::features::FeatureTable;
use super::vocab::{Vocabulary, BOS, EOS, PAD};

/// One sentence pair plus the image id resolving its two feature vectors.
#[derive(Debug, Clone)]
pub struct ParallelExample {
    pub src: Vec<u32>,
    /// bos/eos framed.
    pub tgt: Vec<u32>,
    pub image_id: String,
}

impl ParallelExample {
    /// Tokens this example contributes to the batch budget.
    pub fn cost(&self) -> usize {
        self.src.len().max(self.tgt.len())
    }
}

/// Padded batch: id matrices with boolean masks (true on real tokens) plus
/// one feature row per example for each stream.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src_ids: Vec<u32>,
    pub src_mask: Vec<bool>,
    pub tgt_ids: Vec<u32>,
    pub tgt_mask: Vec<bool>,
    pub d_feat: usize,
    pub syn_feats: Vec<f32>,
    pub aut_feats: Vec<f32>,
    /// Positions of the members in the original example list.
    pub example_indices: Vec<usize>,
}

impl Batch {
    pub fn src_row(&self, b: usize) -> (&[u32], &[bool]) {
        let n = self.src_len;
        (&self.src_ids[b * n..(b + 1) * n], &self.src_mask[b * n..(b + 1) * n])
    }

    pub fn tgt_row(&self, b: usize) -> (&[u32], &[bool]) {
        let n = self.tgt_len;
        (&self.tgt_ids[b * n..(b + 1) * n], &self.tgt_mask[b * n..(b + 1) * n])
    }

    pub fn syn_row(&self, b: usize) -> &[f32] {
        &self.syn_feats[b * self.d_feat..(b + 1) * self.d_feat]
    }

    pub fn aut_row(&self, b: usize) -> &[f32] {
        &self.aut_feats[b * self.d_feat..(b + 1) * self.d_feat]
    }

    /// Real (unpadded) target token count, framing included.
    pub fn real_tgt_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }
}

/// Read an aligned parallel corpus of already-segmented text plus its image
/// index, encoding with the shared vocabulary. Targets get bos/eos framing.
pub fn read_parallel_corpus(
    src_path: &Path,
    tgt_path: &Path,
    index_path: &Path,
    vocab: &Vocabulary,
) -> Result<Vec<ParallelExample>> {
    let src_text = std::fs::read_to_string(src_path)?;
    let tgt_text = std::fs::read_to_string(tgt_path)?;
    let ids = super::features::load_image_index(index_path)?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() || src_lines.len() != ids.len() {
        return Err(Error::Data(format!(
            "unaligned corpus: {} source, {} target, {} image lines",
            src_lines.len(),
            tgt_lines.len(),
            ids.len()
        )));
    }
    let mut examples = Vec::with_capacity(src_lines.len());
    for (i, ((s, t), image_id)) in src_lines.iter().zip(&tgt_lines).zip(ids).enumerate() {
        let src = vocab.encode_line(s);
        let mut tgt = vec![BOS];
        tgt.extend(vocab.encode_line(t));
        tgt.push(EOS);
        if src.is_empty() || tgt.len() == 2 {
            return Err(Error::Data(format!("empty sentence at line {}", i + 1)));
        }
        examples.push(ParallelExample { src, tgt, image_id });
    }
    Ok(examples)
}

/// Sort by length, pack greedily to the token budget, then shuffle the batch
/// order with the seeded PRNG. A single example longer than the budget forms
/// its own batch.
pub fn make_batches(
    examples: &[ParallelExample],
    syn: &FeatureTable,
    aut: &FeatureTable,
    token_budget: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to batch".into()));
    }
    if token_budget == 0 {
        return Err(Error::Data("token budget must be positive".into()));
    }
    for ex in examples {
        if syn.get(&ex.image_id).is_none() {
            return Err(Error::Data(format!(
                "image id {} missing from the synthetic feature table",
                ex.image_id
            )));
        }
        if aut.get(&ex.image_id).is_none() {
            return Err(Error::Data(format!(
                "image id {} missing from the authentic feature table",
                ex.image_id
            )));
        }
    }
    if syn.dim() != aut.dim() {
        return Err(Error::Data(format!(
            "feature tables disagree on dimension: {} vs {}",
            syn.dim(),
            aut.dim()
        )));
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].cost(), i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_cost = 0usize;
    for &i in &order {
        let cost = examples[i].cost();
        if !current.is_empty() && current_cost + cost > token_budget {
            groups.push(std::mem::take(&mut current));
            current_cost = 0;
        }
        current.push(i);
        current_cost += cost;
    }
    if !current.is_empty() {
        groups.push(current);
    }

    let mut rng = RngStream::named(seed, "batch-order");
    rng.shuffle(&mut groups);

    Ok(groups.into_iter().map(|g| build_batch(examples, syn, aut, g)).collect())
}

fn build_batch(
    examples: &[ParallelExample],
    syn: &FeatureTable,
    aut: &FeatureTable,
    members: Vec<usize>,
) -> Batch {
    let size = members.len();
    let src_len = members.iter().map(|&i| examples[i].src.len()).max().unwrap();
    let tgt_len = members.iter().map(|&i| examples[i].tgt.len()).max().unwrap();
    let d_feat = syn.dim();
    let mut batch = Batch {
        size,
        src_len,
        tgt_len,
        src_ids: vec![PAD; size * src_len],
        src_mask: vec![false; size * src_len],
        tgt_ids: vec![PAD; size * tgt_len],
        tgt_mask: vec![false; size * tgt_len],
        d_feat,
        syn_feats: Vec::with_capacity(size * d_feat),
        aut_feats: Vec::with_capacity(size * d_feat),
        example_indices: members.clone(),
    };
    for (b, &i) in members.iter().enumerate() {
        let ex = &examples[i];
        batch.src_ids[b * src_len..b * src_len + ex.src.len()].copy_from_slice(&ex.src);
        for m in &mut batch.src_mask[b * src_len..b * src_len + ex.src.len()] {
            *m = true;
        }
        batch.tgt_ids[b * tgt_len..b * tgt_len + ex.tgt.len()].copy_from_slice(&ex.tgt);
        for m in &mut batch.tgt_mask[b * tgt_len..b * tgt_len + ex.tgt.len()] {
            *m = true;
        }
        batch.syn_feats.extend_from_slice(syn.get(&ex.image_id).unwrap());
        batch.aut_feats.extend_from_slice(aut.get(&ex.image_id).unwrap());
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tables(ids: &[&str], d: usize) -> (FeatureTable, FeatureTable) {
        let mut syn = FeatureTable::new(d);
        let mut aut = FeatureTable::new(d);
        for (k, id) in ids.iter().enumerate() {
            syn.insert(id.to_string(), vec![k as f32; d]).unwrap();
            aut.insert(id.to_string(), vec![-(k as f32); d]).unwrap();
        }
        (syn, aut)
    }

    fn ex(src_len: usize, tgt_len: usize, image: &str) -> ParallelExample {
        // tgt_len counts the framed length
        let mut tgt = vec![BOS];
        tgt.extend(std::iter::repeat(5).take(tgt_len - 2));
        tgt.push(EOS);
        ParallelExample { src: vec![4; src_len], tgt, image_id: image.into() }
    }

    #[test]
    fn greedy_packing() {
        let examples = vec![ex(2, 3, "a"), ex(2, 3, "b"), ex(2, 4, "c")];
        let (syn, aut) = tables(&["a", "b", "c"], 2);
        let batches = make_batches(&examples, &syn, &aut, 6, 1).unwrap();
        assert_eq!(batches.len(), 2);
        let mut sizes: Vec<usize> = batches.iter().map(|b| b.size).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 2]);
    }

    #[test]
    fn over_long_example_gets_own_batch() {
        let examples = vec![ex(20, 22, "a"), ex(2, 3, "b")];
        let (syn, aut) = tables(&["a", "b"], 2);
        let batches = make_batches(&examples, &syn, &aut, 6, 1).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().any(|b| b.size == 1 && b.tgt_len == 22));
    }

    #[test]
    fn fixed_seed_fixes_order() {
        let examples: Vec<ParallelExample> =
            (0..20).map(|i| ex(2 + i % 4, 3 + i % 5, "a")).collect();
        let (syn, aut) = tables(&["a"], 2);
        let b1 = make_batches(&examples, &syn, &aut, 8, 7).unwrap();
        let b2 = make_batches(&examples, &syn, &aut, 8, 7).unwrap();
        let order1: Vec<_> = b1.iter().map(|b| b.example_indices.clone()).collect();
        let order2: Vec<_> = b2.iter().map(|b| b.example_indices.clone()).collect();
        assert_eq!(order1, order2);
    }

    #[test]
    fn unresolvable_image_id_is_named() {
        let examples = vec![ex(2, 3, "ghost")];
        let (syn, aut) = tables(&["a"], 2);
        let err = make_batches(&examples, &syn, &aut, 8, 1).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn masks_cover_exactly_the_real_tokens() {
        let examples = vec![ex(2, 3, "a"), ex(4, 6, "a"), ex(3, 5, "a")];
        let (syn, aut) = tables(&["a"], 2);
        let batches = make_batches(&examples, &syn, &aut, 100, 1).unwrap();
        let total_src: usize = batches
            .iter()
            .map(|b| b.src_mask.iter().filter(|&&m| m).count())
            .sum();
        let total_tgt: usize = batches.iter().map(|b| b.real_tgt_tokens()).sum();
        assert_eq!(total_src, 2 + 4 + 3);
        assert_eq!(total_tgt, 3 + 6 + 5);
        // every example appears exactly once
        let mut seen: Vec<usize> =
            batches.iter().flat_map(|b| b.example_indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }
}
