//! Byte-pair encoding: learn greedy most-frequent merges from a corpus and
//! apply them to segment words into subwords.
//!
//! Subword boundaries use the continuation convention: every subword of a
//! word except the last carries the `@@` suffix, so joining tokens and
//! erasing the markers reconstructs the original text.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@";

/// Ordered merge list; order is training order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
}

impl BpeModel {
    /// Apply merges in training order, leftmost-first within the word,
    /// returning raw symbols without continuation markers.
    pub fn apply_merges(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        for (left, right) in &self.merges {
            if symbols.len() < 2 {
                break;
            }
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == *left && symbols[i + 1] == *right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Segment a word into subword tokens with continuation markers.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let symbols = self.apply_merges(word);
        let last = symbols.len() - 1;
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, s)| if i < last { format!("{s}{CONTINUATION}") } else { s })
            .collect()
    }

    /// Segment every whitespace-separated word of a line.
    pub fn segment_line(&self, line: &str) -> Vec<String> {
        line.split_whitespace().flat_map(|w| self.segment_word(w)).collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut merges = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!(
                    "{}: line {}: expected `<left> <right>`",
                    path.display(),
                    no + 1
                )));
            };
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(BpeModel { merges })
    }
}

/// Rejoin subword tokens into words, erasing continuation markers.
pub fn detokenize(tokens: &[String]) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    for tok in tokens {
        if let Some(stem) = tok.strip_suffix(CONTINUATION) {
            current.push_str(stem);
        } else {
            current.push_str(tok);
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.join(" ")
}

/// Learn `n_merges` greedy most-frequent-pair merges. Stops early when no
/// pair occurs at least twice. Ties break to the lexicographically smallest
/// pair, so retraining on the same corpus is byte-identical.
pub fn learn_bpe<'a, I>(corpus: I, n_merges: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for word in line.split_whitespace() {
            *word_freq.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Data("empty corpus: no words to learn merges from".into()));
    }

    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(String::from).collect(), f))
        .collect();
    // stable base order so incremental updates are reproducible
    words.sort_by(|a, b| a.0.cmp(&b.0));

    let mut pair_counts: HashMap<(String, String), i64> = HashMap::new();
    let mut pair_words: HashMap<(String, String), Vec<usize>> = HashMap::new();
    for (idx, (symbols, freq)) in words.iter().enumerate() {
        for w in symbols.windows(2) {
            let pair = (w[0].clone(), w[1].clone());
            *pair_counts.entry(pair.clone()).or_insert(0) += *freq as i64;
            pair_words.entry(pair).or_default().push(idx);
        }
    }

    let mut merges = Vec::with_capacity(n_merges);
    for _ in 0..n_merges {
        let mut best: Option<(&(String, String), i64)> = None;
        for (pair, &count) in &pair_counts {
            if count < 2 {
                continue;
            }
            best = match best {
                None => Some((pair, count)),
                Some((bp, bc)) => {
                    if count > bc || (count == bc && pair < bp) {
                        Some((pair, count))
                    } else {
                        Some((bp, bc))
                    }
                }
            };
        }
        let Some((pair, _)) = best else { break };
        let pair = pair.clone();
        let joined = format!("{}{}", pair.0, pair.1);

        let affected: Vec<usize> = {
            let mut v = pair_words.remove(&pair).unwrap_or_default();
            v.sort_unstable();
            v.dedup();
            v
        };
        for idx in affected {
            let freq = words[idx].1 as i64;
            let symbols = &mut words[idx].0;
            if !symbols.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                continue;
            }
            // retract this word's pair statistics
            for w in symbols.windows(2) {
                let p = (w[0].clone(), w[1].clone());
                if let Some(c) = pair_counts.get_mut(&p) {
                    *c -= freq;
                    if *c <= 0 {
                        pair_counts.remove(&p);
                    }
                }
            }
            // rewrite with the merge applied leftmost-first
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
                    merged.push(joined.clone());
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = merged;
            // re-add statistics
            for w in symbols.windows(2) {
                let p = (w[0].clone(), w[1].clone());
                *pair_counts.entry(p.clone()).or_insert(0) += freq;
                pair_words.entry(p).or_default().push(idx);
            }
        }
        pair_counts.remove(&pair);
        merges.push(pair);
    }
    Ok(BpeModel { merges })
}
