//! Shared source/target symbol vocabulary with fixed reserved ids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: u32 = 4;

const RESERVED_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective symbol <-> id map shared across both language sides.
/// Ids 0..=3 are pad/bos/eos/unk; file symbols start at id 4.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_symbols<I: IntoIterator<Item = String>>(symbols: I) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Format(format!("empty vocabulary symbol at id {}", i as u32 + RESERVED)));
            }
            if RESERVED_NAMES.contains(&s.as_str()) {
                return Err(Error::Format(format!("reserved name {s} listed as a plain symbol")));
            }
            if index.insert(s.clone(), i as u32 + RESERVED).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary symbol {s}")));
            }
        }
        Ok(Vocabulary { symbols, index })
    }

    /// Build from token streams: sorted by descending frequency, ties by
    /// symbol, so a rebuild is byte-identical.
    pub fn build<'a, I>(token_lines: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for line in token_lines {
            for tok in line.split_whitespace() {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::Data("empty corpus: no symbols for vocabulary".into()));
        }
        let mut items: Vec<(&str, u64)> = freq.into_iter().collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_symbols(items.into_iter().map(|(s, _)| s.to_string()))
    }

    /// Total size including the four reserved ids.
    pub fn len(&self) -> usize {
        self.symbols.len() + RESERVED as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn id_or_unk(&self, symbol: &str) -> u32 {
        self.id_of(symbol).unwrap_or(UNK)
    }

    pub fn symbol_of(&self, id: u32) -> Option<&str> {
        if id < RESERVED {
            Some(RESERVED_NAMES[id as usize])
        } else {
            self.symbols.get((id - RESERVED) as usize).map(String::as_str)
        }
    }

    pub fn encode_line(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            let _ = writeln!(out, "{s}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// One symbol per line; line number = id - 4.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_symbols(text.lines().map(|l| l.to_string()))
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
