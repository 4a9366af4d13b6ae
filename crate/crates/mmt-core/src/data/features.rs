//! Visual feature tables: image_id -> fixed-dimension feature vector.
//!
//! File format is line-oriented text for auditability:
//! `<image_id><TAB><v1> <v2> ... <vd>` with decimal floats.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FeatureTable {
    dim: usize,
    map: HashMap<String, Vec<f32>>,
    /// Number of records whose id re-occurred (last record wins).
    pub duplicate_count: usize,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable { dim, map: HashMap::new(), duplicate_count: 0 }
    }

    pub fn insert(&mut self, id: String, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Format(format!(
                "feature for {id} has dimension {}, table is {}",
                vector.len(),
                self.dim
            )));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!("non-finite feature value for {id}")));
        }
        if self.map.insert(id, vector).is_some() {
            self.duplicate_count += 1;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.map.get(id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut table: Option<FeatureTable> = None;
        for (no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((id, rest)) = line.split_once('\t') else {
                return Err(Error::Format(format!(
                    "{}: line {}: missing tab separator",
                    path.display(),
                    no + 1
                )));
            };
            let mut vector = Vec::new();
            for piece in rest.split_whitespace() {
                let v: f32 = piece.parse().map_err(|_| {
                    Error::Format(format!(
                        "{}: line {}: unparseable number {piece:?}",
                        path.display(),
                        no + 1
                    ))
                })?;
                vector.push(v);
            }
            if vector.is_empty() {
                return Err(Error::Format(format!(
                    "{}: line {}: empty feature vector",
                    path.display(),
                    no + 1
                )));
            }
            let table = table.get_or_insert_with(|| FeatureTable::new(vector.len()));
            table
                .insert(id.to_string(), vector)
                .map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), no + 1)))?;
        }
        table.ok_or_else(|| Error::Format(format!("{}: no feature records", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ids: Vec<&String> = self.map.keys().collect();
        ids.sort();
        let mut out = String::new();
        for id in ids {
            let vals: Vec<String> = self.map[id].iter().map(|v| format!("{v}")).collect();
            out.push_str(id);
            out.push('\t');
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Image index: one image_id per line, aligned with the corpus.
pub fn load_image_index(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let ids: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    if ids.iter().any(String::is_empty) {
        return Err(Error::Format(format!("{}: empty image id line", path.display())));
    }
    if ids.is_empty() {
        return Err(Error::Format(format!("{}: empty image index", path.display())));
    }
    Ok(ids)
}
