//! Encoder contracts and desk-scale implementations.
//!
//! * [`SemanticEncoder`] — frozen, hand-crafted feature recipe behind a fixed
//!   seeded projection (stands in for the frozen CLIP branch);
//! * [`GazeImageEncoder`] — trainable patch transformer over pixels (the
//!   image tower / GAVE);
//! * [`ScanpathEncoder`] — trainable transformer over fixation sequences;
//! * [`EmbeddingTable`] — ingestion for externally precomputed embeddings.
//!
//! Embedding-table file layout: a text header `"<n> <d> f32le"`, then `n` id
//! lines, then `n * d` little-endian 32-bit floats in id-line order.

mod gaze_image;
mod scanpath;
mod semantic;
mod transformer;

pub use gaze_image::{patch_matrix, positional_encoding_2d, GazeImageEncoder};
pub use scanpath::{fixation_tokens, order_encoding, ScanpathEncoder};
pub use semantic::{semantic_features, SemanticEncoder, SEMANTIC_FEATURE_DIM};
pub use transformer::TransformerStack;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{AqaError, Result};

/// A d-dimensional embedding. Token grids (`T x d`) use `ndarray::Array2`.
pub type Embedding = Array1<f64>;
pub type TokenSequence = ndarray::Array2<f64>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Embedding width.
    pub d: usize,
    pub patch_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub trainable: bool,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            patch_size: 8,
            n_layers: 2,
            n_heads: 4,
            trainable: true,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.n_layers == 0 || self.patch_size == 0 {
            return Err(AqaError::Config("encoder dimensions must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(AqaError::Config(format!(
                "d = {} not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Id-addressable table of fixed-width embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    width: usize,
    ids: Vec<String>,
    values: Vec<Array1<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(width: usize) -> Self {
        EmbeddingTable {
            width,
            ids: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Array1<f64>) -> Result<()> {
        let id = id.into();
        if value.len() != self.width {
            return Err(AqaError::Validation(format!(
                "embedding width {} does not match table width {} (id {:?})",
                value.len(),
                self.width,
                id
            )));
        }
        if self.index.contains_key(&id) {
            return Err(AqaError::Validation(format!("duplicate id {id:?}")));
        }
        self.index.insert(id.clone(), self.values.len());
        self.ids.push(id);
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Array1<f64>> {
        self.index
            .get(id)
            .map(|&i| &self.values[i])
            .ok_or_else(|| AqaError::MissingId(id.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| AqaError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| AqaError::io(path, e);
        writeln!(w, "{} {} f32le", self.ids.len(), self.width).map_err(io_err)?;
        for id in &self.ids {
            writeln!(w, "{id}").map_err(io_err)?;
        }
        for v in &self.values {
            for x in v.iter() {
                w.write_all(&(*x as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| AqaError::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut header = String::new();
        r.read_line(&mut header).map_err(|e| AqaError::io(path, e))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[2] != "f32le" {
            return Err(AqaError::parse(path, 1, format!("bad header {header:?}")));
        }
        let n: usize = parts[0]
            .parse()
            .map_err(|_| AqaError::parse(path, 1, "bad n"))?;
        let d: usize = parts[1]
            .parse()
            .map_err(|_| AqaError::parse(path, 1, "bad d"))?;
        let mut table = EmbeddingTable::new(d);
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let mut line = String::new();
            let got = r.read_line(&mut line).map_err(|e| AqaError::io(path, e))?;
            if got == 0 {
                return Err(AqaError::parse(path, i + 2, "unexpected end of id lines"));
            }
            ids.push(line.trim_end_matches('\n').to_string());
        }
        let mut buf = vec![0u8; n * d * 4];
        r.read_exact(&mut buf).map_err(|e| AqaError::io(path, e))?;
        for (i, id) in ids.into_iter().enumerate() {
            let vals: Array1<f64> = buf[i * d * 4..(i + 1) * d * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            table.insert(id, vals)?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_insert_lookup_and_counts() {
        let mut t = EmbeddingTable::new(16);
        for i in 0..5 {
            t.insert(format!("id{i}"), Array1::from_elem(16, i as f64))
                .unwrap();
        }
        assert_eq!(t.len(), 5);
        assert_eq!(t.get("id3").unwrap().len(), 16);
        assert!(matches!(
            t.get("absent").unwrap_err(),
            AqaError::MissingId(_)
        ));
    }

    #[test]
    fn table_width_mismatch_rejected() {
        let mut t = EmbeddingTable::new(4);
        assert!(t.insert("a", Array1::from_elem(5, 0.0)).is_err());
    }

    #[test]
    fn table_file_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.emb");
        let mut t = EmbeddingTable::new(3);
        // f32-exact values survive bit-identically
        t.insert("a", Array1::from_vec(vec![0.5, -1.25, 3.0])).unwrap();
        t.insert("b", Array1::from_vec(vec![0.0, 2.5, -0.125])).unwrap();
        t.save(&path).unwrap();
        let loaded = EmbeddingTable::load(&path).unwrap();
        assert_eq!(loaded.width(), 3);
        assert_eq!(loaded.get("a").unwrap(), t.get("a").unwrap());
        assert_eq!(loaded.get("b").unwrap(), t.get("b").unwrap());

        let path2 = dir.path().join("table2.emb");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn config_head_divisibility() {
        let cfg = EncoderConfig {
            d: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
