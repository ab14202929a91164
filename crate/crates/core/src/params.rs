//! Named parameter tensors plus the versioned on-disk weights container.
//!
//! Container layout (text header, binary payload):
//!
//! ```text
//! AQAW1
//! <one-line JSON config block>
//! tensors <count>
//! <name> <rows> <cols>\n  followed by rows*cols little-endian f32
//! ...                     (one header line + payload per tensor)
//! ```
//!
//! Values are computed in f64 and stored as f32; the f64 -> f32 conversion is
//! deterministic, so identical training runs produce byte-identical files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AqaError, Result};
use crate::tape::{Tape, Var};

const MAGIC: &str = "AQAW1";

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Array2<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        assert!(
            !name.contains(char::is_whitespace),
            "parameter names must not contain whitespace: {name:?}"
        );
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    /// Scaled-uniform initialization by fan-in: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    /// The draw stream is keyed on the seed alone, so insertion order defines
    /// the parameter values deterministically.
    pub fn insert_fan_in(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let bound = 1.0 / (rows as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.insert(name, value);
    }

    pub fn insert_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) {
        self.insert(name, Array2::from_elem((rows, cols), v));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let idx = self.index[name];
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let idx = self.index[name];
        &mut self.entries[idx].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Register every tensor as a tape leaf. `trainable` decides, per name,
    /// whether gradients flow into it.
    pub fn bind<F>(&self, tape: &mut Tape, trainable: F) -> BoundVars
    where
        F: Fn(&str) -> bool,
    {
        let map = self
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), tape.leaf(v.clone(), trainable(n))))
            .collect();
        BoundVars { map }
    }

    pub fn bind_all(&self, tape: &mut Tape) -> BoundVars {
        self.bind(tape, |_| true)
    }

    /// Collect gradients aligned with store order (None where a tensor got none).
    pub fn collect_grads(
        &self,
        bound: &BoundVars,
        grads: &crate::tape::Grads,
    ) -> Vec<Option<Array2<f64>>> {
        self.entries
            .iter()
            .map(|(n, _)| grads.get(bound.var(n)).cloned())
            .collect()
    }

    pub fn save(&self, path: &Path, config_json: &str) -> Result<()> {
        debug_assert!(!config_json.contains('\n'));
        let file = File::create(path).map_err(|e| AqaError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| AqaError::io(path, e);
        writeln!(w, "{MAGIC}").map_err(io_err)?;
        writeln!(w, "{config_json}").map_err(io_err)?;
        writeln!(w, "tensors {}", self.entries.len()).map_err(io_err)?;
        for (name, value) in &self.entries {
            writeln!(w, "{name} {} {}", value.nrows(), value.ncols()).map_err(io_err)?;
            for v in value.iter() {
                w.write_all(&(*v as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let file = File::open(path).map_err(|e| AqaError::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line_no = 0usize;
        let mut read_line = |r: &mut BufReader<File>| -> Result<String> {
            line_no += 1;
            let mut line = String::new();
            let n = r
                .read_line(&mut line)
                .map_err(|e| AqaError::io(path, e))?;
            if n == 0 {
                return Err(AqaError::parse(path, line_no, "unexpected end of file"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };

        let magic = read_line(&mut r)?;
        if magic != MAGIC {
            return Err(AqaError::parse(path, 1, format!("bad magic {magic:?}")));
        }
        let config = read_line(&mut r)?;
        let count_line = read_line(&mut r)?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| AqaError::parse(path, 3, "bad tensor count line"))?;

        let mut store = ParamStore::new();
        for _ in 0..count {
            let header = read_line(&mut r)?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(AqaError::parse(path, 0, format!("bad tensor header {header:?}")));
            }
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| AqaError::parse(path, 0, "bad tensor rows"))?;
            let cols: usize = parts[2]
                .parse()
                .map_err(|_| AqaError::parse(path, 0, "bad tensor cols"))?;
            let mut buf = vec![0u8; rows * cols * 4];
            r.read_exact(&mut buf).map_err(|e| AqaError::io(path, e))?;
            let vals: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let arr = Array2::from_shape_vec((rows, cols), vals)
                .map_err(|e| AqaError::parse(path, 0, e.to_string()))?;
            store.insert(parts[0], arr);
        }
        Ok((store, config))
    }
}

pub struct BoundVars {
    map: HashMap<String, Var>,
}

impl BoundVars {
    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.aqaw");
        let mut store = ParamStore::new();
        // values chosen representable in f32 so the round trip is exact
        store.insert("a.w", arr2(&[[0.5f64, -1.25], [3.0, 0.0]]));
        store.insert("b.bias", arr2(&[[2.0f64, -0.125]]));
        store.save(&path, r#"{"v":1}"#).unwrap();
        let (loaded, cfg) = ParamStore::load(&path).unwrap();
        assert_eq!(cfg, r#"{"v":1}"#);
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("a.w"), store.get("a.w"));
        assert_eq!(loaded.get("b.bias"), store.get("b.bias"));

        // identical save twice -> identical bytes
        let path2 = dir.path().join("w2.aqaw");
        store.save(&path2, r#"{"v":1}"#).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.aqaw");
        std::fs::write(&path, "NOPE\n{}\ntensors 0\n").unwrap();
        assert!(ParamStore::load(&path).is_err());
    }

    #[test]
    fn fan_in_init_is_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        a.insert_fan_in("w", 4, 3, &mut r1);
        b.insert_fan_in("w", 4, 3, &mut r2);
        assert_eq!(a.get("w"), b.get("w"));
        let bound = 1.0 / 2.0;
        assert!(a.get("w").iter().all(|v| v.abs() <= bound));
    }
}
