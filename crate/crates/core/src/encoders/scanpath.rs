//! The scanpath tower: each fixation becomes a learned linear map of
//! `(x, y, ln(duration / 220ms))` plus a sinusoidal order encoding, followed
//! by the shared transformer stack and mean pooling.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::TransformerStack;
use super::EncoderConfig;
use crate::dataio::Scanpath;
use crate::error::Result;
use crate::params::{BoundVars, ParamStore};
use crate::tape::{Tape, Var};

/// Reference duration for the log term.
pub const DURATION_REF_MS: f64 = 220.0;

/// `T x 3` raw fixation features.
pub fn fixation_tokens(path: &Scanpath) -> Array2<f64> {
    let mut out = Array2::zeros((path.fixations.len(), 3));
    for (i, f) in path.fixations.iter().enumerate() {
        out[[i, 0]] = f.x;
        out[[i, 1]] = f.y;
        out[[i, 2]] = (f.duration_ms / DURATION_REF_MS).ln();
    }
    out
}

/// Sinusoidal encoding of fixation order, `t x d`.
pub fn order_encoding(t: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((t, d));
    for row in 0..t {
        for i in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            pe[[row, 2 * i]] = (row as f64 * freq).sin();
            pe[[row, 2 * i + 1]] = (row as f64 * freq).cos();
        }
    }
    pe
}

#[derive(Debug, Clone)]
pub struct ScanpathEncoder {
    pub config: EncoderConfig,
    stack: TransformerStack,
}

impl ScanpathEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(ScanpathEncoder {
            stack: TransformerStack {
                d: config.d,
                n_layers: config.n_layers,
                n_heads: config.n_heads,
            },
            config,
        })
    }

    pub fn init_params(&self, store: &mut ParamStore, prefix: &str) {
        // offset keeps this tower's draws distinct from the image tower's
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.init_seed ^ 0x9A7E);
        store.insert_fan_in(format!("{prefix}.tok.w"), 3, self.config.d, &mut rng);
        store.insert_const(format!("{prefix}.tok.b"), 1, self.config.d, 0.0);
        self.stack.init_params(store, prefix, &mut rng);
    }

    /// Forward one scanpath to its pooled (unnormalized) embedding, `1 x d`.
    pub fn forward_path(
        &self,
        tape: &mut Tape,
        bound: &BoundVars,
        prefix: &str,
        path: &Scanpath,
    ) -> Var {
        let raw = fixation_tokens(path);
        let t = raw.nrows();
        let raw_var = tape.constant(raw);
        let proj = tape.matmul(raw_var, bound.var(&format!("{prefix}.tok.w")));
        let projb = tape.add_row(proj, bound.var(&format!("{prefix}.tok.b")));
        let pe = tape.constant(order_encoding(t, self.config.d));
        let with_order = tape.add(projb, pe);
        let tokens = self.stack.forward(tape, bound, prefix, with_order, t);
        tape.mean_rows(tokens)
    }

    /// Inference helper: pooled embedding as a plain vector.
    pub fn encode_path(
        &self,
        store: &ParamStore,
        prefix: &str,
        path: &Scanpath,
    ) -> Result<ndarray::Array1<f64>> {
        path.validate()?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let pooled = self.forward_path(&mut tape, &bound, prefix, path);
        Ok(tape.value(pooled).row(0).to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Fixation;
    use crate::gradcheck::check_sampled;

    fn tiny() -> (ScanpathEncoder, ParamStore) {
        let cfg = EncoderConfig {
            d: 8,
            patch_size: 8,
            n_layers: 1,
            n_heads: 2,
            trainable: true,
            init_seed: 11,
        };
        let enc = ScanpathEncoder::new(cfg).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, "path");
        (enc, store)
    }

    fn path_of(fixes: &[(f64, f64, f64)]) -> Scanpath {
        Scanpath {
            image_id: "img".into(),
            observer_id: "obs".into(),
            fixations: fixes
                .iter()
                .map(|&(x, y, d)| Fixation {
                    x,
                    y,
                    duration_ms: d,
                })
                .collect(),
        }
    }

    #[test]
    fn single_fixation_path_works() {
        let (enc, store) = tiny();
        let p = path_of(&[(0.4, 0.6, 210.0)]);
        let e = enc.encode_path(&store, "path", &p).unwrap();
        assert_eq!(e.len(), 8);
        assert!(e.iter().all(|v| v.is_finite()));
        // deterministic
        assert_eq!(enc.encode_path(&store, "path", &p).unwrap(), e);
    }

    #[test]
    fn fixation_order_changes_embedding() {
        let (enc, store) = tiny();
        let a = path_of(&[(0.1, 0.1, 200.0), (0.5, 0.5, 200.0), (0.9, 0.9, 200.0)]);
        let b = path_of(&[(0.9, 0.9, 200.0), (0.5, 0.5, 200.0), (0.1, 0.1, 200.0)]);
        let ea = enc.encode_path(&store, "path", &a).unwrap();
        let eb = enc.encode_path(&store, "path", &b).unwrap();
        let diff: f64 = ea.iter().zip(eb.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-8, "order encoding inactive, diff {diff}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (enc, store) = tiny();
        let p = path_of(&[(0.2, 0.3, 180.0), (0.6, 0.4, 250.0), (0.8, 0.9, 120.0), (0.1, 0.5, 300.0)]);

        let loss_of = |st: &ParamStore| {
            let mut tape = Tape::new();
            let bound = st.bind(&mut tape, |_| false);
            let pooled = enc.forward_path(&mut tape, &bound, "path", &p);
            let s = tape.sum_all(pooled);
            tape.scalar(s)
        };

        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let pooled = enc.forward_path(&mut tape, &bound, "path", &p);
        let s = tape.sum_all(pooled);
        let grads = tape.backward(s);
        let collected = store.collect_grads(&bound, &grads);

        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let analytic = collected[i].as_ref().expect("gradient present");
            let flat: Vec<f64> = store.get(name).iter().cloned().collect();
            let aflat: Vec<f64> = analytic.iter().cloned().collect();
            let worst = check_sampled(
                |x| {
                    let mut st = store.clone();
                    let dim = st.get(name).dim();
                    *st.get_mut(name) = Array2::from_shape_vec(dim, x.to_vec()).unwrap();
                    loss_of(&st)
                },
                &flat,
                &aflat,
                1e-5,
                32,
                100 + i as u64,
            );
            assert!(worst <= 1e-4, "{name}: rel err {worst}");
        }
    }
}
