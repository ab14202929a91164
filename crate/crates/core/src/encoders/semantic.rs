//! Frozen semantic encoder: a hand-crafted feature recipe behind a fixed
//! seeded projection. Content-driven and largely composition-blind, with
//! zero trainable parameters — its output is a pure function of the pixels
//! and the init seed.
//!
//! Features (44 values):
//! * 4x4 grid of mean luminance, luminance = (R+G+B)/3;
//! * per-channel 8-bin histograms referenced against the all-black image
//!   (the first bin has the black-image mass subtracted), so the all-zero
//!   image maps to the all-zero feature vector;
//! * edge statistics of the luminance plane: mean |dx|, mean |dy|, RMS
//!   gradient magnitude, and the fraction of pixels with magnitude > 0.1.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AqaError, Result};

const GRID: usize = 4;
const BINS: usize = 8;
pub const SEMANTIC_FEATURE_DIM: usize = GRID * GRID + 3 * BINS + 4;

/// The fixed feature recipe, exposed for host-model construction.
pub fn semantic_features(pixels: &Array3<f64>) -> Result<Array1<f64>> {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if c != 3 || h < GRID || w < GRID {
        return Err(AqaError::Config(format!(
            "semantic encoder needs RGB images of at least {GRID}x{GRID}, got {h}x{w}x{c}"
        )));
    }
    let mut feats = Array1::zeros(SEMANTIC_FEATURE_DIM);

    let lum = |y: usize, x: usize| {
        (pixels[[y, x, 0]] + pixels[[y, x, 1]] + pixels[[y, x, 2]]) / 3.0
    };

    // luminance grid
    for gy in 0..GRID {
        for gx in 0..GRID {
            let y0 = gy * h / GRID;
            let y1 = (gy + 1) * h / GRID;
            let x0 = gx * w / GRID;
            let x1 = (gx + 1) * w / GRID;
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += lum(y, x);
                }
            }
            feats[gy * GRID + gx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }

    // per-channel histograms, black-referenced
    let npix = (h * w) as f64;
    for ch in 0..3 {
        let base = GRID * GRID + ch * BINS;
        for y in 0..h {
            for x in 0..w {
                let v = pixels[[y, x, ch]];
                let bin = ((v * BINS as f64).floor() as usize).min(BINS - 1);
                feats[base + bin] += 1.0 / npix;
            }
        }
        feats[base] -= 1.0;
    }

    // edge statistics
    let base = GRID * GRID + 3 * BINS;
    let mut sum_dx = 0.0;
    let mut sum_dy = 0.0;
    let mut sum_sq = 0.0;
    let mut edge_count = 0.0;
    let mut n_grad = 0.0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let dx = lum(y, x + 1) - lum(y, x);
            let dy = lum(y + 1, x) - lum(y, x);
            sum_dx += dx.abs();
            sum_dy += dy.abs();
            let mag2 = dx * dx + dy * dy;
            sum_sq += mag2;
            if mag2.sqrt() > 0.1 {
                edge_count += 1.0;
            }
            n_grad += 1.0;
        }
    }
    if n_grad > 0.0 {
        feats[base] = sum_dx / n_grad;
        feats[base + 1] = sum_dy / n_grad;
        feats[base + 2] = (sum_sq / n_grad).sqrt();
        feats[base + 3] = edge_count / n_grad;
    }
    Ok(feats)
}

#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub d: usize,
    pub init_seed: u64,
    /// Fixed projection, `SEMANTIC_FEATURE_DIM x d`. Not a parameter.
    projection: Array2<f64>,
}

impl SemanticEncoder {
    pub fn new(d: usize, init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed ^ 0x5EAA_171C);
        let bound = 1.0 / (SEMANTIC_FEATURE_DIM as f64).sqrt();
        let projection = Array2::from_shape_fn((SEMANTIC_FEATURE_DIM, d), |_| {
            rand::Rng::random_range(&mut rng, -bound..bound)
        });
        SemanticEncoder {
            d,
            init_seed,
            projection,
        }
    }

    /// Deterministic embedding of an image (no bias: the zero feature vector
    /// maps to the zero embedding).
    pub fn encode(&self, pixels: &Array3<f64>) -> Result<Array1<f64>> {
        let feats = semantic_features(pixels)?;
        Ok(feats.dot(&self.projection))
    }

    /// The frozen projection, exposed so callers can assert it never changes.
    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }
}
