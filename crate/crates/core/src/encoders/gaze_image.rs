//! The gaze-aligned image tower: non-overlapping patch embedding with fixed
//! 2D sinusoidal position encodings, a transformer stack, and mean pooling
//! over patch tokens. Position encodings are part of the patch embedding
//! (the pooled output must be able to carry spatial composition).

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::TransformerStack;
use super::EncoderConfig;
use crate::error::{AqaError, Result};
use crate::params::{BoundVars, ParamStore};
use crate::tape::{Tape, Var};

/// Flatten an image into its `T x (patch^2 * 3)` patch matrix, patches in
/// row-major grid order and pixels in (y, x, channel) order within a patch.
pub fn patch_matrix(pixels: &Array3<f64>, patch: usize) -> Result<Array2<f64>> {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if c != 3 {
        return Err(AqaError::Config(format!("expected RGB image, got {c} channels")));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(AqaError::Config(format!(
            "patch size {patch} must divide image sides {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let mut out = Array2::zeros((gh * gw, dim));
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            let mut i = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..3 {
                        out[[row, i]] = pixels[[py * patch + y, px * patch + x, ch]];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fixed 2D sinusoidal position encoding over a `gh x gw` patch grid: the
/// first half of the width encodes the x index, the second half the y index,
/// each with interleaved sin/cos at geometric frequencies.
pub fn positional_encoding_2d(gh: usize, gw: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((gh * gw, d));
    let half = d / 2;
    let fill = |pe: &mut Array2<f64>, offset: usize, width: usize, pos: f64, row: usize| {
        for i in 0..width / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / width as f64);
            pe[[row, offset + 2 * i]] = (pos * freq).sin();
            pe[[row, offset + 2 * i + 1]] = (pos * freq).cos();
        }
    };
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            fill(&mut pe, 0, half, px as f64, row);
            fill(&mut pe, half, d - half, py as f64, row);
        }
    }
    pe
}

#[derive(Debug, Clone)]
pub struct GazeImageEncoder {
    pub config: EncoderConfig,
    stack: TransformerStack,
}

impl GazeImageEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(GazeImageEncoder {
            stack: TransformerStack {
                d: config.d,
                n_layers: config.n_layers,
                n_heads: config.n_heads,
            },
            config,
        })
    }

    /// Token count for an `h x w` image.
    pub fn token_count(&self, h: usize, w: usize) -> Result<usize> {
        let p = self.config.patch_size;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(AqaError::Config(format!(
                "patch size {p} must divide image sides {h}x{w}"
            )));
        }
        Ok((h / p) * (w / p))
    }

    pub fn init_params(&self, store: &mut ParamStore, prefix: &str) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.init_seed);
        let patch_dim = self.config.patch_size * self.config.patch_size * 3;
        store.insert_fan_in(format!("{prefix}.patch.w"), patch_dim, self.config.d, &mut rng);
        store.insert_const(format!("{prefix}.patch.b"), 1, self.config.d, 0.0);
        self.stack.init_params(store, prefix, &mut rng);
    }

    /// Forward a batch of images stacked as `(B * T) x patch_dim` patch rows.
    /// Returns `(tokens, pooled)`: tokens `(B * T) x d`, pooled `B x d`
    /// (mean over each image's tokens, not normalized).
    pub fn forward_patches(
        &self,
        tape: &mut Tape,
        bound: &BoundVars,
        prefix: &str,
        patches: Var,
        tokens_per_image: usize,
        grid: (usize, usize),
    ) -> (Var, Var) {
        let total = tape.value(patches).nrows();
        assert_eq!(total % tokens_per_image, 0);
        let n_images = total / tokens_per_image;
        let proj = tape.matmul(patches, bound.var(&format!("{prefix}.patch.w")));
        let projb = tape.add_row(proj, bound.var(&format!("{prefix}.patch.b")));
        let pe_one = positional_encoding_2d(grid.0, grid.1, self.config.d);
        let mut pe = Array2::zeros((total, self.config.d));
        for b in 0..n_images {
            pe.slice_mut(ndarray::s![b * tokens_per_image..(b + 1) * tokens_per_image, ..])
                .assign(&pe_one);
        }
        let pe_var = tape.constant(pe);
        let with_pos = tape.add(projb, pe_var);
        let tokens = self
            .stack
            .forward(tape, bound, prefix, with_pos, tokens_per_image);
        let pooled = tape.block_mean_rows(tokens, tokens_per_image);
        (tokens, pooled)
    }

    /// Convenience single-image forward from pixels; returns the token grid
    /// and the pooled embedding as plain arrays.
    pub fn encode_image(
        &self,
        store: &ParamStore,
        prefix: &str,
        pixels: &Array3<f64>,
    ) -> Result<(Array2<f64>, ndarray::Array1<f64>)> {
        let patches = patch_matrix(pixels, self.config.patch_size)?;
        let grid = (
            pixels.shape()[0] / self.config.patch_size,
            pixels.shape()[1] / self.config.patch_size,
        );
        let t = patches.nrows();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let pvar = tape.constant(patches);
        let (tokens, pooled) = self.forward_patches(&mut tape, &bound, prefix, pvar, t, grid);
        Ok((
            tape.value(tokens).clone(),
            tape.value(pooled).row(0).to_owned(),
        ))
    }
}
