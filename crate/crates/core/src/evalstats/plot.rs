//! Scatter-density plots: prediction vs. ground truth binned over a fixed
//! axis range with the y = x diagonal drawn. Binning and colors are pure
//! functions of the input, so emitted PNGs are byte-deterministic.

use std::path::Path;

use crate::error::{AqaError, Result};

use super::PredictionSet;

const BINS: usize = 100;
const CELL: usize = 4;
const SIZE: usize = BINS * CELL;

/// Axis range: the MOS scale.
const LO: f64 = 1.0;
const HI: f64 = 10.0;

fn heat(t: f64) -> [u8; 3] {
    // white -> orange -> red -> near-black
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [255.0, 255.0, 255.0]),
        (0.35, [253.0, 174.0, 97.0]),
        (0.7, [215.0, 25.0, 28.0]),
        (1.0, [40.0, 0.0, 10.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for w in stops.windows(2) {
        let (a, ca) = w[0];
        let (b, cb) = w[1];
        if t <= b {
            let f = if b > a { (t - a) / (b - a) } else { 0.0 };
            return [
                (ca[0] + f * (cb[0] - ca[0])).round() as u8,
                (ca[1] + f * (cb[1] - ca[1])).round() as u8,
                (ca[2] + f * (cb[2] - ca[2])).round() as u8,
            ];
        }
    }
    [40, 0, 10]
}

fn bin_of(v: f64) -> usize {
    (((v - LO) / (HI - LO) * BINS as f64).floor() as isize).clamp(0, BINS as isize - 1) as usize
}

/// Render the density scatter of one model to `path` (PNG).
pub fn emit_scatter(p: &PredictionSet, path: &Path) -> Result<()> {
    let mut counts = vec![0u32; BINS * BINS];
    for row in p.rows() {
        let bx = bin_of(row.target);
        let by = bin_of(row.pred);
        counts[by * BINS + bx] += 1;
    }
    let max = counts.iter().cloned().max().unwrap_or(0).max(1) as f64;
    let mut img = image::RgbImage::new(SIZE as u32, SIZE as u32);
    for by in 0..BINS {
        for bx in 0..BINS {
            let c = counts[by * BINS + bx] as f64;
            let t = if c > 0.0 {
                (1.0 + c).ln() / (1.0 + max).ln()
            } else {
                0.0
            };
            let rgb = heat(t);
            for dy in 0..CELL {
                for dx in 0..CELL {
                    // image y axis points down; predictions increase upward
                    let px = (bx * CELL + dx) as u32;
                    let py = (SIZE - 1 - (by * CELL + dy)) as u32;
                    img.put_pixel(px, py, image::Rgb(rgb));
                }
            }
        }
    }
    // y = x diagonal
    for i in 0..SIZE {
        let px = i as u32;
        let py = (SIZE - 1 - i) as u32;
        img.put_pixel(px, py, image::Rgb([70, 70, 200]));
    }
    img.save(path).map_err(|e| AqaError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
