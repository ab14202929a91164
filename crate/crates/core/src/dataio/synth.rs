//! Synthetic dataset generator with known latent structure.
//!
//! Every image is rendered from two scalar latents drawn uniformly from
//! `[-1, 1]`:
//!
//! * `z_s` (semantic factor) picks the foreground motif (circle / square /
//!   triangle / diamond) and its hue;
//! * `z_g` (compositional factor) places the focal point along the image
//!   diagonal, orients the faint background luminance gradient, and scales
//!   the foreground/background chroma contrast.
//!
//! The motif is drawn luminance-neutral (its three channels always average
//! to the local background level), so composition is carried by *where*
//! color sits rather than by global intensity statistics.
//!
//! The score is `clip(5.5 + alpha * f_s(z_s) + beta * f_g(z_g) + eps, 1, 10)`
//! with `eps ~ N(0, noise_sigma)`; the clip intentionally censors the noise
//! at the MOS bounds. `f_s(z) = tanh(1.5 z) / tanh(1.5)` and `f_g(z) = z^3`
//! are fixed odd monotone maps onto `[-1, 1]`.
//!
//! Scanpaths: fixation positions are i.i.d. draws from an equal-weight
//! mixture of a center-bias Gaussian (`sigma = center_bias_sigma`) and a
//! saliency Gaussian at the focal point (`sigma = SALIENCY_SIGMA`), clipped
//! at the image borders (clipping, not rejection, preserves fixation
//! counts). The visit order is chosen greedily so that successive jumps
//! best match saccade amplitudes drawn from `Gamma(saccade_shape,
//! saccade_scale)`; durations are log-normal around 220 ms.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Fixation, ImageRecord, ManifestEntry, Scanpath};
use crate::error::{AqaError, Result};

/// Mixture weight of the center-bias component of the fixation density.
pub const CENTER_MIX_WEIGHT: f64 = 0.5;
/// Spread of the saliency component around the focal point.
pub const SALIENCY_SIGMA: f64 = 0.08;
/// Log-normal duration parameters (median 220 ms).
pub const DURATION_LN_MU: f64 = 5.393_627_546_352_362; // ln(220)
pub const DURATION_LN_SIGMA: f64 = 0.35;

pub const CATEGORIES: [&str; 8] = [
    "circle-cool",
    "circle-warm",
    "square-cool",
    "square-warm",
    "triangle-cool",
    "triangle-warm",
    "diamond-cool",
    "diamond-warm",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: (usize, usize),
    /// Weight of the semantic factor in the score.
    pub alpha: f64,
    /// Weight of the compositional factor in the score.
    pub beta: f64,
    pub noise_sigma: f64,
    pub observers_per_image: usize,
    pub fixations_per_path: usize,
    pub center_bias_sigma: f64,
    pub saccade_shape: f64,
    pub saccade_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 32,
            image_size: (64, 64),
            alpha: 1.0,
            beta: 1.0,
            noise_sigma: 0.3,
            observers_per_image: 3,
            fixations_per_path: 12,
            center_bias_sigma: 0.18,
            saccade_shape: 2.0,
            saccade_scale: 0.12,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(AqaError::Config("alpha and beta must be >= 0".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(AqaError::Config("noise_sigma must be >= 0".into()));
        }
        if self.n_images < 1
            || self.observers_per_image < 1
            || self.fixations_per_path < 1
            || self.image_size.0 < 1
            || self.image_size.1 < 1
        {
            return Err(AqaError::Config("all counts must be >= 1".into()));
        }
        if self.center_bias_sigma <= 0.0 || self.saccade_shape <= 0.0 || self.saccade_scale <= 0.0
        {
            return Err(AqaError::Config(
                "center_bias_sigma, saccade_shape, saccade_scale must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Latents {
    pub id: String,
    pub z_s: f64,
    pub z_g: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub records: Vec<ImageRecord>,
    pub scanpaths: Vec<Scanpath>,
    pub latents: Vec<Latents>,
}

/// Semantic score map: odd, strictly monotone, onto `[-1, 1]`.
pub fn f_semantic(z: f64) -> f64 {
    (1.5 * z).tanh() / 1.5f64.tanh()
}

/// Compositional score map: odd, strictly monotone, onto `[-1, 1]`.
pub fn f_compositional(z: f64) -> f64 {
    z * z * z
}

/// Focal point in normalized coordinates, moving along the image diagonal.
pub fn focal_point(z_g: f64) -> (f64, f64) {
    (0.5 + 0.32 * z_g, 0.5 - 0.32 * z_g)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn category_bin(z_s: f64) -> usize {
    (((z_s + 1.0) / 2.0 * 8.0).floor() as isize).clamp(0, 7) as usize
}

fn inside_motif(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.82 * r && dy.abs() <= 0.82 * r,
        2 => dy.abs() <= r && dx.abs() <= (r - dy) * 0.5,
        _ => dx.abs() + dy.abs() <= 1.2 * r,
    }
}

/// Render one image from its latents. Pixel values are quantized to the
/// 8-bit grid (`k / 255`), so saving and reloading is lossless.
pub fn render_image(z_s: f64, z_g: f64, height: usize, width: usize) -> Array3<f64> {
    let bin = category_bin(z_s);
    let shape = bin / 2;
    // hue spans 300 degrees so the two ends of the z_s range stay distinct
    let hue = (z_s + 1.0) / 2.0 * (5.0 * std::f64::consts::PI / 3.0);
    let chroma = 0.45 + 0.25 * z_g;
    let grad_angle = 0.9 * std::f64::consts::PI * z_g;
    let (fx, fy) = focal_point(z_g);
    let r = 0.2 * height.min(width) as f64;
    let cx = fx * width as f64;
    let cy = fy * height as f64;

    let mut pixels = Array3::zeros((height, width, 3));
    let third = 2.0 * std::f64::consts::PI / 3.0;
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width as f64 - 0.5;
            let v = y as f64 / height as f64 - 0.5;
            let level = 0.45 + 0.1 * (u * grad_angle.cos() + v * grad_angle.sin());
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            for c in 0..3 {
                let val = if inside_motif(shape, dx, dy, r) {
                    // channels average to `level`: the motif carries hue, not luminance
                    level * (1.0 + chroma * (hue - c as f64 * third).cos())
                } else {
                    level
                };
                pixels[[y, x, c]] = (val.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    pixels
}

fn sample_mixture_point(
    rng: &mut ChaCha8Rng,
    focal: (f64, f64),
    center_sigma: f64,
) -> (f64, f64) {
    let (mu, sigma) = if rng.random_range(0.0..1.0) < CENTER_MIX_WEIGHT {
        ((0.5, 0.5), center_sigma)
    } else {
        (focal, SALIENCY_SIGMA)
    };
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    let x = (mu.0 + n.sample(rng)).clamp(0.0, 1.0);
    let y = (mu.1 + n.sample(rng)).clamp(0.0, 1.0);
    (x, y)
}

fn sample_scanpath(rng: &mut ChaCha8Rng, z_g: f64, cfg: &SynthConfig) -> Vec<Fixation> {
    let n = cfg.fixations_per_path;
    let focal = focal_point(z_g);
    let points: Vec<(f64, f64)> = (0..n)
        .map(|_| sample_mixture_point(rng, focal, cfg.center_bias_sigma))
        .collect();

    // Visit order: start nearest the screen center, then greedily pick the
    // remaining point whose distance best matches the next Gamma amplitude.
    let gamma = Gamma::new(cfg.saccade_shape, cfg.saccade_scale).expect("valid gamma");
    let amplitudes: Vec<f64> = (0..n.saturating_sub(1)).map(|_| gamma.sample(rng)).collect();
    let lognormal = LogNormal::new(DURATION_LN_MU, DURATION_LN_SIGMA).expect("valid lognormal");

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let start = (0..n)
        .min_by(|&a, &b| {
            let da = (points[a].0 - 0.5).hypot(points[a].1 - 0.5);
            let db = (points[b].0 - 0.5).hypot(points[b].1 - 0.5);
            da.partial_cmp(&db).unwrap()
        })
        .unwrap_or(0);
    visited[start] = true;
    order.push(start);
    for amp in &amplitudes {
        let cur = points[*order.last().unwrap()];
        let next = (0..n)
            .filter(|&i| !visited[i])
            .min_by(|&a, &b| {
                let da = ((points[a].0 - cur.0).hypot(points[a].1 - cur.1) - amp).abs();
                let db = ((points[b].0 - cur.0).hypot(points[b].1 - cur.1) - amp).abs();
                da.partial_cmp(&db).unwrap()
            })
            .expect("points remain");
        visited[next] = true;
        order.push(next);
    }

    order
        .into_iter()
        .map(|i| Fixation {
            x: points[i].0,
            y: points[i].1,
            duration_ms: lognormal.sample(rng),
        })
        .collect()
}

/// Generate the full synthetic dataset. Deterministic given the seed; each
/// image's scanpaths come from a sub-stream keyed on (seed, image, observer)
/// so per-image generation is order-independent.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let mut master = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-300)).expect("valid sigma");

    let mut records = Vec::with_capacity(cfg.n_images);
    let mut scanpaths = Vec::new();
    let mut latents = Vec::with_capacity(cfg.n_images);

    for idx in 0..cfg.n_images {
        let id = format!("synth-{idx:05}");
        let z_s: f64 = master.random_range(-1.0..1.0);
        let z_g: f64 = master.random_range(-1.0..1.0);
        let eps = if cfg.noise_sigma > 0.0 {
            noise.sample(&mut master)
        } else {
            0.0
        };
        let score = (5.5 + cfg.alpha * f_semantic(z_s) + cfg.beta * f_compositional(z_g) + eps)
            .clamp(1.0, 10.0);
        let pixels = render_image(z_s, z_g, h, w);
        records.push(ImageRecord {
            id: id.clone(),
            pixels,
            score,
            category: CATEGORIES[category_bin(z_s)].to_string(),
        });
        latents.push(Latents {
            id: id.clone(),
            z_s,
            z_g,
        });

        for obs in 0..cfg.observers_per_image {
            let sub = splitmix64(cfg.seed ^ splitmix64((idx as u64) << 20 | obs as u64 + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            scanpaths.push(Scanpath {
                image_id: id.clone(),
                observer_id: format!("obs-{obs:02}"),
                fixations: sample_scanpath(&mut rng, z_g, cfg),
            });
        }
    }

    Ok(SynthOutput {
        records,
        scanpaths,
        latents,
    })
}

/// Write a generated dataset as `images/`, `manifest`, `scanpaths`,
/// `latents` under `out_dir`.
pub fn write_synth_dataset(out_dir: &Path, output: &SynthOutput) -> Result<()> {
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| AqaError::io(&images, e))?;
    let mut entries = Vec::with_capacity(output.records.len());
    for rec in &output.records {
        let rel = format!("images/{}.png", rec.id);
        super::save_image(&rec.pixels.view(), &out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: rec.id.clone(),
            path: rel,
            score: rec.score,
            category: rec.category.clone(),
        });
    }
    DatasetManifest::write(&entries, &out_dir.join("manifest"))?;
    super::write_scanpaths(&output.scanpaths, &out_dir.join("scanpaths"))?;
    write_latents(&output.latents, &out_dir.join("latents"))?;
    Ok(())
}

pub fn write_latents(latents: &[Latents], path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| AqaError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for l in latents {
        let line = serde_json::to_string(l).map_err(|e| AqaError::Numeric(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| AqaError::io(path, e))?;
    }
    Ok(())
}

pub fn load_latents(path: &Path) -> Result<Vec<Latents>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| AqaError::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AqaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| AqaError::parse(path, i + 1, e.to_string()))?,
        );
    }
    Ok(out)
}
