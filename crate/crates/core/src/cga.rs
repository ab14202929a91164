//! Stage A: Contrastive Gaze Alignment.
//!
//! A dual-tower setup pairs each image with an aggregate of its own
//! scanpaths against in-batch distractors. The similarity matrix holds
//! cosine similarities of the pooled, unit-normalized tower outputs; the
//! loss is the symmetric InfoNCE objective (image-to-gaze and gaze-to-image
//! cross-entropy averaged), numerically stabilized by max-subtraction.
//!
//! Each tower's pooled embeddings are centered on their batch mean before
//! normalization. Freshly initialized towers map every input to nearly the
//! same vector (pairwise cosines > 0.999); centering removes that common
//! mode, without which the objective starts on the uniform-softmax plateau
//! and cannot move.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{ImageRecord, Scanpath};
use crate::encoders::{patch_matrix, GazeImageEncoder, ScanpathEncoder};
use crate::error::{AqaError, Result};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Encode every scanpath of an image and average before normalization.
    PerImageMean,
    /// Sample one scanpath per image per epoch.
    PerPath,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgaConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Contrast within batches of at most this size; smaller datasets run
    /// full-batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub base_lr: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub train_image_tower: bool,
    pub train_path_tower: bool,
    /// Epoch interval for retrieval diagnostics in the log.
    pub eval_interval: usize,
}

impl Default for CgaConfig {
    fn default() -> Self {
        CgaConfig {
            tau: 0.05,
            batch_size: 128,
            max_epochs: 200,
            base_lr: 3e-3,
            aggregation: Aggregation::PerImageMean,
            seed: 0,
            train_image_tower: true,
            train_path_tower: true,
            eval_interval: 10,
        }
    }
}

impl CgaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(AqaError::Config("tau must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(AqaError::Config("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// `s[i][j] = dot(v_i^I, v_j^G)`; with unit-normalized inputs these are
/// cosine similarities.
pub fn similarity(v_img: &Array2<f64>, v_gaze: &Array2<f64>) -> Result<Array2<f64>> {
    if v_img.dim() != v_gaze.dim() {
        return Err(AqaError::Validation(format!(
            "similarity dimension mismatch: {:?} vs {:?}",
            v_img.dim(),
            v_gaze.dim()
        )));
    }
    Ok(v_img.dot(&v_gaze.t()))
}

fn log_softmax_at(logits: &[f64], positive: usize) -> f64 {
    // max-subtraction with the max term peeled into ln_1p keeps full
    // precision even when the remaining mass is ~1e-9 of the total
    let max_idx = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let max = logits[max_idx];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != max_idx)
        .map(|(_, v)| (v - max).exp())
        .sum();
    (logits[positive] - max) - rest.ln_1p()
}

/// Symmetric InfoNCE over a square similarity matrix, with the analytic
/// gradient with respect to every entry.
pub fn cga_loss(s: &Array2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(AqaError::Validation("similarity matrix must be square".into()));
    }
    if n < 2 {
        return Err(AqaError::Validation(
            "InfoNCE needs at least two pairs (no negatives otherwise)".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(AqaError::Config("tau must be > 0".into()));
    }

    let mut loss = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| s[[i, j]] / tau).collect();
        let col: Vec<f64> = (0..n).map(|k| s[[k, i]] / tau).collect();
        loss -= log_softmax_at(&row, i) + log_softmax_at(&col, i);
    }
    loss /= 2.0 * n as f64;

    // grad[a][b] = (p_row[a][b] - delta_ab + p_col[a][b] - delta_ab) / (2 N tau)
    let mut grad = Array2::zeros((n, n));
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| s[[i, j]] / tau).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..n {
            grad[[i, j]] += exps[j] / z;
        }
        grad[[i, i]] -= 1.0;

        let col: Vec<f64> = (0..n).map(|k| s[[k, i]] / tau).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for k in 0..n {
            grad[[k, i]] += exps[k] / z;
        }
        grad[[i, i]] -= 1.0;
    }
    let scale = 1.0 / (2.0 * n as f64 * tau);
    grad.mapv_inplace(|v| v * scale);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mean_rank: f64,
}

/// Row-wise rank of the diagonal entry; ties break by column index (equal
/// entries at lower indices rank ahead).
pub fn retrieval_metrics(s: &Array2<f64>) -> Result<RetrievalMetrics> {
    let n = s.nrows();
    if s.ncols() != n || n == 0 {
        return Err(AqaError::Validation(
            "retrieval needs a non-empty square matrix".into(),
        ));
    }
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut rank_sum = 0usize;
    for i in 0..n {
        let diag = s[[i, i]];
        let mut rank = 1;
        for j in 0..n {
            if s[[i, j]] > diag || (s[[i, j]] == diag && j < i) {
                rank += 1;
            }
        }
        if rank <= 1 {
            hits1 += 1;
        }
        if rank <= 5 {
            hits5 += 1;
        }
        rank_sum += rank;
    }
    Ok(RetrievalMetrics {
        recall_at_1: hits1 as f64 / n as f64,
        recall_at_5: hits5 as f64 / n as f64,
        mean_rank: rank_sum as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgaEpochLog {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_5: Option<f64>,
    pub wall_time_s: f64,
}

pub struct CgaOutcome {
    pub store: ParamStore,
    pub log: Vec<CgaEpochLog>,
}

pub struct CgaData<'a> {
    pub records: &'a [ImageRecord],
    pub scanpaths: &'a [Scanpath],
}

fn group_paths<'a>(
    records: &[ImageRecord],
    scanpaths: &'a [Scanpath],
) -> Result<Vec<Vec<&'a Scanpath>>> {
    let mut by_id: BTreeMap<&str, Vec<&Scanpath>> = BTreeMap::new();
    for sp in scanpaths {
        by_id.entry(sp.image_id.as_str()).or_default().push(sp);
    }
    records
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .filter(|v| !v.is_empty())
                .cloned()
                .ok_or_else(|| AqaError::Validation(format!("image {:?} has no scanpaths", r.id)))
        })
        .collect()
}

/// Build both towers' pooled, normalized embeddings for a fixed set of
/// images (inference only; per-image-mean scanpath aggregation).
pub fn encode_pairs(
    img_enc: &GazeImageEncoder,
    path_enc: &ScanpathEncoder,
    store: &ParamStore,
    records: &[ImageRecord],
    scanpaths: &[Scanpath],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let grouped = group_paths(records, scanpaths)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let (v_img, v_gaze) = forward_pairs(
        &mut tape,
        &bound,
        img_enc,
        path_enc,
        records,
        &grouped,
        None,
    )?;
    Ok((tape.value(v_img).clone(), tape.value(v_gaze).clone()))
}

/// Shared forward: normalized `N x d` tower outputs on the tape. `pick`
/// selects one scanpath index per image (per-path mode); `None` averages
/// all of an image's path embeddings before normalization.
fn forward_pairs(
    tape: &mut Tape,
    bound: &crate::params::BoundVars,
    img_enc: &GazeImageEncoder,
    path_enc: &ScanpathEncoder,
    records: &[ImageRecord],
    grouped: &[Vec<&Scanpath>],
    pick: Option<&[usize]>,
) -> Result<(Var, Var)> {
    let patch = img_enc.config.patch_size;
    let (h, w) = (records[0].pixels.shape()[0], records[0].pixels.shape()[1]);
    let t = img_enc.token_count(h, w)?;
    let grid = (h / patch, w / patch);
    let mut stacked = Array2::zeros((records.len() * t, patch * patch * 3));
    for (i, rec) in records.iter().enumerate() {
        let pm = patch_matrix(&rec.pixels, patch)?;
        stacked
            .slice_mut(ndarray::s![i * t..(i + 1) * t, ..])
            .assign(&pm);
    }
    let patches = tape.constant(stacked);
    let (_, pooled) = img_enc.forward_patches(tape, bound, "img", patches, t, grid);
    let v_img = center_and_normalize(tape, pooled);

    let mut per_image: Vec<Var> = Vec::with_capacity(records.len());
    for (i, paths) in grouped.iter().enumerate() {
        let agg = match pick {
            Some(idx) => path_enc.forward_path(tape, bound, "path", paths[idx[i]]),
            None => {
                let encoded: Vec<Var> = paths
                    .iter()
                    .map(|p| path_enc.forward_path(tape, bound, "path", p))
                    .collect();
                let mut acc = encoded[0];
                for e in &encoded[1..] {
                    acc = tape.add(acc, *e);
                }
                tape.scale(acc, 1.0 / encoded.len() as f64)
            }
        };
        per_image.push(agg);
    }
    let gaze = tape.concat_rows(&per_image);
    let v_gaze = center_and_normalize(tape, gaze);
    Ok((v_img, v_gaze))
}

fn center_and_normalize(tape: &mut Tape, x: Var) -> Var {
    let mean = tape.mean_rows(x);
    let neg_mean = tape.scale(mean, -1.0);
    let centered = tape.add_row(x, neg_mean);
    tape.l2_normalize_rows(centered, NORM_EPS)
}

/// Initialize both towers' parameters in one store (`img.*`, `path.*`).
pub fn init_cga_params(img_enc: &GazeImageEncoder, path_enc: &ScanpathEncoder) -> ParamStore {
    let mut store = ParamStore::new();
    img_enc.init_params(&mut store, "img");
    path_enc.init_params(&mut store, "path");
    store
}

/// Pretrain the dual towers with the symmetric InfoNCE objective.
/// Deterministic given `config.seed`; an image without scanpaths fails
/// validation before any training step.
pub fn pretrain(
    data: CgaData,
    img_enc: &GazeImageEncoder,
    path_enc: &ScanpathEncoder,
    config: &CgaConfig,
) -> Result<CgaOutcome> {
    config.validate()?;
    if data.records.len() < 2 {
        return Err(AqaError::Validation(
            "pretraining needs at least two images".into(),
        ));
    }
    let grouped = group_paths(data.records, data.scanpaths)?;
    let mut store = init_cga_params(img_enc, path_enc);
    let mut log = Vec::new();
    if config.max_epochs == 0 {
        return Ok(CgaOutcome { store, log });
    }

    let n = data.records.len();
    let steps_per_epoch = n.div_ceil(config.batch_size).max(1);
    let schedule = CosineSchedule::new(
        config.base_lr,
        (config.max_epochs * steps_per_epoch) as u64,
    );
    let mut opt = AdamW::new(AdamWConfig::default(), store.len());
    let trainable = |name: &str| -> bool {
        (name.starts_with("img.") && config.train_image_tower)
            || (name.starts_with("path.") && config.train_path_tower)
    };
    let start = Instant::now();
    let mut step: u64 = 0;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let pick: Option<Vec<usize>> = match config.aggregation {
            Aggregation::PerImageMean => None,
            Aggregation::PerPath => Some(
                grouped
                    .iter()
                    .map(|paths| rng.random_range(0..paths.len()))
                    .collect(),
            ),
        };

        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let recs: Vec<ImageRecord> = chunk.iter().map(|&i| data.records[i].clone()).collect();
            let grp: Vec<Vec<&Scanpath>> = chunk.iter().map(|&i| grouped[i].clone()).collect();
            let pk: Option<Vec<usize>> =
                pick.as_ref().map(|p| chunk.iter().map(|&i| p[i]).collect());

            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, trainable);
            let (v_img, v_gaze) = forward_pairs(
                &mut tape,
                &bound,
                img_enc,
                path_enc,
                &recs,
                &grp,
                pk.as_deref(),
            )?;
            let vg_t = tape.transpose(v_gaze);
            let s = tape.matmul(v_img, vg_t);
            let tau = config.tau;
            let loss_var = tape.scalar_head(s, |sv| cga_loss(sv, tau))?;
            let loss = tape.scalar(loss_var);
            let grads = tape.backward(loss_var);
            let collected = store.collect_grads(&bound, &grads);
            opt.step(&mut store, &collected, schedule.lr(step));
            step += 1;
            epoch_loss += loss;
            batches += 1.0;
        }

        let mut entry = CgaEpochLog {
            epoch,
            loss: epoch_loss / batches.max(1.0),
            recall_at_1: None,
            recall_at_5: None,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if config.eval_interval > 0
            && (epoch % config.eval_interval == 0 || epoch + 1 == config.max_epochs)
        {
            let (vi, vg) = encode_pairs(img_enc, path_enc, &store, data.records, data.scanpaths)?;
            let s = similarity(&vi, &vg)?;
            let m = retrieval_metrics(&s)?;
            entry.recall_at_1 = Some(m.recall_at_1);
            entry.recall_at_5 = Some(m.recall_at_5);
        }
        log.push(entry);
    }
    Ok(CgaOutcome { store, log })
}

pub fn write_log(log: &[CgaEpochLog], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| AqaError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for entry in log {
        let line = serde_json::to_string(entry).map_err(|e| AqaError::Numeric(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| AqaError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use ndarray::arr2;

    fn rand_unit_rows(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        for mut row in m.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        m
    }

    #[test]
    fn similarity_orthonormal_gives_identity() {
        let v = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let s = similarity(&v, &v).unwrap();
        assert_eq!(s, Array2::<f64>::eye(3));
    }

    #[test]
    fn similarity_swapped_rows_antidiagonal() {
        let v = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let g = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let s = similarity(&v, &g).unwrap();
        assert_eq!(s, arr2(&[[0.0, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn similarity_matches_double_loop_oracle() {
        let vi = rand_unit_rows(0, 4, 8);
        let vg = rand_unit_rows(1, 4, 8);
        let s = similarity(&vi, &vg).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0.0;
                for k in 0..8 {
                    dot += vi[[i, k]] * vg[[j, k]];
                }
                assert!((s[[i, j]] - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_constant_matrix_is_ln_n() {
        for n in [2usize, 4, 16] {
            let s = Array2::from_elem((n, n), 0.37);
            let (loss, _) = cga_loss(&s, 0.05).unwrap();
            assert!(
                (loss - (n as f64).ln()).abs() < 1e-9,
                "n={n}: {loss} vs {}",
                (n as f64).ln()
            );
        }
    }

    #[test]
    fn loss_identity_matches_direct_evaluation() {
        // s = I, N=2, tau=0.05: every term is ln(1 + e^{-20})
        let s = Array2::eye(2);
        let (loss, _) = cga_loss(&s, 0.05).unwrap();
        let expected = (-20.0f64).exp().ln_1p();
        assert!(
            ((loss - expected) / expected).abs() < 1e-12,
            "{loss} vs {expected}"
        );
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let (_, grad) = cga_loss(&s, 0.05).unwrap();
        let flat: Vec<f64> = s.iter().cloned().collect();
        let numeric = central_diff(
            |x| {
                let m = Array2::from_shape_vec((5, 5), x.to_vec()).unwrap();
                cga_loss(&m, 0.05).unwrap().0
            },
            &flat,
            1e-5,
        );
        let analytic: Vec<f64> = grad.iter().cloned().collect();
        assert!(max_rel_err(&analytic, &numeric) <= 1e-5);
    }

    #[test]
    fn loss_nonnegative_and_needs_two() {
        let s = rand_unit_rows(2, 6, 4).dot(&rand_unit_rows(3, 6, 4).t());
        let (loss, _) = cga_loss(&s, 0.05).unwrap();
        assert!(loss >= 0.0);
        assert!(cga_loss(&Array2::<f64>::eye(1), 0.05).is_err());
    }

    #[test]
    fn loss_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 5;
        let s = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let perm = [3usize, 0, 4, 1, 2];
        let mut sp = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                sp[[i, j]] = s[[perm[i], perm[j]]];
            }
        }
        let (a, _) = cga_loss(&s, 0.05).unwrap();
        let (b, _) = cga_loss(&sp, 0.05).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_temperature_monotone_on_diag_dominant() {
        let n = 6;
        let mut s = Array2::from_elem((n, n), 0.1);
        for i in 0..n {
            s[[i, i]] = 0.9;
        }
        let losses: Vec<f64> = [0.5, 0.1, 0.05]
            .iter()
            .map(|&tau| cga_loss(&s, tau).unwrap().0)
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    }

    #[test]
    fn loss_stable_in_f32_replica() {
        // max-subtraction keeps every exponent <= 0, so a 32-bit replica of
        // the stabilized path stays finite at tau = 0.05 logits
        let s: Array2<f64> = Array2::eye(8);
        let tau = 0.05f32;
        let mut loss = 0.0f32;
        for i in 0..8 {
            let row: Vec<f32> = (0..8).map(|j| s[[i, j]] as f32 / tau).collect();
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            loss -= row[i] - lse;
        }
        assert!(loss.is_finite());
    }

    #[test]
    fn retrieval_identity_and_constant() {
        let m = retrieval_metrics(&Array2::eye(10)).unwrap();
        assert_eq!(m.recall_at_1, 1.0);
        assert_eq!(m.mean_rank, 1.0);

        let c = Array2::from_elem((10, 10), 0.5);
        let m = retrieval_metrics(&c).unwrap();
        // index tie-breaking: row i has i earlier equal entries
        assert!((m.recall_at_1 - 0.1).abs() < 1e-12);
        assert!((m.recall_at_5 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn retrieval_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
        let m = retrieval_metrics(&s).unwrap();
        // oracle: explicit sort of each row with stable index tie-breaking
        let mut hits1 = 0;
        let mut ranks = 0.0;
        for i in 0..6 {
            let mut idx: Vec<usize> = (0..6).collect();
            idx.sort_by(|&a, &b| s[[i, b]].partial_cmp(&s[[i, a]]).unwrap().then(a.cmp(&b)));
            let rank = idx.iter().position(|&j| j == i).unwrap() + 1;
            if rank == 1 {
                hits1 += 1;
            }
            ranks += rank as f64;
        }
        assert!((m.recall_at_1 - hits1 as f64 / 6.0).abs() < 1e-12);
        assert!((m.mean_rank - ranks / 6.0).abs() < 1e-12);
    }
}
