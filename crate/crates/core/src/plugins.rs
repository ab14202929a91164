//! Plug-and-play gaze augmentation of host models.
//!
//! Two strategies, mirroring the host's accessibility:
//!
//! * feature-level fusion — concatenate gaze features with the host's
//!   penultimate feature vector (host first, gaze second) and train only a
//!   new regression head on top;
//! * score-level correction — `S_final = S_host + lambda * S_gaze`, a pure
//!   function of two score tables that never touches the host. `S_gaze` is
//!   mean-centered on the calibration split so lambda cannot fit a global
//!   bias, and the fitted lambda is the closed-form least-squares solution
//!   (lambda = 0 is feasible, so calibration MSE never increases).
//!
//! Host feature files use the embedding-table format; host score files are
//! JSON lines `{"id", "score"}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ImageRecord;
use crate::encoders::{patch_matrix, EmbeddingTable, GazeImageEncoder};
use crate::error::{AqaError, Result};
use crate::fusion::{FusionEpochLog, FusionTrainConfig, TargetNorm};
use crate::objectives::{self, ScoreBatch};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::params::ParamStore;
use crate::tape::Tape;

/// Concatenation `f_host (+) f_gaze`, host entries first.
pub fn feature_fuse(f_host: &Array1<f64>, f_gaze: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(f_host.len() + f_gaze.len());
    out.slice_mut(ndarray::s![..f_host.len()]).assign(f_host);
    out.slice_mut(ndarray::s![f_host.len()..]).assign(f_gaze);
    out
}

/// Id-aligned scalar scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    map: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    id: String,
    score: f64,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, f64)>) -> Self {
        ScoreTable {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, score: f64) {
        self.map.insert(id.into(), score);
    }

    pub fn get(&self, id: &str) -> Result<f64> {
        self.map
            .get(id)
            .copied()
            .ok_or_else(|| AqaError::MissingId(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let file = std::fs::File::create(path).map_err(|e| AqaError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (id, score) in self.iter() {
            let line = serde_json::to_string(&ScoreLine {
                id: id.to_string(),
                score,
            })
            .map_err(|e| AqaError::Numeric(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| AqaError::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        use std::io::BufRead;
        let file = std::fs::File::open(path).map_err(|e| AqaError::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut table = ScoreTable::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| AqaError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScoreLine = serde_json::from_str(&line)
                .map_err(|e| AqaError::parse(path, i + 1, e.to_string()))?;
            if !parsed.score.is_finite() {
                return Err(AqaError::Validation(format!(
                    "non-finite score for id {:?}",
                    parsed.id
                )));
            }
            table.insert(parsed.id, parsed.score);
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub lambda: f64,
    pub fit_lambda: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            lambda: 0.5,
            fit_lambda: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrectionFit {
    pub lambda: f64,
    /// Mean of `S_gaze` on the calibration split, subtracted before scaling.
    pub gaze_center: f64,
}

fn require_matching_ids(a: &ScoreTable, b: &ScoreTable) -> Result<()> {
    if a.len() != b.len() || a.ids().zip(b.ids()).any(|(x, y)| x != y) {
        return Err(AqaError::Validation(
            "score tables cover different id sets".into(),
        ));
    }
    Ok(())
}

/// Closed-form least squares of the calibration residuals `y - S_host`
/// against centered `S_gaze`.
pub fn fit_correction(
    host: &ScoreTable,
    gaze: &ScoreTable,
    truth: &ScoreTable,
) -> Result<CorrectionFit> {
    require_matching_ids(host, gaze)?;
    require_matching_ids(host, truth)?;
    if host.is_empty() {
        return Err(AqaError::Validation("empty calibration split".into()));
    }
    let n = host.len() as f64;
    let center = gaze.iter().map(|(_, v)| v).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (id, s_host) in host.iter() {
        let g = gaze.get(id)? - center;
        let r = truth.get(id)? - s_host;
        num += r * g;
        den += g * g;
    }
    let lambda = if den > 0.0 { num / den } else { 0.0 };
    Ok(CorrectionFit {
        lambda,
        gaze_center: center,
    })
}

/// `S_final = S_host + lambda * (S_gaze - gaze_center)`, elementwise over a
/// shared id set. Pure function of the two tables.
pub fn score_correct(
    host: &ScoreTable,
    gaze: &ScoreTable,
    lambda: f64,
    gaze_center: f64,
) -> Result<ScoreTable> {
    require_matching_ids(host, gaze)?;
    let mut out = ScoreTable::new();
    for (id, s_host) in host.iter() {
        out.insert(id, s_host + lambda * (gaze.get(id)? - gaze_center));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generic feature-head training (fused heads, host heads, gaze-only heads)
// ---------------------------------------------------------------------------

/// A regression head over fixed feature vectors: linear when `hidden == 0`,
/// otherwise one GELU hidden layer.
pub struct FeatureRegressor {
    pub store: ParamStore,
    pub norm: TargetNorm,
    pub in_dim: usize,
    pub hidden: usize,
}

impl FeatureRegressor {
    fn init(in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
        if hidden == 0 {
            store.insert_fan_in("head.w", in_dim, 1, &mut rng);
            store.insert_const("head.b", 1, 1, 0.0);
        } else {
            store.insert_fan_in("head.w1", in_dim, hidden, &mut rng);
            store.insert_const("head.b1", 1, hidden, 0.0);
            store.insert_fan_in("head.w2", hidden, 1, &mut rng);
            store.insert_const("head.b2", 1, 1, 0.0);
        }
        FeatureRegressor {
            store,
            norm: TargetNorm { mean: 0.0, std: 1.0 },
            in_dim,
            hidden,
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &crate::params::BoundVars, x: crate::tape::Var) -> crate::tape::Var {
        if self.hidden == 0 {
            let z = tape.matmul(x, bound.var("head.w"));
            tape.add_row(z, bound.var("head.b"))
        } else {
            let h1 = tape.matmul(x, bound.var("head.w1"));
            let h1b = tape.add_row(h1, bound.var("head.b1"));
            let act = tape.gelu(h1b);
            let h2 = tape.matmul(act, bound.var("head.w2"));
            tape.add_row(h2, bound.var("head.b2"))
        }
    }

    /// Predictions in original score units, one per feature row.
    pub fn predict(&self, features: &Array2<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, |_| false);
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, &bound, x);
        tape.value(out)
            .column(0)
            .iter()
            .map(|z| self.norm.denormalize(*z))
            .collect()
    }
}

/// Train a regression head on precomputed features with the hybrid loss and
/// validation-PLCC early stopping (same protocol as the fusion trainer).
pub fn train_feature_head(
    x_train: &Array2<f64>,
    y_train: &[f64],
    x_val: &Array2<f64>,
    y_val: &[f64],
    hidden: usize,
    cfg: &FusionTrainConfig,
) -> Result<(FeatureRegressor, Vec<FusionEpochLog>)> {
    if x_train.nrows() != y_train.len() || x_val.nrows() != y_val.len() {
        return Err(AqaError::Validation("feature/target length mismatch".into()));
    }
    if x_train.nrows() < 2 || x_val.nrows() < 2 {
        return Err(AqaError::Validation("need at least two samples per split".into()));
    }
    let mut reg = FeatureRegressor::init(x_train.ncols(), hidden, cfg.seed);
    reg.norm = TargetNorm::fit(y_train)?;
    let targets: Vec<f64> = y_train.iter().map(|y| reg.norm.normalize(*y)).collect();

    let n = x_train.nrows();
    let steps_per_epoch = n.div_ceil(cfg.batch_size).max(1);
    let schedule = CosineSchedule::new(cfg.base_lr, (cfg.max_epochs * steps_per_epoch) as u64);
    let mut opt = AdamW::new(AdamWConfig::default(), reg.store.len());

    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0usize;
    let mut log = Vec::new();
    let start = Instant::now();
    let mut step = 0u64;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xC0FFEE));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut xb = Array2::zeros((chunk.len(), x_train.ncols()));
            let mut tb = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&x_train.row(i));
                tb.push(targets[i]);
            }
            let mut tape = Tape::new();
            let bound = reg.store.bind_all(&mut tape);
            let x = tape.constant(xb);
            let pred = reg.forward(&mut tape, &bound, x);
            let loss_cfg = cfg.loss;
            let lv = tape.scalar_head(pred, |p| objectives::hybrid_head(p, &tb, &loss_cfg))?;
            epoch_loss += tape.scalar(lv);
            batches += 1.0;
            let grads = tape.backward(lv);
            let collected = reg.store.collect_grads(&bound, &grads);
            opt.step(&mut reg.store, &collected, schedule.lr(step));
            step += 1;
        }

        let val_preds = reg.predict(x_val);
        let batch = ScoreBatch::new(&val_preds, y_val)?;
        let val_plcc = objectives::plcc_differentiable(&batch, 1e-8)?.value;
        log.push(FusionEpochLog {
            epoch,
            train_loss: epoch_loss / batches.max(1.0),
            val_plcc,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        let improved = best.as_ref().map_or(true, |(b, _, _)| val_plcc > *b);
        if improved {
            best = Some((val_plcc, reg.store.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    let (_, best_store, _) = best.expect("at least one epoch ran");
    reg.store = best_store;
    Ok((reg, log))
}

/// Normalized pooled GAVE embeddings for a set of images, as an id-keyed
/// table (the gaze feature source for both plug-in strategies).
pub fn gave_feature_table(
    enc: &GazeImageEncoder,
    store: &ParamStore,
    records: &[ImageRecord],
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(enc.config.d);
    if records.is_empty() {
        return Ok(table);
    }
    let patch = enc.config.patch_size;
    let (h, w) = (records[0].pixels.shape()[0], records[0].pixels.shape()[1]);
    let t = enc.token_count(h, w)?;
    // chunk to bound tape size
    for chunk in records.chunks(256) {
        let mut stacked = Array2::zeros((chunk.len() * t, patch * patch * 3));
        for (i, rec) in chunk.iter().enumerate() {
            stacked
                .slice_mut(ndarray::s![i * t..(i + 1) * t, ..])
                .assign(&patch_matrix(&rec.pixels, patch)?);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let pv = tape.constant(stacked);
        let (_, pooled) = enc.forward_patches(&mut tape, &bound, "img", pv, t, (h / patch, w / patch));
        let normed = tape.l2_normalize_rows(pooled, crate::cga::NORM_EPS);
        let vals = tape.value(normed);
        for (i, rec) in chunk.iter().enumerate() {
            table.insert(rec.id.clone(), vals.row(i).to_owned())?;
        }
    }
    Ok(table)
}

/// Assemble an `N x (d_host + d_gaze)` fused design matrix for the given
/// records. Either table may be empty-width (width 0 drops that side).
pub fn fused_design(
    records: &[ImageRecord],
    host: &EmbeddingTable,
    gaze: Option<&EmbeddingTable>,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let d_gaze = gaze.map_or(0, |g| g.width());
    let mut x = Array2::zeros((records.len(), host.width() + d_gaze));
    let mut y = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let fh = host.get(&rec.id)?;
        let fused = match gaze {
            Some(g) => feature_fuse(fh, g.get(&rec.id)?),
            None => fh.clone(),
        };
        x.row_mut(i).assign(&fused);
        y.push(rec.score);
    }
    Ok((x, y))
}

// ---------------------------------------------------------------------------
// Synthetic host models
// ---------------------------------------------------------------------------

pub mod hosts {
    //! Two self-contained host models for plug-and-play experiments: a
    //! linear head over the hand-crafted semantic features, and a small
    //! patch-pooling regressor (shared patch projection, GELU, mean pool,
    //! linear head) whose pooled hidden layer is the penultimate feature.

    use super::*;
    use crate::encoders::{semantic_features, SEMANTIC_FEATURE_DIM};

    /// Penultimate features of the semantic-linear host: the raw recipe
    /// feature vector.
    pub fn semantic_host_features(records: &[ImageRecord]) -> Result<EmbeddingTable> {
        let mut table = EmbeddingTable::new(SEMANTIC_FEATURE_DIM);
        for rec in records {
            table.insert(rec.id.clone(), semantic_features(&rec.pixels)?)?;
        }
        Ok(table)
    }

    /// Patch-pooling regressor: `patches -> linear -> GELU -> mean-pool`.
    pub struct PatchPoolHost {
        pub store: ParamStore,
        pub norm: TargetNorm,
        pub patch: usize,
        pub hidden: usize,
    }

    impl PatchPoolHost {
        pub fn init(patch: usize, hidden: usize, seed: u64) -> Self {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCAFE);
            store.insert_fan_in("pp.w1", patch * patch * 3, hidden, &mut rng);
            store.insert_const("pp.b1", 1, hidden, 0.0);
            store.insert_fan_in("pp.w2", hidden, 1, &mut rng);
            store.insert_const("pp.b2", 1, 1, 0.0);
            PatchPoolHost {
                store,
                norm: TargetNorm { mean: 0.0, std: 1.0 },
                patch,
                hidden,
            }
        }

        /// Pooled hidden activations (the penultimate feature vector).
        pub fn features(&self, rec: &ImageRecord) -> Result<Array1<f64>> {
            let pm = patch_matrix(&rec.pixels, self.patch)?;
            let h1 = pm.dot(self.store.get("pp.w1")) + &self.store.get("pp.b1").row(0);
            let act = h1.mapv(crate::tape::gelu_scalar);
            Ok(act.mean_axis(ndarray::Axis(0)).expect("nonempty"))
        }

        pub fn feature_table(&self, records: &[ImageRecord]) -> Result<EmbeddingTable> {
            let mut table = EmbeddingTable::new(self.hidden);
            for rec in records {
                table.insert(rec.id.clone(), self.features(rec)?)?;
            }
            Ok(table)
        }

        pub fn predict(&self, rec: &ImageRecord) -> Result<f64> {
            let f = self.features(rec)?;
            let z = f.dot(&self.store.get("pp.w2").column(0)) + self.store.get("pp.b2")[[0, 0]];
            Ok(self.norm.denormalize(z))
        }
    }

    /// Train the patch-pooling host end to end with the hybrid loss.
    pub fn train_patch_pool_host(
        train_recs: &[ImageRecord],
        val_recs: &[ImageRecord],
        patch: usize,
        hidden: usize,
        cfg: &FusionTrainConfig,
    ) -> Result<PatchPoolHost> {
        if train_recs.len() < 2 || val_recs.len() < 2 {
            return Err(AqaError::Validation("need at least two samples per split".into()));
        }
        let mut host = PatchPoolHost::init(patch, hidden, cfg.seed);
        let y_train: Vec<f64> = train_recs.iter().map(|r| r.score).collect();
        host.norm = TargetNorm::fit(&y_train)?;
        let targets: Vec<f64> = y_train.iter().map(|y| host.norm.normalize(*y)).collect();
        let patches: Vec<Array2<f64>> = train_recs
            .iter()
            .map(|r| patch_matrix(&r.pixels, patch))
            .collect::<Result<_>>()?;
        let t = patches[0].nrows();

        let n = train_recs.len();
        let steps_per_epoch = n.div_ceil(cfg.batch_size).max(1);
        let schedule = CosineSchedule::new(cfg.base_lr, (cfg.max_epochs * steps_per_epoch) as u64);
        let mut opt = AdamW::new(AdamWConfig::default(), host.store.len());
        let mut best: Option<(f64, ParamStore)> = None;
        let mut since_best = 0usize;

        for epoch in 0..cfg.max_epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xBEEF));
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut step = (epoch * steps_per_epoch) as u64;
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let mut stacked = Array2::zeros((chunk.len() * t, patch * patch * 3));
                let mut tb = Vec::with_capacity(chunk.len());
                for (r, &i) in chunk.iter().enumerate() {
                    stacked
                        .slice_mut(ndarray::s![r * t..(r + 1) * t, ..])
                        .assign(&patches[i]);
                    tb.push(targets[i]);
                }
                let mut tape = Tape::new();
                let bound = host.store.bind_all(&mut tape);
                let x = tape.constant(stacked);
                let h1 = tape.matmul(x, bound.var("pp.w1"));
                let h1b = tape.add_row(h1, bound.var("pp.b1"));
                let act = tape.gelu(h1b);
                let pooled = tape.block_mean_rows(act, t);
                let z = tape.matmul(pooled, bound.var("pp.w2"));
                let pred = tape.add_row(z, bound.var("pp.b2"));
                let loss_cfg = cfg.loss;
                let lv = tape.scalar_head(pred, |p| objectives::hybrid_head(p, &tb, &loss_cfg))?;
                let grads = tape.backward(lv);
                let collected = host.store.collect_grads(&bound, &grads);
                opt.step(&mut host.store, &collected, schedule.lr(step));
                step += 1;
            }
            let val_preds: Vec<f64> = val_recs
                .iter()
                .map(|r| host.predict(r))
                .collect::<Result<_>>()?;
            let y_val: Vec<f64> = val_recs.iter().map(|r| r.score).collect();
            let batch = ScoreBatch::new(&val_preds, &y_val)?;
            let val_plcc = objectives::plcc_differentiable(&batch, 1e-8)?.value;
            let improved = best.as_ref().map_or(true, |(b, _)| val_plcc > *b);
            if improved {
                best = Some((val_plcc, host.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > cfg.patience {
                    break;
                }
            }
        }
        host.store = best.expect("at least one epoch ran").1;
        Ok(host)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn fuse_concat_semantics() {
        let host = arr1(&[1.0, 2.0, 3.0, 4.0]);
        let gaze = arr1(&[5.0, 6.0, 7.0]);
        let fused = feature_fuse(&host, &gaze);
        assert_eq!(fused.len(), 7);
        assert_eq!(fused.slice(ndarray::s![..4]).to_owned(), host);
        assert_eq!(fused.slice(ndarray::s![4..]).to_owned(), gaze);
    }

    #[test]
    fn fuse_empty_gaze_is_identity() {
        let host = arr1(&[1.0, 2.0]);
        let fused = feature_fuse(&host, &arr1(&[]));
        assert_eq!(fused, host);
    }

    #[test]
    fn score_correct_lambda_zero_is_identity() {
        let host = ScoreTable::from_pairs([("a".into(), 5.0), ("b".into(), 3.0)]);
        let gaze = ScoreTable::from_pairs([("a".into(), 1.0), ("b".into(), -1.0)]);
        let out = score_correct(&host, &gaze, 0.0, 0.0).unwrap();
        assert_eq!(out, host);
    }

    #[test]
    fn score_correct_direct_formula() {
        let host = ScoreTable::from_pairs([("a".into(), 5.0)]);
        let gaze = ScoreTable::from_pairs([("a".into(), 1.0)]);
        let out = score_correct(&host, &gaze, 0.5, 0.0).unwrap();
        assert_eq!(out.get("a").unwrap(), 5.5);
    }

    #[test]
    fn score_correct_id_mismatch_rejected() {
        let host = ScoreTable::from_pairs([("a".into(), 5.0)]);
        let gaze = ScoreTable::from_pairs([("b".into(), 1.0)]);
        assert!(score_correct(&host, &gaze, 0.5, 0.0).is_err());
    }

    #[test]
    fn fitted_lambda_matches_normal_equation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<String> = (0..40).map(|i| format!("id{i:02}")).collect();
        let mut host = ScoreTable::new();
        let mut gaze = ScoreTable::new();
        let mut truth = ScoreTable::new();
        for id in &ids {
            let g: f64 = rng.random_range(-1.0..1.0);
            let y: f64 = rng.random_range(3.0..8.0);
            let h = y - 0.8 * g + rng.random_range(-0.1..0.1);
            host.insert(id.clone(), h);
            gaze.insert(id.clone(), g);
            truth.insert(id.clone(), y);
        }
        let fit = fit_correction(&host, &gaze, &truth).unwrap();

        // oracle: explicit normal equation on centered gaze scores
        let n = ids.len() as f64;
        let center: f64 = gaze.iter().map(|(_, v)| v).sum::<f64>() / n;
        let (mut num, mut den) = (0.0, 0.0);
        for id in &ids {
            let g = gaze.get(id).unwrap() - center;
            let r = truth.get(id).unwrap() - host.get(id).unwrap();
            num += r * g;
            den += g * g;
        }
        assert!((fit.lambda - num / den).abs() < 1e-10);
        assert!((fit.gaze_center - center).abs() < 1e-12);
    }

    #[test]
    fn fitted_correction_never_increases_calibration_mse() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut host = ScoreTable::new();
            let mut gaze = ScoreTable::new();
            let mut truth = ScoreTable::new();
            for i in 0..30 {
                let id = format!("x{i:02}");
                host.insert(id.clone(), rng.random_range(2.0..9.0));
                gaze.insert(id.clone(), rng.random_range(-2.0..2.0));
                truth.insert(id.clone(), rng.random_range(1.0..10.0));
            }
            let fit = fit_correction(&host, &gaze, &truth).unwrap();
            let corrected = score_correct(&host, &gaze, fit.lambda, fit.gaze_center).unwrap();
            let mse = |t: &ScoreTable| -> f64 {
                t.iter()
                    .map(|(id, v)| {
                        let d = v - truth.get(id).unwrap();
                        d * d
                    })
                    .sum::<f64>()
                    / t.len() as f64
            };
            assert!(
                mse(&corrected) <= mse(&host) + 1e-12,
                "seed {seed}: fitted correction increased calibration MSE"
            );
        }
    }

    #[test]
    fn correction_is_non_intrusive() {
        let host = ScoreTable::from_pairs([("a".into(), 5.0), ("b".into(), 3.0)]);
        let gaze = ScoreTable::from_pairs([("a".into(), 1.0), ("b".into(), -1.0)]);
        let before = host.clone();
        let _ = score_correct(&host, &gaze, 0.7, 0.1).unwrap();
        assert_eq!(host, before);
    }

    #[test]
    fn score_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores");
        let t = ScoreTable::from_pairs([("a".into(), 5.123456789), ("b".into(), 3.0)]);
        t.save(&path).unwrap();
        assert_eq!(ScoreTable::load(&path).unwrap(), t);
    }

    #[test]
    fn feature_head_with_zero_width_gaze_reduces_to_host_only() {
        // identical training with and without an empty gaze table
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 24;
        let x = Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n)
            .map(|i| 5.0 + x.row(i).sum() * 0.5 + rng.random_range(-0.05..0.05))
            .collect();
        let cfg = FusionTrainConfig {
            batch_size: 8,
            max_epochs: 5,
            patience: 5,
            ..Default::default()
        };
        let (xa, ya) = (x.slice(ndarray::s![..16, ..]).to_owned(), &y[..16]);
        let (xv, yv) = (x.slice(ndarray::s![16.., ..]).to_owned(), &y[16..]);
        let (a, _) = train_feature_head(&xa, ya, &xv, yv, 0, &cfg).unwrap();
        let (b, _) = train_feature_head(&xa, ya, &xv, yv, 0, &cfg).unwrap();
        // determinism under a fixed seed
        assert_eq!(a.predict(&xv), b.predict(&xv));
    }
}
