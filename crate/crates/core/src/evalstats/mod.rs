//! Reference (non-differentiable) evaluation: PLCC / SROCC / MSE, percentile
//! bootstrap confidence intervals, paired bootstrap significance tests,
//! subset and category decompositions, and report/plot emission.
//!
//! These metrics are an independent route from the differentiable training
//! losses: Pearson here has no variance guard and raises an explicit
//! undefined-correlation error on zero variance.
//!
//! Bootstrap resamples draw their RNG from (seed, resample index), so a
//! parallel run partitioned over resamples reproduces the serial result
//! exactly.

pub mod plot;
pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AqaError, Result};
use crate::fusion::PredictionRow;

/// Id-aligned (prediction, target, category) triples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new(rows: Vec<PredictionRow>) -> Result<Self> {
        for r in &rows {
            if !r.pred.is_finite() || !r.target.is_finite() {
                return Err(AqaError::Validation(format!(
                    "non-finite prediction row for id {:?}",
                    r.id
                )));
            }
        }
        Ok(PredictionSet { rows })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::new(crate::fusion::load_predictions(path)?)
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn preds(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.pred).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.target).collect()
    }

    pub fn filter_category(&self, category: &str) -> PredictionSet {
        PredictionSet {
            rows: self
                .rows
                .iter()
                .filter(|r| r.category == category)
                .cloned()
                .collect(),
        }
    }

    pub fn categories(&self) -> Vec<String> {
        let mut set: Vec<String> = self
            .rows
            .iter()
            .map(|r| r.category.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        set.sort();
        set
    }

    /// Reorder `other` to this set's id order; both must cover identical ids.
    pub fn aligned(&self, other: &PredictionSet) -> Result<PredictionSet> {
        if self.len() != other.len() {
            return Err(AqaError::Validation(format!(
                "prediction sets differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let index: BTreeMap<&str, &PredictionRow> =
            other.rows.iter().map(|r| (r.id.as_str(), r)).collect();
        let rows = self
            .rows
            .iter()
            .map(|r| {
                index
                    .get(r.id.as_str())
                    .map(|&x| x.clone())
                    .ok_or_else(|| AqaError::MissingId(r.id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionSet { rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Plcc,
    Srocc,
    Mse,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Plcc => write!(f, "PLCC"),
            Metric::Srocc => write!(f, "SROCC"),
            Metric::Mse => write!(f, "MSE"),
        }
    }
}

fn pearson_raw(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(AqaError::Validation(
            "correlation needs at least two samples".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AqaError::Numeric(
            "undefined correlation: zero variance".into(),
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Fractional (average-tie) ranks, 1-based.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn plcc(p: &PredictionSet) -> Result<f64> {
    pearson_raw(&p.preds(), &p.targets())
}

pub fn srocc(p: &PredictionSet) -> Result<f64> {
    let rp = average_ranks(&p.preds());
    let rt = average_ranks(&p.targets());
    pearson_raw(&rp, &rt)
}

pub fn mse(p: &PredictionSet) -> Result<f64> {
    if p.is_empty() {
        return Err(AqaError::Validation("mse needs at least one sample".into()));
    }
    let n = p.len() as f64;
    Ok(p.rows
        .iter()
        .map(|r| (r.pred - r.target) * (r.pred - r.target))
        .sum::<f64>()
        / n)
}

pub fn eval_metric(p: &PredictionSet, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Plcc => plcc(p),
        Metric::Srocc => srocc(p),
        Metric::Mse => mse(p),
    }
}

fn metric_on_indices(p: &PredictionSet, idx: &[usize], metric: Metric) -> Result<f64> {
    let rows: Vec<PredictionRow> = idx.iter().map(|&i| p.rows[i].clone()).collect();
    eval_metric(&PredictionSet { rows }, metric)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub resamples: usize,
    pub seed: u64,
    /// Degenerate resamples that had to be redrawn.
    pub redraws: usize,
    /// Raised instead of crashing if resampling noise puts the estimate
    /// outside the percentile interval.
    pub ci_flag: bool,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const MAX_REDRAWS_PER_RESAMPLE: usize = 100;

/// One resample's statistic: indices drawn with replacement from an RNG
/// keyed on (seed, resample index); degenerate draws are redrawn from the
/// same stream.
fn resample_stat(
    p: &PredictionSet,
    metric: Metric,
    seed: u64,
    b: usize,
    n: usize,
) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (b as u64).wrapping_mul(0x2545_F491)));
    let mut redraws = 0;
    loop {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        match metric_on_indices(p, &idx, metric) {
            Ok(v) => return Ok((v, redraws)),
            Err(AqaError::Numeric(_)) if redraws < MAX_REDRAWS_PER_RESAMPLE => {
                redraws += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Percentile-method bootstrap confidence interval (95%), deterministic
/// given the seed. `threads > 1` partitions resamples across threads and
/// reproduces the serial result exactly.
pub fn bootstrap_ci_threaded(
    p: &PredictionSet,
    metric: Metric,
    resamples: usize,
    seed: u64,
    threads: usize,
) -> Result<MetricReport> {
    if p.len() < 2 {
        return Err(AqaError::Validation(
            "bootstrap needs at least two samples".into(),
        ));
    }
    if resamples < 100 {
        return Err(AqaError::Config("bootstrap needs at least 100 resamples".into()));
    }
    let estimate = eval_metric(p, metric)?;
    let n = p.len();

    let mut stats = vec![0.0; resamples];
    let mut redraws = 0usize;
    if threads <= 1 {
        for (b, slot) in stats.iter_mut().enumerate() {
            let (v, r) = resample_stat(p, metric, seed, b, n)?;
            *slot = v;
            redraws += r;
        }
    } else {
        let chunk = resamples.div_ceil(threads);
        let results: Vec<Result<Vec<(usize, f64, usize)>>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for t in 0..threads {
                let lo = t * chunk;
                let hi = ((t + 1) * chunk).min(resamples);
                if lo >= hi {
                    break;
                }
                let p_ref = &*p;
                handles.push(scope.spawn(move || {
                    (lo..hi)
                        .map(|b| resample_stat(p_ref, metric, seed, b, n).map(|(v, r)| (b, v, r)))
                        .collect()
                }));
            }
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for chunk_result in results {
            for (b, v, r) in chunk_result? {
                stats[b] = v;
                redraws += r;
            }
        }
    }

    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci_low = percentile(&stats, 0.025);
    let ci_high = percentile(&stats, 0.975);
    Ok(MetricReport {
        metric,
        estimate,
        ci_low,
        ci_high,
        n,
        resamples,
        seed,
        redraws,
        ci_flag: !(ci_low <= estimate && estimate <= ci_high),
    })
}

pub fn bootstrap_ci(
    p: &PredictionSet,
    metric: Metric,
    resamples: usize,
    seed: u64,
) -> Result<MetricReport> {
    bootstrap_ci_threaded(p, metric, resamples, seed, 1)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub delta: f64,
    pub p_value: f64,
    pub resamples: usize,
    pub seed: u64,
}

/// Paired bootstrap on shared index resamples. Two-sided p-value with
/// add-one smoothing: `2 * min(#(d <= 0) + 1, #(d >= 0) + 1) / (B + 1)`,
/// capped at 1 (never exactly zero).
pub fn paired_test(
    p_a: &PredictionSet,
    p_b: &PredictionSet,
    metric: Metric,
    resamples: usize,
    seed: u64,
) -> Result<PairedTestResult> {
    let p_b = p_a.aligned(p_b)?;
    if p_a.len() < 2 {
        return Err(AqaError::Validation(
            "paired test needs at least two samples".into(),
        ));
    }
    let delta = eval_metric(p_a, metric)? - eval_metric(&p_b, metric)?;
    let n = p_a.len();
    let mut le = 0usize;
    let mut ge = 0usize;
    for b in 0..resamples {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (b as u64).wrapping_mul(0x2545_F491)));
        let mut redraws = 0;
        let d = loop {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match (
                metric_on_indices(p_a, &idx, metric),
                metric_on_indices(&p_b, &idx, metric),
            ) {
                (Ok(a), Ok(bv)) => break a - bv,
                (Err(AqaError::Numeric(_)), _) | (_, Err(AqaError::Numeric(_)))
                    if redraws < MAX_REDRAWS_PER_RESAMPLE =>
                {
                    redraws += 1;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        };
        if d <= 0.0 {
            le += 1;
        }
        if d >= 0.0 {
            ge += 1;
        }
    }
    let p_value = (2.0 * (le.min(ge) + 1) as f64 / (resamples + 1) as f64).min(1.0);
    Ok(PairedTestResult {
        delta,
        p_value,
        resamples,
        seed,
    })
}

/// The `k` rows with the smallest absolute error, ranked by this set's own
/// error or by `reference`'s (id-aligned) error when given. Ties break by
/// id order.
pub fn lowest_error_subset(
    p: &PredictionSet,
    k: usize,
    reference: Option<&PredictionSet>,
) -> Result<PredictionSet> {
    if k > p.len() {
        return Err(AqaError::Validation(format!(
            "subset size {k} exceeds set size {}",
            p.len()
        )));
    }
    let ranking: Vec<(f64, &str)> = match reference {
        Some(r) => {
            let aligned = p.aligned(r)?;
            aligned
                .rows
                .iter()
                .map(|row| ((row.pred - row.target).abs(), row.id.as_str()))
                .collect::<Vec<_>>()
                .into_iter()
                .zip(p.rows.iter())
                .map(|((e, _), own)| (e, own.id.as_str()))
                .collect()
        }
        None => p
            .rows
            .iter()
            .map(|r| ((r.pred - r.target).abs(), r.id.as_str()))
            .collect(),
    };
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        ranking[a]
            .0
            .partial_cmp(&ranking[b].0)
            .unwrap()
            .then_with(|| ranking[a].1.cmp(ranking[b].1))
    });
    let rows = order[..k].iter().map(|&i| p.rows[i].clone()).collect();
    Ok(PredictionSet { rows })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub n: usize,
    pub model: String,
    pub reports: Vec<MetricReport>,
    pub p_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryReport {
    pub rows: Vec<CategoryRow>,
    /// Categories excluded for having fewer than two samples.
    pub skipped: Vec<String>,
}

/// Per-category metric reports for every model, with paired p-values
/// against `baseline` (the first model when unspecified).
pub fn category_report(
    models: &[(String, PredictionSet)],
    metrics: &[Metric],
    resamples: usize,
    seed: u64,
    baseline: Option<&str>,
) -> Result<CategoryReport> {
    if models.is_empty() {
        return Ok(CategoryReport {
            rows: Vec::new(),
            skipped: Vec::new(),
        });
    }
    let baseline_name = baseline.unwrap_or(&models[0].0).to_string();
    let categories = models[0].1.categories();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for cat in categories {
        let base_sub = models
            .iter()
            .find(|(n, _)| *n == baseline_name)
            .map(|(_, p)| p.filter_category(&cat));
        let mut cat_ok = true;
        for (_, p) in models {
            if p.filter_category(&cat).len() < 2 {
                cat_ok = false;
            }
        }
        if !cat_ok {
            skipped.push(cat);
            continue;
        }
        for (name, p) in models {
            let sub = p.filter_category(&cat);
            let reports = metrics
                .iter()
                .map(|&m| bootstrap_ci(&sub, m, resamples, seed))
                .collect::<Result<Vec<_>>>()?;
            let p_vs_baseline = match (&base_sub, name == &baseline_name) {
                (Some(base), false) => {
                    Some(paired_test(&sub, base, metrics[0], resamples, seed)?.p_value)
                }
                _ => None,
            };
            rows.push(CategoryRow {
                category: sub.rows[0].category.clone(),
                n: sub.len(),
                model: name.clone(),
                reports,
                p_vs_baseline,
            });
        }
    }
    Ok(CategoryReport { rows, skipped })
}
