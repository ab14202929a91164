//! Central finite-difference utilities used to verify analytic gradients.
//!
//! Everything here works at 64-bit precision with the step pinned to the
//! caller (1e-5 in the standard suites). The relative error of a coordinate
//! is `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps round-off on
//! near-zero gradients from registering as spurious failures.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar function at `x`, one coordinate at
/// a time.
pub fn central_diff<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + step;
        let hi = f(&buf);
        buf[i] = x[i] - step;
        let lo = f(&buf);
        buf[i] = x[i];
        out.push((hi - lo) / (2.0 * step));
    }
    out
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Check sampled coordinates of one flat parameter vector against central
/// differences. `f` re-evaluates the scalar objective with the replaced
/// vector. Returns the worst relative error over the sampled coordinates.
pub fn check_sampled<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if idx.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(max_coords);
    }
    let mut buf = x.to_vec();
    let mut worst = 0.0f64;
    for &i in &idx {
        buf[i] = x[i] + step;
        let hi = f(&buf);
        buf[i] = x[i] - step;
        let lo = f(&buf);
        buf[i] = x[i];
        let numeric = (hi - lo) / (2.0 * step);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_quadratic() {
        let x = [1.0, -2.0, 0.5];
        let g = central_diff(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn sampled_check_matches_full() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64) * 0.1 - 2.0).collect();
        let analytic: Vec<f64> = x.iter().map(|v| v.cos()).collect();
        let worst = check_sampled(
            |v| v.iter().map(|a| a.sin()).sum(),
            &x,
            &analytic,
            1e-5,
            32,
            0,
        );
        assert!(worst < 1e-8, "worst {worst}");
    }
}
