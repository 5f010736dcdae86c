//! Gaussian-process regression with a squared-exponential kernel and the
//! expected-improvement acquisition.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Added to the diagonal when the requested noise is zero.
const MIN_JITTER: f64 = 1e-10;

/// Length scales `10^lo ..= 10^hi`, `per_decade` points per decade.
pub fn lengthscale_grid(lo_exp: i32, hi_exp: i32, per_decade: u32) -> Vec<f64> {
    let steps = (hi_exp - lo_exp) as u32 * per_decade;
    (0..=steps)
        .map(|s| 10f64.powf(lo_exp as f64 + s as f64 / per_decade as f64))
        .collect()
}

/// Lower-triangular Cholesky factor of a row-major `n x n` matrix.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

fn backward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Posterior of a zero-mean GP over standardized targets.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    x: Vec<Vec<f64>>,
    inv_ls2: Vec<f64>,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    signal_var: f64,
    y_mean: f64,
    y_scale: f64,
    log_marginal: f64,
}

struct Factorized {
    chol: Vec<f64>,
    alpha: Vec<f64>,
    signal_var: f64,
    log_marginal: f64,
}

fn standardize(y: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-300 { var.sqrt() } else { 1.0 };
    (y.iter().map(|v| (v - mean) / scale).collect(), mean, scale)
}

/// Factorizes `R + noise I` for correlation built from weighted squared
/// distances and profiles out the signal variance.
fn factorize(sq_dist: &[f64], n: usize, noise: f64, ys: &[f64]) -> Option<Factorized> {
    let mut jitter = noise.max(MIN_JITTER);
    for _ in 0..6 {
        let mut r: Vec<f64> = sq_dist.iter().map(|d| (-0.5 * d).exp()).collect();
        for i in 0..n {
            r[i * n + i] = 1.0 + jitter;
        }
        if let Some(chol) = cholesky(&r, n) {
            let mut alpha = ys.to_vec();
            forward_solve(&chol, n, &mut alpha);
            let quad: f64 = alpha.iter().map(|a| a * a).sum();
            backward_solve(&chol, n, &mut alpha);
            let signal_var = (quad / n as f64).max(1e-12);
            let log_det: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
            let log_marginal = -0.5 * n as f64 * signal_var.ln() - log_det;
            return Some(Factorized {
                chol,
                alpha,
                signal_var,
                log_marginal,
            });
        }
        jitter *= 100.0;
    }
    None
}

fn weighted_sq_dist(a: &[f64], b: &[f64], inv_ls2: &[f64]) -> f64 {
    if inv_ls2.len() == 1 {
        let w = inv_ls2[0];
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * w
    } else {
        a.iter()
            .zip(b)
            .zip(inv_ls2)
            .map(|((x, y), w)| (x - y) * (x - y) * w)
            .sum()
    }
}

impl GaussianProcess {
    /// Fits with fixed length scales: one value for an isotropic kernel or one
    /// per input dimension.
    pub fn fit(x: &[Vec<f64>], y: &[f64], lengthscales: &[f64], noise: f64) -> Result<Self> {
        let n = check_inputs(x, y)?;
        let d = x[0].len();
        if !(lengthscales.len() == 1 || lengthscales.len() == d) || lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Domain("length scales must be positive, one or one per dimension".into()));
        }
        let inv_ls2: Vec<f64> = lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let mut sq = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let v = weighted_sq_dist(&x[i], &x[j], &inv_ls2);
                sq[i * n + j] = v;
                sq[j * n + i] = v;
            }
        }
        let (ys, y_mean, y_scale) = standardize(y);
        let f = factorize(&sq, n, noise, &ys)
            .ok_or_else(|| Error::Domain("kernel matrix is not positive definite".into()))?;
        Ok(GaussianProcess {
            x: x.to_vec(),
            inv_ls2,
            chol: f.chol,
            alpha: f.alpha,
            signal_var: f.signal_var,
            y_mean,
            y_scale,
            log_marginal: f.log_marginal,
        })
    }

    /// Picks length scales on `grid` by profiled marginal likelihood. With
    /// `ard`, a coordinate sweep refines one scale per dimension starting from
    /// the best isotropic value.
    pub fn fit_grid(x: &[Vec<f64>], y: &[f64], noise: f64, grid: &[f64], ard: bool) -> Result<Self> {
        let n = check_inputs(x, y)?;
        if grid.is_empty() {
            return Err(Error::Domain("empty length-scale grid".into()));
        }
        let d = x[0].len();
        let (ys, _, _) = standardize(y);
        // per-dimension squared differences, summed when isotropic
        let per_dim: Vec<Vec<f64>> = if ard {
            (0..d)
                .map(|k| {
                    let mut m = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..i {
                            let v = (x[i][k] - x[j][k]).powi(2);
                            m[i * n + j] = v;
                            m[j * n + i] = v;
                        }
                    }
                    m
                })
                .collect()
        } else {
            Vec::new()
        };
        let total: Vec<f64> = if ard {
            (0..n * n).map(|e| per_dim.iter().map(|m| m[e]).sum()).collect()
        } else {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..i {
                    let v = weighted_sq_dist(&x[i], &x[j], &[1.0]);
                    m[i * n + j] = v;
                    m[j * n + i] = v;
                }
            }
            m
        };
        let score = |sq: &[f64]| factorize(sq, n, noise, &ys).map(|f| f.log_marginal);
        let mut best_ls = grid[0];
        let mut best_ll = f64::NEG_INFINITY;
        for &ls in grid {
            let w = 1.0 / (ls * ls);
            let sq: Vec<f64> = total.iter().map(|v| v * w).collect();
            if let Some(ll) = score(&sq) {
                if ll > best_ll {
                    best_ll = ll;
                    best_ls = ls;
                }
            }
        }
        let mut scales = vec![best_ls; if ard { d } else { 1 }];
        if ard {
            let mut sq: Vec<f64> = total.iter().map(|v| v / (best_ls * best_ls)).collect();
            for k in 0..d {
                let current = 1.0 / (scales[k] * scales[k]);
                for &ls in grid {
                    let w = 1.0 / (ls * ls);
                    let trial: Vec<f64> = sq
                        .iter()
                        .zip(&per_dim[k])
                        .map(|(s, p)| s + (w - current) * p)
                        .collect();
                    if let Some(ll) = score(&trial) {
                        if ll > best_ll {
                            best_ll = ll;
                            scales[k] = ls;
                        }
                    }
                }
                let chosen = 1.0 / (scales[k] * scales[k]);
                for (s, p) in sq.iter_mut().zip(&per_dim[k]) {
                    *s += (chosen - current) * p;
                }
            }
        }
        Self::fit(x, y, &scales, noise)
    }

    /// Length scale per dimension (a single entry when isotropic).
    pub fn lengthscales(&self) -> Vec<f64> {
        self.inv_ls2.iter().map(|w| 1.0 / w.sqrt()).collect()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    /// Posterior mean and variance of the latent function at `point`.
    pub fn predict(&self, point: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let mut k: Vec<f64> = self
            .x
            .iter()
            .map(|xi| (-0.5 * weighted_sq_dist(point, xi, &self.inv_ls2)).exp())
            .collect();
        let mean_std: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        forward_solve(&self.chol, n, &mut k);
        let explained: f64 = k.iter().map(|v| v * v).sum();
        let var_std = (self.signal_var * (1.0 - explained)).max(0.0);
        (
            self.y_mean + self.y_scale * mean_std,
            var_std * self.y_scale * self.y_scale,
        )
    }
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Domain(format!(
            "GP needs matching, nonempty inputs ({} points, {} targets)",
            x.len(),
            y.len()
        )));
    }
    let d = x[0].len();
    if x.iter().any(|p| p.len() != d) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("GP inputs must share a dimension and targets must be finite".into()));
    }
    Ok(x.len())
}

/// Expected improvement below `best` for a minimization problem.
pub fn expected_improvement(mean: f64, variance: f64, best: f64, xi: f64) -> f64 {
    let gain = best - mean - xi;
    let sd = variance.max(0.0).sqrt();
    if sd <= 1e-300 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let unit = Normal::standard();
    (gain * unit.cdf(z) + sd * unit.pdf(z)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.3, (i % 3) as f64]).collect();
        let y = x.iter().map(|p| (p[0]).sin() + 0.5 * p[1]).collect();
        (x, y)
    }

    #[test]
    fn grid_has_five_points_per_decade() {
        let g = lengthscale_grid(-1, 2, 5);
        assert_eq!(g.len(), 16);
        assert!((g[0] - 0.1).abs() < 1e-12 && (g[15] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn interpolates_without_noise() {
        let (x, y) = sample();
        for ard in [false, true] {
            let gp = GaussianProcess::fit_grid(&x, &y, 0.0, &lengthscale_grid(-1, 2, 5), ard).unwrap();
            for (p, v) in x.iter().zip(&y) {
                let (m, var) = gp.predict(p);
                assert!((m - v).abs() < 1e-6, "mean {m} vs {v}");
                assert!(var < 1e-6);
            }
        }
    }

    #[test]
    fn variance_grows_away_from_data() {
        let (x, y) = sample();
        let gp = GaussianProcess::fit(&x, &y, &[0.5], 1e-6).unwrap();
        let (_, near) = gp.predict(&[0.31, 1.0]);
        let (_, far) = gp.predict(&[40.0, 40.0]);
        assert!(far > near);
    }

    #[test]
    fn ei_properties() {
        assert_eq!(expected_improvement(1.0, 0.0, 1.0, 0.0), 0.0);
        assert_eq!(expected_improvement(0.5, 0.0, 1.0, 0.0), 0.5);
        assert!(expected_improvement(2.0, 1.0, 1.0, 0.0) > 0.0);
        let a = expected_improvement(0.0, 1.0, 0.0, 0.0);
        let b = expected_improvement(0.0, 4.0, 0.0, 0.0);
        assert!(b > a);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(GaussianProcess::fit(&[], &[], &[1.0], 0.0).is_err());
        assert!(GaussianProcess::fit(&[vec![0.0]], &[1.0], &[-1.0], 0.0).is_err());
        assert!(GaussianProcess::fit(&[vec![0.0], vec![1.0, 2.0]], &[1.0, 2.0], &[1.0], 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ei_is_nonnegative(m in -1e3..1e3f64, v in 0.0..1e3f64, b in -1e3..1e3f64) {
                prop_assert!(expected_improvement(m, v, b, 0.0) >= 0.0);
            }
        }
    }
}
