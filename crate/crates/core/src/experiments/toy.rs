//! Toy Gaussian experiments: a grid-of-Gaussians mixture family selected by
//! a class index, and isotropic Gaussians conditioned on their mean.

use std::f64::consts::{E, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Estimate;
use crate::error::{Error, Result};
use crate::flow::HALF_LN_2PI;
use crate::model::Dataset;
use crate::tensor::{logsumexp, Matrix};

/// Ratio of the component standard deviation to the lattice spacing.
pub const GRID_SIGMA_RATIO: f64 = 0.15;
pub const GRID_SIDES: [usize; 3] = [2, 5, 10];

/// Uniform mixture of `k x k` isotropic Gaussians with means on an evenly
/// spaced lattice whose outermost means sit on the bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGaussianSpec {
    pub k: usize,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl GridGaussianSpec {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Argument("grid side must be at least 2".into()));
        }
        let (lo, hi) = (-4.0, 4.0);
        Ok(Self {
            k,
            sigma: GRID_SIGMA_RATIO * (hi - lo) / (k - 1) as f64,
            lo,
            hi,
        })
    }

    /// Spec for class index 0, 1 or 2.
    pub fn for_class(class: usize) -> Result<Self> {
        let k = *GRID_SIDES
            .get(class)
            .ok_or_else(|| Error::Argument(format!("unknown grid class {class}")))?;
        Self::new(k)
    }

    pub fn class_index(&self) -> Option<usize> {
        GRID_SIDES.iter().position(|&k| k == self.k)
    }

    /// Lattice coordinates along one axis.
    pub fn axis(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.k - 1) as f64;
        (0..self.k).map(|i| self.lo + i as f64 * step).collect()
    }

    pub fn means(&self) -> Vec<[f64; 2]> {
        let a = self.axis();
        let mut out = Vec::with_capacity(self.k * self.k);
        for &y in &a {
            for &x in &a {
                out.push([x, y]);
            }
        }
        out
    }

    /// Exact mixture mean.
    pub fn mean(&self) -> [f64; 2] {
        let m = self.axis().iter().sum::<f64>() / self.k as f64;
        [m, m]
    }

    /// `log p(x)`; the isotropic lattice factorizes into two 1-D mixtures.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let axis = self.axis();
        let ln_k = (self.k as f64).ln();
        x.iter()
            .map(|&v| {
                let terms: Vec<f64> = axis.iter().map(|m| -0.5 * ((v - m) / self.sigma).powi(2)).collect();
                logsumexp(&terms).expect("non-empty") - ln_k - self.sigma.ln() - HALF_LN_2PI
            })
            .sum()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Matrix {
        let means = self.means();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let m = means[rng.random_range(0..means.len())];
            for mi in m {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mi + self.sigma * z);
            }
        }
        Matrix::new(n, 2, data).expect("shape")
    }
}

/// Samples paired with the scalar class-index condition of `spec`.
pub fn gen_grid_gaussians(spec: &GridGaussianSpec, n: usize, seed: u64) -> Result<Dataset> {
    let class = spec
        .class_index()
        .ok_or_else(|| Error::Argument(format!("grid side {} has no class index", spec.k)))?;
    super::with_condition(spec.sample(n, seed), &[class as f64])
}

/// All three grids with `n` samples each; seeds derived from `seed`.
pub fn toy1_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let parts: Vec<Dataset> = (0..GRID_SIDES.len())
        .map(|class| gen_grid_gaussians(&GridGaussianSpec::for_class(class)?, n, seed.wrapping_mul(31).wrapping_add(class as u64)))
        .collect::<Result<_>>()?;
    Dataset::concat(&parts)
}

/// Differential entropy by Monte Carlo: mean of `-log p` over `n` draws.
pub fn mc_entropy(spec: &GridGaussianSpec, n: usize, seed: u64) -> Result<Estimate> {
    let x = spec.sample(n, seed);
    let v: Vec<f64> = (0..n).map(|i| -spec.log_density(x.row(i))).collect();
    Estimate::from_values(&v)
}

/// Isotropic Gaussians whose means are the conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct CondGaussianSpec {
    pub train: Vec<[f64; 2]>,
    pub unseen: Vec<[f64; 2]>,
    pub sigma: f64,
}

impl Default for CondGaussianSpec {
    fn default() -> Self {
        Self {
            train: vec![[0.0, 0.0], [2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]],
            unseen: vec![[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.0, -2.0]],
            sigma: 0.5,
        }
    }
}

/// Draws from `N(c, sigma^2 I)`, each row conditioned on `c`.
pub fn gen_conditional_gaussian(c: [f64; 2], sigma: f64, n: usize, seed: u64) -> Result<Dataset> {
    if !(sigma > 0.0) {
        return Err(Error::Argument("sigma must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        for ci in c {
            let z: f64 = rng.sample(StandardNormal);
            data.push(ci + sigma * z);
        }
    }
    super::with_condition(Matrix::new(n, 2, data)?, &c)
}

pub fn toy2_dataset(spec: &CondGaussianSpec, n: usize, seed: u64) -> Result<Dataset> {
    let parts: Vec<Dataset> = spec
        .train
        .iter()
        .enumerate()
        .map(|(i, &c)| gen_conditional_gaussian(c, spec.sigma, n, seed.wrapping_mul(31).wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    Dataset::concat(&parts)
}

/// Entropy of an isotropic bivariate Gaussian, `0.5 ln((2 pi e sigma^2)^2)`.
pub fn gaussian_entropy(sigma: f64) -> f64 {
    0.5 * (2.0 * PI * E * sigma * sigma).powi(2).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::kl_from_samples;
    use crate::experiments::stub::FnModel;

    #[test]
    fn grid_layout() {
        let s = GridGaussianSpec::new(5).unwrap();
        assert_eq!(s.axis(), vec![-4.0, -2.0, 0.0, 2.0, 4.0]);
        assert!((s.sigma - 0.3).abs() < 1e-15);
        let m = s.means();
        assert_eq!(m.len(), 25);
        for i in 0..m.len() {
            for j in 0..i {
                assert_ne!(m[i], m[j]);
            }
        }
        assert_eq!(GridGaussianSpec::for_class(2).unwrap().k, 10);
        assert!(GridGaussianSpec::new(1).is_err());
    }

    #[test]
    fn empty_and_reproducible() {
        let s = GridGaussianSpec::new(2).unwrap();
        assert!(gen_grid_gaussians(&s, 0, 1).unwrap().is_empty());
        assert_eq!(gen_grid_gaussians(&s, 50, 1).unwrap(), gen_grid_gaussians(&s, 50, 1).unwrap());
        let d = gen_grid_gaussians(&GridGaussianSpec::new(10).unwrap(), 3, 0).unwrap();
        assert!(d.c.data().iter().all(|&c| c == 2.0));
    }

    #[test]
    fn sample_mean_matches_mixture_mean() {
        for k in GRID_SIDES {
            let s = GridGaussianSpec::new(k).unwrap();
            let n = 20_000;
            let x = s.sample(n, 4);
            // per-axis standard deviation of the mixture
            let axis = s.axis();
            let var = axis.iter().map(|a| a * a).sum::<f64>() / k as f64 + s.sigma * s.sigma;
            for d in 0..2 {
                let mean = (0..n).map(|i| x.get(i, d)).sum::<f64>() / n as f64;
                assert!((mean - s.mean()[d]).abs() < 4.0 * var.sqrt() / (n as f64).sqrt());
            }
        }
    }

    #[test]
    fn factorized_density_matches_component_sum() {
        let s = GridGaussianSpec::new(5).unwrap();
        for x in [[0.1, -0.3], [3.9, 2.2], [-7.0, 1.0]] {
            let terms: Vec<f64> = s
                .means()
                .iter()
                .map(|m| -0.5 * ((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)) / (s.sigma * s.sigma))
                .collect();
            let direct = logsumexp(&terms).unwrap() - 25f64.ln() - 2.0 * s.sigma.ln() - 2.0 * HALF_LN_2PI;
            assert!((s.log_density(&x) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn well_separated_entropy() {
        // nearly disjoint components: H = ln(k^2) + H(component)
        let s = GridGaussianSpec::new(2).unwrap();
        let e = mc_entropy(&s, 100_000, 1).unwrap();
        let approx = 4f64.ln() + gaussian_entropy(s.sigma);
        assert!((e.mean - approx).abs() < 0.05, "{e:?} vs {approx}");
    }

    #[test]
    fn entropy_formula() {
        assert!((gaussian_entropy(0.5) - 1.4516).abs() < 1e-4);
        assert!(gaussian_entropy(1.0 / (2.0 * PI * E).sqrt()).abs() < 1e-12);
        assert!((gaussian_entropy(1.0) + 2.0 * 2f64.ln() - gaussian_entropy(2.0)).abs() < 1e-12);
    }

    #[test]
    fn conditional_gaussian_moments() {
        let n = 40_000;
        let d = gen_conditional_gaussian([0.0, 0.0], 0.5, n, 7).unwrap();
        let mut cov = [[0.0; 2]; 2];
        for i in 0..n {
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += d.x.get(i, a) * d.x.get(i, b) / n as f64;
                }
            }
        }
        assert!((cov[0][0] - 0.25).abs() < 0.0125 && (cov[1][1] - 0.25).abs() < 0.0125);
        assert!(cov[0][1].abs() < 0.0125);
        let shifted = gen_conditional_gaussian([2.0, -1.5], 0.5, n, 7).unwrap();
        for i in 0..n {
            assert_eq!(shifted.x.get(i, 0), d.x.get(i, 0) + 2.0);
            assert_eq!(shifted.x.get(i, 1), d.x.get(i, 1) - 1.5);
        }
    }

    #[test]
    fn exact_density_has_zero_kl() {
        let sigma = 0.5;
        let truth = FnModel::new(2, 2, move |x: &[f64], c: &[f64]| {
            x.iter().zip(c).map(|(a, b)| -0.5 * ((a - b) / sigma).powi(2) - sigma.ln() - HALF_LN_2PI).sum()
        });
        let spec = CondGaussianSpec::default();
        for c in spec.train.iter().chain(&spec.unseen) {
            let d = gen_conditional_gaussian(*c, sigma, 10_000, 3).unwrap();
            let k = kl_from_samples(&truth, &d, gaussian_entropy(sigma)).unwrap();
            assert!(k.kl.abs() < 3.0 * k.cross_entropy.se, "{k:?}");
        }
        for a in &spec.unseen {
            assert!(!spec.train.contains(a));
        }
    }
}
