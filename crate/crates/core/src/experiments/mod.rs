//! Dataset generators, metrics and evaluation helpers for the experiments.

pub mod mnist;
pub mod pom;
pub mod toy;

use crate::error::{Error, Result};
use crate::model::{ConditionalModel, Dataset};
use crate::tensor::Matrix;

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Argument("no values to average".into()));
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Ok(Self {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        })
    }
}

/// Mean negative log-likelihood over `data` with its standard error.
pub fn eval_nll<M: ConditionalModel + ?Sized>(model: &M, data: &Dataset) -> Result<Estimate> {
    let lp = model.log_prob_batch(&data.x, &data.c)?;
    if let Some(index) = lp.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { index });
    }
    Estimate::from_values(&lp.iter().map(|v| -v).collect::<Vec<_>>())
}

/// Cross-entropy `H(p, q)` estimated from samples of `p`, and
/// `KL(p || q) = H(p, q) - H(p)` for a known entropy `H(p)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlEstimate {
    pub cross_entropy: Estimate,
    pub kl: f64,
}

pub fn kl_from_samples<M: ConditionalModel + ?Sized>(model: &M, samples: &Dataset, entropy: f64) -> Result<KlEstimate> {
    let ce = eval_nll(model, samples)?;
    Ok(KlEstimate {
        cross_entropy: ce,
        kl: ce.mean - entropy,
    })
}

/// Densities of a two-dimensional model on the cell centers of a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    /// `[x_lo, x_hi, y_lo, y_hi]`.
    pub bounds: [f64; 4],
    pub nx: usize,
    pub ny: usize,
    /// Row-major, row 0 at `y_lo`.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell(&self) -> (f64, f64) {
        (
            (self.bounds[1] - self.bounds[0]) / self.nx as f64,
            (self.bounds[3] - self.bounds[2]) / self.ny as f64,
        )
    }

    /// Center of cell `(i, j)`, `i` along x.
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let (dx, dy) = self.cell();
        (
            self.bounds[0] + (i as f64 + 0.5) * dx,
            self.bounds[2] + (j as f64 + 0.5) * dy,
        )
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    /// Midpoint-rule integral over the bounds.
    pub fn riemann_sum(&self) -> f64 {
        let (dx, dy) = self.cell();
        self.values.iter().sum::<f64>() * dx * dy
    }

    /// Integral over the cells whose centers satisfy `pred`.
    pub fn mass_where(&self, pred: impl Fn(f64, f64) -> bool) -> f64 {
        let (dx, dy) = self.cell();
        let mut s = 0.0;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let (x, y) = self.center(i, j);
                if pred(x, y) {
                    s += self.value(i, j);
                }
            }
        }
        s * dx * dy
    }
}

pub fn validate_bounds(bounds: [f64; 4], nx: usize, ny: usize) -> Result<()> {
    if nx == 0 || ny == 0 {
        return Err(Error::Argument("grid resolution must be at least 1".into()));
    }
    if !(bounds.iter().all(|b| b.is_finite()) && bounds[0] < bounds[1] && bounds[2] < bounds[3]) {
        return Err(Error::Argument(format!("invalid bounds {bounds:?}")));
    }
    Ok(())
}

/// Evaluates `p(x, y | c) = p(y | x, c) p(x | c)` on the lattice.
pub fn density_grid<M: ConditionalModel + ?Sized>(
    model: &M,
    c: &[f64],
    bounds: [f64; 4],
    nx: usize,
    ny: usize,
) -> Result<DensityGrid> {
    validate_bounds(bounds, nx, ny)?;
    if model.dim() != 2 {
        return Err(Error::Argument(format!("density grids need a 2-D model, got dimension {}", model.dim())));
    }
    if c.len() != model.cond_dim() {
        return Err(Error::Argument(format!(
            "condition has {} values, model expects {}",
            c.len(),
            model.cond_dim()
        )));
    }
    let mut grid = DensityGrid {
        bounds,
        nx,
        ny,
        values: Vec::new(),
    };
    let mut pts = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = grid.center(i, j);
            pts.extend([x, y]);
        }
    }
    let n = nx * ny;
    let mut cond = Vec::with_capacity(n * c.len());
    for _ in 0..n {
        cond.extend_from_slice(c);
    }
    let lp = model.log_prob_batch(&Matrix::new(n, 2, pts)?, &Matrix::new(n, c.len(), cond)?)?;
    grid.values = lp.into_iter().map(f64::exp).collect();
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("density grid".into()));
    }
    Ok(grid)
}

/// Repeats `c` as the condition of every row of `x`.
pub fn with_condition(x: Matrix, c: &[f64]) -> Result<Dataset> {
    let n = x.rows();
    let mut cond = Vec::with_capacity(n * c.len());
    for _ in 0..n {
        cond.extend_from_slice(c);
    }
    Dataset::new(x, Matrix::new(n, c.len(), cond)?)
}

#[cfg(test)]
pub(crate) mod stub {
    //! Closed-form densities behind the model interface.

    use std::sync::Arc;

    use crate::error::{Error, Result};
    use crate::model::ConditionalModel;
    use crate::tensor::{Matrix, Tape, Var};

    pub struct FnModel<F: Fn(&[f64], &[f64]) -> f64 + Sync> {
        pub dim: usize,
        pub cond_dim: usize,
        pub f: F,
        pub params: Vec<Arc<Matrix>>,
    }

    impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> FnModel<F> {
        pub fn new(dim: usize, cond_dim: usize, f: F) -> Self {
            Self {
                dim,
                cond_dim,
                f,
                params: Vec::new(),
            }
        }
    }

    impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> ConditionalModel for FnModel<F> {
        fn dim(&self) -> usize {
            self.dim
        }
        fn cond_dim(&self) -> usize {
            self.cond_dim
        }
        fn params(&self) -> &[Arc<Matrix>] {
            &self.params
        }
        fn params_mut(&mut self) -> &mut [Arc<Matrix>] {
            &mut self.params
        }
        fn param_names(&self) -> Vec<String> {
            Vec::new()
        }
        fn log_prob_batch(&self, x: &Matrix, c: &Matrix) -> Result<Vec<f64>> {
            self.check_batch(x, c)?;
            Ok((0..x.rows()).map(|i| (self.f)(x.row(i), c.row(i))).collect())
        }
        fn record_log_likelihood(&self, _: &mut Tape, _: &[Var], _: &Matrix, _: &Matrix) -> Result<Var> {
            Err(Error::Contract("closed-form stub is not trainable".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stub::FnModel;
    use super::*;
    use crate::flow::standard_normal_log_density;

    #[test]
    fn estimate_basics() {
        let e = Estimate::from_values(&[1.0, 3.0]).unwrap();
        assert_eq!(e.mean, 2.0);
        assert!((e.se - 1.0).abs() < 1e-12);
        assert!(Estimate::from_values(&[]).is_err());
    }

    #[test]
    fn standard_normal_grid() {
        let m = FnModel::new(2, 1, |x: &[f64], _: &[f64]| standard_normal_log_density(x));
        let g = density_grid(&m, &[0.0], [-3.0, 3.0, -3.0, 3.0], 10, 10).unwrap();
        assert_eq!(g.values.len(), 100);
        let (x, y) = g.center(0, 0);
        assert!((x + 2.7).abs() < 1e-12 && (y + 2.7).abs() < 1e-12);
        let wide = density_grid(&m, &[0.0], [-8.0, 8.0, -8.0, 8.0], 400, 400).unwrap();
        assert!((wide.riemann_sum() - 1.0).abs() < 1e-6);
        let left = wide.mass_where(|x, _| x < 0.0);
        assert!((left - 0.5).abs() < 1e-6);
        assert!(density_grid(&m, &[0.0, 1.0], [-3.0, 3.0, -3.0, 3.0], 10, 10).is_err());
        assert!(density_grid(&m, &[0.0], [3.0, -3.0, -3.0, 3.0], 10, 10).is_err());
    }
}
