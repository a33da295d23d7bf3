//! Numeric inversion of the flow and sampling through it.
//!
//! No closed form exists, but `z_d` depends only on `x_{1..d}` and is strictly
//! increasing in `x_d`. Dimensions are therefore solved in order, each as a
//! scalar monotone root-finding problem with all earlier coordinates fixed.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{log_prob, CondAFConfig, FlowParams};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const BRACKET_LIMIT: f64 = 1e6;
const RESIDUAL_TOL: f64 = 1e-8;
const MAX_BISECTIONS: usize = 200;
const MAX_NEWTON: usize = 20;

/// Scalar map `x_d -> z_d` with earlier dimensions frozen.
struct DimMap {
    /// Per layer: diagonal block `h_out x h_in` (exponentiated) and the
    /// constant contribution of bias plus earlier dimensions.
    layers: Vec<(Matrix, Vec<f64>)>,
    hidden: usize,
}

impl DimMap {
    /// Returns `(z_d, dz_d/dx_d)`; optionally records the hidden states.
    fn eval(&self, x: f64, mut states: Option<&mut Vec<Vec<f64>>>) -> (f64, f64) {
        let mut h = vec![x];
        let mut dh = vec![1.0];
        for (k, (w, c)) in self.layers.iter().enumerate() {
            let mut a = c.clone();
            let mut da = vec![0.0; c.len()];
            for i in 0..w.rows() {
                let row = w.row(i);
                for j in 0..row.len() {
                    a[i] += row[j] * h[j];
                    da[i] += row[j] * dh[j];
                }
            }
            if k < self.hidden {
                for i in 0..a.len() {
                    let t = a[i].tanh();
                    da[i] *= 1.0 - t * t;
                    a[i] = t;
                }
            }
            if let Some(st) = states.as_deref_mut() {
                st.push(a.clone());
            }
            h = a;
            dh = da;
        }
        (h[0], dh[0])
    }
}

/// Solves `f(x) = target` for increasing `f`, returning `x`.
fn solve_monotone(map: &DimMap, target: f64, dim: usize) -> Result<f64> {
    let f = |x: f64| map.eval(x, None);

    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let (mut f_lo, _) = f(lo);
    while f_lo > target {
        if lo <= -BRACKET_LIMIT {
            let (f_hi, _) = f(BRACKET_LIMIT);
            return Err(Error::OutOfRange { dim, z: target, lo: f_lo, hi: f_hi });
        }
        hi = lo;
        lo = (lo * 2.0).max(-BRACKET_LIMIT);
        f_lo = f(lo).0;
    }
    let (mut f_hi, _) = f(hi);
    while f_hi < target {
        if hi >= BRACKET_LIMIT {
            let (f_lo, _) = f(-BRACKET_LIMIT);
            return Err(Error::OutOfRange { dim, z: target, lo: f_lo, hi: f_hi });
        }
        lo = hi;
        hi = (hi * 2.0).min(BRACKET_LIMIT);
        f_hi = f(hi).0;
    }
    if f_lo == target {
        return Ok(lo);
    }
    if f_hi == target {
        return Ok(hi);
    }

    let mut x = 0.5 * (lo + hi);
    let (mut bisections, mut newtons) = (0usize, 0usize);
    let mut best = (f64::INFINITY, x);
    loop {
        let (fx, dfx) = f(x);
        let r = fx - target;
        if r.abs() < best.0 {
            best = (r.abs(), x);
        }
        if r.abs() <= 1e-3 * RESIDUAL_TOL {
            break;
        }
        if r > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= f64::EPSILON * x.abs().max(1e-300) {
            break;
        }
        let step = x - r / dfx;
        if newtons < MAX_NEWTON && dfx > 0.0 && step > lo && step < hi {
            newtons += 1;
            x = step;
        } else if bisections < MAX_BISECTIONS {
            bisections += 1;
            x = 0.5 * (lo + hi);
        } else {
            break;
        }
    }
    if best.0 >= RESIDUAL_TOL {
        return Err(Error::NoConvergence { dim, residual: best.0 });
    }
    Ok(best.1)
}

/// `x = f^{-1}(z)`.
///
/// Errors with [`Error::OutOfRange`] when some `z_d` lies outside the values
/// `f_d` attains for `|x_d| <= 1e6`; the tanh hidden layers bound that range.
pub fn invert(cfg: &CondAFConfig, params: &FlowParams, z: &[f64]) -> Result<Vec<f64>> {
    params.validate(cfg)?;
    if z.len() != cfg.dim {
        return Err(Error::Shape {
            op: "invert",
            detail: format!("{} values for a {}-dimensional flow", z.len(), cfg.dim),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inversion target".into()));
    }
    let weights: Vec<Matrix> = (0..cfg.n_layers())
        .map(|k| params.materialize_weight(cfg, k))
        .collect::<Result<_>>()?;
    let shapes = cfg.layer_shapes();
    // states[k]: outputs of layer k for every dimension solved so far
    let mut states: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; cfg.dim * s.h_out]).collect();
    let mut x = vec![0.0; cfg.dim];

    for d in 0..cfg.dim {
        let mut layers = Vec::with_capacity(shapes.len());
        for (k, s) in shapes.iter().enumerate() {
            let w = &weights[k];
            let input: &[f64] = if k == 0 { &x } else { &states[k - 1] };
            let mut c = Vec::with_capacity(s.h_out);
            let mut diag = Matrix::zeros(s.h_out, s.h_in);
            for i in 0..s.h_out {
                let r = d * s.h_out + i;
                let row = w.row(r);
                let earlier: f64 = row[..d * s.h_in]
                    .iter()
                    .zip(&input[..d * s.h_in])
                    .map(|(a, b)| a * b)
                    .sum();
                c.push(params.layers[k].bias.data()[r] + earlier);
                diag.row_mut(i)
                    .copy_from_slice(&row[d * s.h_in..(d + 1) * s.h_in]);
            }
            layers.push((diag, c));
        }
        let map = DimMap {
            layers,
            hidden: cfg.hidden_layers,
        };
        let xd = solve_monotone(&map, z[d], d)?;
        x[d] = xd;
        let mut st = Vec::with_capacity(shapes.len());
        map.eval(xd, Some(&mut st));
        for (k, s) in shapes.iter().enumerate() {
            states[k][d * s.h_out..(d + 1) * s.h_out].copy_from_slice(&st[k]);
        }
    }
    Ok(x)
}

/// Draws from the flow's density.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    /// Base draws that fell outside the attainable range and were redrawn.
    pub rejected: usize,
}

const SATURATION_WINDOW: usize = 256;

/// Samples `n` points by drawing `z ~ N(0, I)` and inverting.
///
/// Draws outside the flow's range are rejected and redrawn. If more than
/// half of the most recent 256 draws are rejected the flow is considered
/// saturated and an error is returned.
pub fn sample(cfg: &CondAFConfig, params: &FlowParams, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut window: VecDeque<bool> = VecDeque::with_capacity(SATURATION_WINDOW);
    let mut in_window = 0usize;
    let mut out = SampleSet {
        points: Vec::with_capacity(n),
        log_probs: Vec::with_capacity(n),
        rejected: 0,
    };
    while out.points.len() < n {
        let z: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rejected = match invert(cfg, params, &z) {
            Ok(x) => {
                out.log_probs.push(log_prob(cfg, params, &x)?);
                out.points.push(x);
                false
            }
            Err(Error::OutOfRange { .. }) => {
                out.rejected += 1;
                true
            }
            Err(e) => return Err(e),
        };
        window.push_back(rejected);
        in_window += rejected as usize;
        if window.len() > SATURATION_WINDOW {
            in_window -= window.pop_front().unwrap() as usize;
        }
        if window.len() == SATURATION_WINDOW && 2 * in_window > SATURATION_WINDOW {
            return Err(Error::Saturation {
                rejected: in_window,
                window: SATURATION_WINDOW,
            });
        }
    }
    Ok(out)
}
