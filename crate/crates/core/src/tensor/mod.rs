//! Dense numeric substrate: matrices, log-space primitives and a reverse-mode
//! tape.
//!
//! Everything the flow needs is expressed in terms of a handful of matrix
//! primitives. The log-space ones ([`logsumexp`], [`log_matmul_exp`],
//! [`block_log_matmul_exp`]) keep the log-determinant chain stable when the
//! per-dimension Jacobian factors span many orders of magnitude.

mod matrix;
pub mod tape;

pub use matrix::Matrix;
pub(crate) use matrix::gemm;
pub use tape::{gradient, Gradients, Precision, Tape, Var};

use crate::error::{Error, Result};

/// `log(sum(exp(v)))` with max subtraction.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Argument("logsumexp of an empty vector".into()));
    }
    Ok(logsumexp_unchecked(v.iter().copied()))
}

#[inline]
pub(crate) fn logsumexp_unchecked(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // all -inf, or a +inf/NaN entry that should propagate
        return if m == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            v.fold(0.0, |a, b| a + b) + m
        };
    }
    let s: f64 = v.map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// `log(exp(a) * exp(b))` computed entrywise as a logsumexp over the inner
/// dimension.
pub fn log_matmul_exp(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    block_log_matmul_exp(a, b, 1)
}

/// Block-diagonal variant of [`log_matmul_exp`].
///
/// `a` stacks `blocks` row-blocks of shape `m x k` (so it is `blocks*m x k`),
/// `b` stacks `blocks` row-blocks of shape `k x n`. Row-block `d` of the
/// output is `log_matmul_exp(a_d, b_d)`.
///
/// Finite inputs are evaluated as `r_i + c_s + ln(exp(a - r) exp(b - c))`
/// with row maxima `r` of `a` and column maxima `c` of `b`, one matrix
/// product per block. Entries whose scaled sum underflows, and inputs with
/// infinities, are evaluated term by term with max subtraction.
pub fn block_log_matmul_exp(a: &Matrix, b: &Matrix, blocks: usize) -> Result<Matrix> {
    let (m, k, n) = block_lme_dims(a, b, blocks)?;
    if !(a.is_finite() && b.is_finite()) || k == 0 {
        return Ok(block_lme_exact(a, b, blocks, m, k, n));
    }
    let mut out = Matrix::zeros(blocks * m, n);
    for d in 0..blocks {
        let sb = ScaledBlock::new(a, b, d, m, k, n);
        for i in 0..m {
            for s in 0..n {
                let p = sb.p.get(i, s);
                let v = if p >= UNDERFLOW_GUARD {
                    sb.ra[i] + sb.cb[s] + p.ln()
                } else {
                    lme_entry(a.row(d * m + i), b, d * k, s)
                };
                out.set(d * m + i, s, v);
            }
        }
    }
    Ok(out)
}

/// Scaled sums below this are recomputed term by term.
const UNDERFLOW_GUARD: f64 = 1e-250;

/// One block in scaled-exponential form: `p = exp(a - ra) exp(b - cb)`.
struct ScaledBlock {
    ra: Vec<f64>,
    cb: Vec<f64>,
    ea: Matrix,
    eb: Matrix,
    p: Matrix,
}

impl ScaledBlock {
    fn new(a: &Matrix, b: &Matrix, d: usize, m: usize, k: usize, n: usize) -> Self {
        let mut ea = Matrix::zeros(m, k);
        let mut ra = vec![f64::NEG_INFINITY; m];
        for i in 0..m {
            let row = a.row(d * m + i);
            ra[i] = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (e, v) in ea.row_mut(i).iter_mut().zip(row) {
                *e = (v - ra[i]).exp();
            }
        }
        let mut cb = vec![f64::NEG_INFINITY; n];
        for j in 0..k {
            for (c, v) in cb.iter_mut().zip(b.row(d * k + j)) {
                *c = c.max(*v);
            }
        }
        let mut eb = Matrix::zeros(k, n);
        for j in 0..k {
            for ((e, v), c) in eb.row_mut(j).iter_mut().zip(b.row(d * k + j)).zip(&cb) {
                *e = (v - c).exp();
            }
        }
        let mut p = Matrix::zeros(m, n);
        gemm(1.0, &ea, false, &eb, false, 0.0, &mut p);
        Self { ra, cb, ea, eb, p }
    }
}

/// One output entry by max-subtracted logsumexp over `a_row[j] + b[off + j, s]`.
fn lme_entry(a_row: &[f64], b: &Matrix, off: usize, s: usize) -> f64 {
    logsumexp_unchecked(a_row.iter().enumerate().map(move |(j, v)| v + b.get(off + j, s)))
}

fn block_lme_exact(a: &Matrix, b: &Matrix, blocks: usize, m: usize, k: usize, n: usize) -> Matrix {
    let mut out = Matrix::zeros(blocks * m, n);
    for d in 0..blocks {
        for i in 0..m {
            for s in 0..n {
                out.set(d * m + i, s, lme_entry(a.row(d * m + i), b, d * k, s));
            }
        }
    }
    out
}

/// Adjoints of [`block_log_matmul_exp`] for output adjoint `g`:
/// `ga_ij = sum_s g_is exp(a_ij + b_js - out_is)` and likewise for `gb`.
pub(crate) fn block_lme_backward(a: &Matrix, b: &Matrix, out: &Matrix, g: &Matrix, blocks: usize) -> (Matrix, Matrix) {
    let (m, k, n) = block_lme_dims(a, b, blocks).expect("shapes validated on record");
    let mut ga = Matrix::zeros(a.rows(), a.cols());
    let mut gb = Matrix::zeros(b.rows(), b.cols());
    if k == 0 {
        return (ga, gb);
    }
    let exact_entry = |ga: &mut Matrix, gb: &mut Matrix, r: usize, d: usize, s: usize| {
        let (gout, o) = (g.get(r, s), out.get(r, s));
        if gout == 0.0 || o == f64::NEG_INFINITY {
            return;
        }
        for j in 0..k {
            let c = gout * (a.get(r, j) + b.get(d * k + j, s) - o).exp();
            ga.data_mut()[r * k + j] += c;
            gb.data_mut()[(d * k + j) * n + s] += c;
        }
    };
    if !(a.is_finite() && b.is_finite()) {
        for d in 0..blocks {
            for i in 0..m {
                for s in 0..n {
                    exact_entry(&mut ga, &mut gb, d * m + i, d, s);
                }
            }
        }
        return (ga, gb);
    }
    for d in 0..blocks {
        let sb = ScaledBlock::new(a, b, d, m, k, n);
        // g / p, with underflowed entries handled term by term
        let mut q = Matrix::zeros(m, n);
        for i in 0..m {
            for s in 0..n {
                let p = sb.p.get(i, s);
                if p >= UNDERFLOW_GUARD {
                    q.set(i, s, g.get(d * m + i, s) / p);
                } else {
                    exact_entry(&mut ga, &mut gb, d * m + i, d, s);
                }
            }
        }
        let mut t = Matrix::zeros(m, k);
        gemm(1.0, &q, false, &sb.eb, true, 0.0, &mut t);
        for i in 0..m {
            let dst = &mut ga.data_mut()[(d * m + i) * k..(d * m + i + 1) * k];
            for ((o, tv), e) in dst.iter_mut().zip(t.row(i)).zip(sb.ea.row(i)) {
                *o += tv * e;
            }
        }
        let mut u = Matrix::zeros(k, n);
        gemm(1.0, &sb.ea, true, &q, false, 0.0, &mut u);
        for j in 0..k {
            let dst = &mut gb.data_mut()[(d * k + j) * n..(d * k + j + 1) * n];
            for ((o, uv), e) in dst.iter_mut().zip(u.row(j)).zip(sb.eb.row(j)) {
                *o += uv * e;
            }
        }
    }
    (ga, gb)
}

pub(crate) fn block_lme_dims(a: &Matrix, b: &Matrix, blocks: usize) -> Result<(usize, usize, usize)> {
    if blocks == 0 || a.rows() % blocks != 0 || b.rows() % blocks != 0 {
        return Err(Error::Shape {
            op: "log_matmul_exp",
            detail: format!(
                "{}x{} and {}x{} do not split into {blocks} blocks",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        });
    }
    let m = a.rows() / blocks;
    let k = a.cols();
    if b.rows() / blocks != k {
        return Err(Error::Shape {
            op: "log_matmul_exp",
            detail: format!(
                "inner dimensions differ: {}x{} vs {}x{} in {blocks} blocks",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        });
    }
    Ok((m, k, b.cols()))
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(1 - tanh(a)^2)`, stable for large `|a|`.
#[inline]
pub fn log_dtanh(a: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - a - softplus(-2.0 * a))
}
