//! Conditional density models behind one trainable interface: HCNAF and the
//! conditional affine autoregressive baseline.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{self, FlowParams, SampleSet, HALF_LN_2PI};
use crate::hypernet::HyperNet;
use crate::tensor::{Matrix, Tape, Var};

/// Samples `x` (`n x dim`) paired row by row with conditions `c` (`n x cond_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub c: Matrix,
}

impl Dataset {
    pub fn new(x: Matrix, c: Matrix) -> Result<Self> {
        if x.rows() != c.rows() {
            return Err(Error::Shape {
                op: "Dataset",
                detail: format!("{} samples but {} conditions", x.rows(), c.rows()),
            });
        }
        Ok(Self { x, c })
    }

    pub fn empty(dim: usize, cond_dim: usize) -> Self {
        Self {
            x: Matrix::zeros(0, dim),
            c: Matrix::zeros(0, cond_dim),
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn cond_dim(&self) -> usize {
        self.c.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: select_rows(&self.x, idx),
            c: select_rows(&self.c, idx),
        }
    }

    /// Concatenates datasets with matching dimensions.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        let (d, dc) = (first.dim(), first.cond_dim());
        let mut x = Vec::new();
        let mut c = Vec::new();
        for p in parts {
            if p.dim() != d || p.cond_dim() != dc {
                return Err(Error::Shape {
                    op: "Dataset::concat",
                    detail: "dimension mismatch".into(),
                });
            }
            x.extend_from_slice(p.x.data());
            c.extend_from_slice(p.c.data());
        }
        let n = x.len() / d.max(1);
        Self::new(Matrix::new(n, d, x)?, Matrix::new(n, dc, c)?)
    }
}

pub(crate) fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(idx.len(), m.cols(), data).expect("row selection")
}

/// Rows of `c` grouped by bitwise-identical values, in order of first appearance.
pub(crate) fn group_conditions(c: &Matrix) -> (Matrix, Vec<Vec<usize>>) {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut firsts = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..c.rows() {
        let key: Vec<u64> = c.row(i).iter().map(|v| v.to_bits()).collect();
        let g = *index.entry(key).or_insert_with(|| {
            firsts.push(i);
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    (select_rows(c, &firsts), groups)
}

/// A trainable conditional density `p(x | c)`.
pub trait ConditionalModel: Sync {
    fn dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn params(&self) -> &[Arc<Matrix>];
    fn params_mut(&mut self) -> &mut [Arc<Matrix>];
    fn param_names(&self) -> Vec<String>;

    /// `log p(x_i | c_i)` for every row.
    fn log_prob_batch(&self, x: &Matrix, c: &Matrix) -> Result<Vec<f64>>;

    /// Records `sum_i log p(x_i | c_i)` as a `1 x 1` node. Only `vars`, one
    /// leaf per entry of [`ConditionalModel::params`], carry the parameters.
    fn record_log_likelihood(&self, tape: &mut Tape, vars: &[Var], x: &Matrix, c: &Matrix) -> Result<Var>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_batch(&self, x: &Matrix, c: &Matrix) -> Result<()> {
        if x.cols() != self.dim() || c.cols() != self.cond_dim() || x.rows() != c.rows() {
            return Err(Error::Shape {
                op: "log_prob",
                detail: format!(
                    "samples {:?} and conditions {:?} for a model of dimension {} with {} condition values",
                    x.shape(),
                    c.shape(),
                    self.dim(),
                    self.cond_dim()
                ),
            });
        }
        Ok(())
    }
}

const EVAL_CHUNK: usize = 512;

impl ConditionalModel for HyperNet {
    fn dim(&self) -> usize {
        self.flow_config().dim
    }

    fn cond_dim(&self) -> usize {
        self.config().cond_dim
    }

    fn params(&self) -> &[Arc<Matrix>] {
        HyperNet::params(self)
    }

    fn params_mut(&mut self) -> &mut [Arc<Matrix>] {
        HyperNet::params_mut(self)
    }

    fn param_names(&self) -> Vec<String> {
        HyperNet::param_names(self)
    }

    fn log_prob_batch(&self, x: &Matrix, c: &Matrix) -> Result<Vec<f64>> {
        self.check_batch(x, c)?;
        let cfg = self.flow_config();
        let (distinct, groups) = group_conditions(c);
        let (w, b) = self.heads(&distinct)?;
        let mut out = vec![0.0; x.rows()];
        for (g, idx) in groups.iter().enumerate() {
            let params = FlowParams::from_flat(cfg, w.row(g), b.row(g))?;
            let chunks: Vec<Vec<f64>> = idx
                .par_chunks(EVAL_CHUNK)
                .map(|chunk| flow::log_prob_batch(cfg, &params, &select_rows(x, chunk).transpose()))
                .collect::<Result<_>>()?;
            for (i, v) in idx.iter().zip(chunks.into_iter().flatten()) {
                out[*i] = v;
            }
        }
        Ok(out)
    }

    fn record_log_likelihood(&self, tape: &mut Tape, vars: &[Var], x: &Matrix, c: &Matrix) -> Result<Var> {
        self.check_batch(x, c)?;
        let (distinct, groups) = group_conditions(c);
        let (w, b) = self.record_heads(tape, vars, &distinct)?;
        let mut total: Option<Var> = None;
        for (g, idx) in groups.iter().enumerate() {
            let xg = select_rows(x, idx).transpose();
            let lp = flow::record_log_prob(tape, self.flow_config(), w, b, g, &xg)?;
            let s = tape.sum(lp)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        total.ok_or_else(|| Error::Argument("empty batch".into()))
    }
}

/// Per-dimension MLP sizes of the affine baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineConfig {
    pub dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
}

/// Conditional affine autoregressive flow `z_d = (x_d - mu_d) exp(-log_sigma_d)`
/// where `(mu_d, log_sigma_d)` come from a one-hidden-layer ReLU MLP of
/// `[x_{<d}, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineModel {
    cfg: AffineConfig,
    params: Vec<Arc<Matrix>>,
}

impl AffineConfig {
    pub fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for d in 0..self.dim {
            out.push((format!("dim{d}.hidden.weight"), d + self.cond_dim, self.hidden));
            out.push((format!("dim{d}.hidden.bias"), 1, self.hidden));
            out.push((format!("dim{d}.out.weight"), self.hidden, 2));
            out.push((format!("dim{d}.out.bias"), 1, 2));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Argument("affine baseline needs dim and hidden width >= 1".into()));
        }
        Ok(())
    }
}

impl AffineModel {
    /// Hidden weights `U(+-1/sqrt(fan_in))`, output layer zero so the model
    /// starts as a standard normal.
    pub fn new(cfg: AffineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = cfg
            .tensor_shapes()
            .into_iter()
            .map(|(name, r, c)| {
                let m = if name.ends_with("hidden.weight") && r > 0 {
                    let bound = 1.0 / (r as f64).sqrt();
                    Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-bound..bound)).collect())
                        .expect("shape")
                } else {
                    Matrix::zeros(r, c)
                };
                Arc::new(m)
            })
            .collect();
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: AffineConfig, params: Vec<Matrix>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.tensor_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|((_, r, c), p)| p.shape() != (*r, *c))
        {
            return Err(Error::Shape {
                op: "AffineModel::from_params",
                detail: "tensors do not match the configuration".into(),
            });
        }
        Ok(Self {
            cfg,
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &AffineConfig {
        &self.cfg
    }

    fn inputs(&self, x: &Matrix, c: &Matrix, d: usize) -> Matrix {
        let n = x.rows();
        let w = d + self.cfg.cond_dim;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&x.row(i)[..d]);
            data.extend_from_slice(c.row(i));
        }
        Matrix::new(n, w, data).expect("input shape")
    }

    /// Per-sample log densities as an `n x 1` node.
    fn record_per_sample(&self, tape: &mut Tape, vars: &[Var], x: &Matrix, c: &Matrix) -> Result<Var> {
        let n = x.rows();
        let mut acc: Option<Var> = None;
        for d in 0..self.cfg.dim {
            let [w1, b1, w2, b2] = [0, 1, 2, 3].map(|j| vars[4 * d + j]);
            let inp = tape.constant(self.inputs(x, c, d));
            let h = tape.matmul(inp, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.relu(h)?;
            let o = tape.matmul(h, w2)?;
            let o = tape.add_row(o, b2)?;
            let mu = tape.columns(o, 0, 1)?;
            let ls = tape.columns(o, 1, 1)?;
            let xd = tape.constant(Matrix::new(n, 1, (0..n).map(|i| x.get(i, d)).collect())?);
            let diff = tape.sub(xd, mu)?;
            let neg_ls = tape.scale(ls, -1.0)?;
            let inv_sigma = tape.exp(neg_ls)?;
            let z = tape.mul(diff, inv_sigma)?;
            let zsq = tape.square(z)?;
            let half = tape.scale(zsq, -0.5)?;
            let term = tape.add(half, neg_ls)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let acc = acc.expect("dim >= 1");
        tape.add_scalar(acc, -(self.cfg.dim as f64) * HALF_LN_2PI)
    }

    /// `(mu_d, log_sigma_d)` for one sample given its earlier coordinates.
    fn shift_scale(&self, prefix: &[f64], c: &[f64], d: usize) -> (f64, f64) {
        let p = &self.params[4 * d..4 * d + 4];
        let inp: Vec<f64> = prefix.iter().chain(c).copied().collect();
        let mut out = p[3].data().to_vec();
        for j in 0..self.cfg.hidden {
            let mut h = p[1].data()[j];
            for (k, v) in inp.iter().enumerate() {
                h += v * p[0].get(k, j);
            }
            let h = h.max(0.0);
            out[0] += h * p[2].get(j, 0);
            out[1] += h * p[2].get(j, 1);
        }
        (out[0], out[1])
    }

    /// Ancestral sampling: `x_d = mu_d + exp(log_sigma_d) z_d`.
    pub fn sample(&self, c: &[f64], n: usize, seed: u64) -> Result<SampleSet> {
        if n == 0 {
            return Err(Error::Argument("sample count must be at least 1".into()));
        }
        if c.len() != self.cfg.cond_dim {
            return Err(Error::Argument("condition length does not match the model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = Vec::with_capacity(self.cfg.dim);
            let mut lp = 0.0;
            for d in 0..self.cfg.dim {
                let z: f64 = rng.sample(StandardNormal);
                let (mu, ls) = self.shift_scale(&x, c, d);
                x.push(mu + ls.exp() * z);
                lp += -0.5 * z * z - ls - HALF_LN_2PI;
            }
            points.push(x);
            log_probs.push(lp);
        }
        Ok(SampleSet {
            points,
            log_probs,
            rejected: 0,
        })
    }
}

impl ConditionalModel for AffineModel {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn cond_dim(&self) -> usize {
        self.cfg.cond_dim
    }

    fn params(&self) -> &[Arc<Matrix>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Arc<Matrix>] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        self.cfg.tensor_shapes().into_iter().map(|(n, _, _)| n).collect()
    }

    fn log_prob_batch(&self, x: &Matrix, c: &Matrix) -> Result<Vec<f64>> {
        self.check_batch(x, c)?;
        let idx: Vec<usize> = (0..x.rows()).collect();
        let chunks: Vec<Vec<f64>> = idx
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p)).collect();
                let lp = self.record_per_sample(&mut tape, &vars, &select_rows(x, chunk), &select_rows(c, chunk))?;
                Ok(tape.value(lp).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    fn record_log_likelihood(&self, tape: &mut Tape, vars: &[Var], x: &Matrix, c: &Matrix) -> Result<Var> {
        self.check_batch(x, c)?;
        if x.rows() == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        let lp = self.record_per_sample(tape, vars, x, c)?;
        tape.sum(lp)
    }
}

/// Either model kind, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Hcnaf(HyperNet),
    Affine(AffineModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Hcnaf(_) => "hcnaf",
            Model::Affine(_) => "affine",
        }
    }

    fn inner(&self) -> &dyn ConditionalModel {
        match self {
            Model::Hcnaf(m) => m,
            Model::Affine(m) => m,
        }
    }

    /// Draws `n` samples for condition `c`.
    pub fn sample(&self, c: &[f64], n: usize, seed: u64) -> Result<SampleSet> {
        match self {
            Model::Hcnaf(net) => {
                let params = crate::hypernet::hyper_forward(net, c)?;
                flow::sample(net.flow_config(), &params, n, seed)
            }
            Model::Affine(m) => m.sample(c, n, seed),
        }
    }
}

impl ConditionalModel for Model {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn cond_dim(&self) -> usize {
        self.inner().cond_dim()
    }

    fn params(&self) -> &[Arc<Matrix>] {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut [Arc<Matrix>] {
        match self {
            Model::Hcnaf(m) => ConditionalModel::params_mut(m),
            Model::Affine(m) => m.params_mut(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        self.inner().param_names()
    }

    fn log_prob_batch(&self, x: &Matrix, c: &Matrix) -> Result<Vec<f64>> {
        self.inner().log_prob_batch(x, c)
    }

    fn record_log_likelihood(&self, tape: &mut Tape, vars: &[Var], x: &Matrix, c: &Matrix) -> Result<Var> {
        self.inner().record_log_likelihood(tape, vars, x, c)
    }
}
