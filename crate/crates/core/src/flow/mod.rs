//! The conditional autoregressive flow `z = f(x; theta)`.
//!
//! Each flow dimension owns a slice of `width_per_dim` units in every hidden
//! layer. Layer `k` maps `h^{k-1}` to `h^k` through a block lower-triangular
//! weight matrix: block `(d, r)` connects dimension `r` of the previous layer
//! to dimension `d`, so it is zero for `r > d`, strictly positive for `r = d`
//! (stored as logs, exponentiated on use) and unconstrained for `r < d`.
//! Hidden layers apply `tanh`; the output layer is linear.
//!
//! The Jacobian `dz/dx` is lower triangular with diagonal
//! `dz_d/dx_d = W_dd^{L+1} diag(tanh'(A^L_d)) W_dd^L ... diag(tanh'(A^1_d)) W_dd^1`,
//! which [`forward_batch`] accumulates in log space with
//! [`block_log_matmul_exp`] and never materializes the full Jacobian.

mod invert;
mod record;

pub use invert::{invert, sample, SampleSet};
pub use record::record_log_prob;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::tape::{assemble_masked, masked_off_len};
use crate::tensor::{block_log_matmul_exp, log_dtanh, Matrix};

/// `0.5 * ln(2 pi)`, the per-dimension normalizer of the standard normal.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

/// Architecture of the conditional flow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CondAFConfig {
    pub dim: usize,
    pub hidden_layers: usize,
    pub width_per_dim: usize,
    pub activation: Activation,
}

/// Per-dimension fan-in and fan-out of one weight layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub h_in: usize,
    pub h_out: usize,
}

impl CondAFConfig {
    pub fn new(dim: usize, hidden_layers: usize, width_per_dim: usize) -> Result<Self> {
        let cfg = Self {
            dim,
            hidden_layers,
            width_per_dim,
            activation: Activation::Tanh,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden_layers == 0 || self.width_per_dim == 0 {
            return Err(Error::Argument(format!(
                "flow needs dim, hidden_layers and width_per_dim >= 1 (got {}, {}, {})",
                self.dim, self.hidden_layers, self.width_per_dim
            )));
        }
        Ok(())
    }

    /// Number of weight layers (`hidden_layers + 1`).
    pub fn n_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    pub fn layer_shape(&self, k: usize) -> LayerShape {
        let h = self.width_per_dim;
        let h_in = if k == 0 { 1 } else { h };
        let h_out = if k == self.hidden_layers { 1 } else { h };
        LayerShape { h_in, h_out }
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        (0..self.n_layers()).map(|k| self.layer_shape(k)).collect()
    }

    /// Length of one row of the weight head output (diagonal logs and
    /// strictly-lower entries of every layer).
    pub fn stored_weight_len(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|s| s.diag_len(self.dim) + s.off_len(self.dim))
            .sum()
    }

    pub fn bias_len(&self) -> usize {
        self.layer_shapes().iter().map(|s| s.bias_len(self.dim)).sum()
    }
}

impl LayerShape {
    pub fn diag_len(&self, dim: usize) -> usize {
        dim * self.h_out * self.h_in
    }

    pub fn off_len(&self, dim: usize) -> usize {
        masked_off_len(dim, self.h_out, self.h_in)
    }

    pub fn bias_len(&self, dim: usize) -> usize {
        dim * self.h_out
    }

    /// Shape of the materialized block matrix.
    pub fn full_shape(&self, dim: usize) -> (usize, usize) {
        (dim * self.h_out, dim * self.h_in)
    }
}

/// Parameters of one weight layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Logs of the diagonal blocks, stacked: `dim*h_out x h_in`.
    pub log_diag: Matrix,
    /// Strictly-lower blocks, `1 x n` in the layout of
    /// [`crate::tensor::Tape::masked_blocks`].
    pub off_diag: Matrix,
    /// `dim*h_out x 1`.
    pub bias: Matrix,
}

/// Every weight and bias of the flow, as emitted for one condition.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    pub layers: Vec<LayerParams>,
}

impl FlowParams {
    /// The parameters produced by a freshly initialized hyper-network.
    ///
    /// Off-diagonal blocks are zero, so dimensions are independent. Each
    /// dimension computes a scaled average of its units: the first layer
    /// multiplies the input by `input_scale = s`, later layers average their
    /// inputs and the output layer divides by `s`. Hidden biases are spread
    /// symmetrically over `[-IDENTITY_BIAS_SPREAD, IDENTITY_BIAS_SPREAD]` so
    /// units differ and receive different gradients, and the output weights
    /// are rescaled so that `z(0) = 0` and `dz_d/dx_d = 1` at the origin.
    /// With one unit per dimension all biases and diagonal logs are zero when
    /// `s = 1`. Small `s` makes the map the identity to within `O(s^2 x^3)`.
    pub fn identity_like(cfg: &CondAFConfig, input_scale: f64) -> Self {
        let h = cfg.width_per_dim;
        let spread: Vec<f64> = (0..h)
            .map(|i| {
                if h == 1 {
                    0.0
                } else {
                    IDENTITY_BIAS_SPREAD * (-1.0 + 2.0 * i as f64 / (h - 1) as f64)
                }
            })
            .collect();
        let mut layers: Vec<LayerParams> = (0..cfg.n_layers())
            .map(|k| {
                let s = cfg.layer_shape(k);
                let v = identity_log_diag(cfg, k, input_scale);
                let bias = if k < cfg.hidden_layers {
                    let b: Vec<f64> = (0..cfg.dim).flat_map(|_| spread.iter().copied()).collect();
                    Matrix::column(&b)
                } else {
                    Matrix::zeros(cfg.dim, 1)
                };
                LayerParams {
                    log_diag: Matrix::filled(cfg.dim * s.h_out, s.h_in, v),
                    off_diag: Matrix::zeros(1, s.off_len(cfg.dim)),
                    bias,
                }
            })
            .collect();
        // log slope at the origin: the pre-activations there are the biases
        let mean_dtanh = spread.iter().map(|&b| log_dtanh(b).exp()).sum::<f64>() / h as f64;
        let log_slope = cfg.hidden_layers as f64 * mean_dtanh.ln();
        let last = layers.last_mut().expect("at least one layer");
        last.log_diag.data_mut().iter_mut().for_each(|v| *v -= log_slope);
        Self { layers }
    }

    /// Splits head outputs laid out as `[log_diag_0, off_0, log_diag_1, ...]`
    /// and `[bias_0, bias_1, ...]`.
    pub fn from_flat(cfg: &CondAFConfig, weights: &[f64], biases: &[f64]) -> Result<Self> {
        if weights.len() != cfg.stored_weight_len() || biases.len() != cfg.bias_len() {
            return Err(Error::Shape {
                op: "FlowParams::from_flat",
                detail: format!(
                    "got {} weights and {} biases, expected {} and {}",
                    weights.len(),
                    biases.len(),
                    cfg.stored_weight_len(),
                    cfg.bias_len()
                ),
            });
        }
        let (mut wp, mut bp) = (0, 0);
        let mut layers = Vec::with_capacity(cfg.n_layers());
        for s in cfg.layer_shapes() {
            let (nd, no, nb) = (s.diag_len(cfg.dim), s.off_len(cfg.dim), s.bias_len(cfg.dim));
            layers.push(LayerParams {
                log_diag: Matrix::new(cfg.dim * s.h_out, s.h_in, weights[wp..wp + nd].to_vec())?,
                off_diag: Matrix::row_vector(&weights[wp + nd..wp + nd + no]),
                bias: Matrix::column(&biases[bp..bp + nb]),
            });
            wp += nd + no;
            bp += nb;
        }
        Ok(Self { layers })
    }

    /// Inverse of [`FlowParams::from_flat`].
    pub fn to_flat(&self) -> (Vec<f64>, Vec<f64>) {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for l in &self.layers {
            w.extend_from_slice(l.log_diag.data());
            w.extend_from_slice(l.off_diag.data());
            b.extend_from_slice(l.bias.data());
        }
        (w, b)
    }

    pub fn validate(&self, cfg: &CondAFConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers() {
            return Err(Error::Shape {
                op: "FlowParams",
                detail: format!("{} layers, expected {}", self.layers.len(), cfg.n_layers()),
            });
        }
        for (k, (l, s)) in self.layers.iter().zip(cfg.layer_shapes()).enumerate() {
            let ok = l.log_diag.shape() == (cfg.dim * s.h_out, s.h_in)
                && l.off_diag.len() == s.off_len(cfg.dim)
                && l.bias.shape() == (cfg.dim * s.h_out, 1);
            if !ok {
                return Err(Error::Shape {
                    op: "FlowParams",
                    detail: format!("layer {k} does not match the flow configuration"),
                });
            }
        }
        Ok(())
    }

    /// Full weight matrix of layer `k` with the diagonal blocks exponentiated.
    pub fn materialize_weight(&self, cfg: &CondAFConfig, k: usize) -> Result<Matrix> {
        let l = &self.layers[k];
        assemble_masked(&l.log_diag.map(f64::exp), &l.off_diag, cfg.dim)
    }
}

/// Largest magnitude of the hidden biases of [`FlowParams::identity_like`].
pub const IDENTITY_BIAS_SPREAD: f64 = 1.5;

pub(crate) fn identity_log_diag(cfg: &CondAFConfig, k: usize, input_scale: f64) -> f64 {
    let s = cfg.layer_shape(k);
    let mut v = -(s.h_in as f64).ln();
    if k == 0 {
        v += input_scale.ln();
    }
    if k == cfg.hidden_layers {
        v -= input_scale.ln();
    }
    v
}

/// Output of [`forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub z: Vec<f64>,
    /// `log |det dz/dx|` in nats.
    pub logdet: f64,
    /// `log(dz_d/dx_d)` for each dimension.
    pub per_dim_logdet: Vec<f64>,
}

/// Column-batched forward pass: `x` is `dim x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchForward {
    pub z: Matrix,
    pub per_dim_logdet: Matrix,
}

pub fn forward_batch(cfg: &CondAFConfig, params: &FlowParams, x: &Matrix) -> Result<BatchForward> {
    params.validate(cfg)?;
    if x.rows() != cfg.dim {
        return Err(Error::Shape {
            op: "forward",
            detail: format!("input has {} rows, flow dimension is {}", x.rows(), cfg.dim),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("flow input".into()));
    }
    let n = x.cols();
    let mut h = x.clone();
    let mut chain = Matrix::zeros(cfg.dim, n);
    for (k, layer) in params.layers.iter().enumerate() {
        let w = params.materialize_weight(cfg, k)?;
        let mut a = w.matmul(&h)?;
        for (i, b) in layer.bias.data().iter().enumerate() {
            a.row_mut(i).iter_mut().for_each(|v| *v += b);
        }
        let mut next = block_log_matmul_exp(&layer.log_diag, &chain, cfg.dim)?;
        if k < cfg.hidden_layers {
            for (c, &av) in next.data_mut().iter_mut().zip(a.data()) {
                *c += log_dtanh(av);
            }
            h = a.map(f64::tanh);
        } else {
            h = a;
        }
        if !h.is_finite() || next.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::FlowLayer {
                layer: k,
                detail: "activation or log-derivative is not finite".into(),
            });
        }
        chain = next;
    }
    Ok(BatchForward {
        z: h,
        per_dim_logdet: chain,
    })
}

pub fn forward(cfg: &CondAFConfig, params: &FlowParams, x: &[f64]) -> Result<ForwardResult> {
    let out = forward_batch(cfg, params, &Matrix::column(x))?;
    let per_dim_logdet = out.per_dim_logdet.into_vec();
    Ok(ForwardResult {
        z: out.z.into_vec(),
        logdet: per_dim_logdet.iter().sum(),
        per_dim_logdet,
    })
}

/// `log N(z; 0, I)`.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - z.len() as f64 * HALF_LN_2PI
}

/// `log p(x | c)` for the condition that produced `params`.
pub fn log_prob(cfg: &CondAFConfig, params: &FlowParams, x: &[f64]) -> Result<f64> {
    let f = forward(cfg, params, x)?;
    Ok(standard_normal_log_density(&f.z) + f.logdet)
}

/// Log densities of every column of `x` (`dim x n`).
pub fn log_prob_batch(cfg: &CondAFConfig, params: &FlowParams, x: &Matrix) -> Result<Vec<f64>> {
    let out = forward_batch(cfg, params, x)?;
    let n = x.cols();
    let mut lp = vec![-(cfg.dim as f64) * HALF_LN_2PI; n];
    for d in 0..cfg.dim {
        for (s, v) in lp.iter_mut().enumerate() {
            let z = out.z.get(d, s);
            *v += -0.5 * z * z + out.per_dim_logdet.get(d, s);
        }
    }
    Ok(lp)
}

/// Affine autoregressive step `z_d = (x_d - mu_d) / sigma_d`.
///
/// Returns `z` and `log |det dz/dx| = -sum log sigma_d`.
pub fn affine_forward(mu: &[f64], log_sigma: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
    if mu.len() != x.len() || log_sigma.len() != x.len() {
        return Err(Error::Shape {
            op: "affine_forward",
            detail: format!("{} means, {} scales, {} inputs", mu.len(), log_sigma.len(), x.len()),
        });
    }
    if mu.iter().chain(log_sigma).chain(x).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("affine transform input".into()));
    }
    let z = x
        .iter()
        .zip(mu)
        .zip(log_sigma)
        .map(|((x, m), ls)| (x - m) * (-ls).exp())
        .collect();
    Ok((z, -log_sigma.iter().sum::<f64>()))
}

/// `ln(2 pi)`, handy for the two-dimensional experiments.
pub fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}
