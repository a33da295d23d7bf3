//! The hyper-network: an MLP mapping a condition vector to every weight and
//! bias of the conditional flow.
//!
//! Layout: an optional ReLU trunk shared by two heads. Each head has one
//! ReLU hidden layer followed by a linear output layer; the `W` head emits
//! the stored (mask-compressed) flow weights, the `B` head the flow biases.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{CondAFConfig, FlowParams};
use crate::tensor::{Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetConfig {
    pub cond_dim: usize,
    /// Widths of the shared trunk layers; may be empty.
    pub trunk_widths: Vec<usize>,
    pub head_width_w: usize,
    pub head_width_b: usize,
    /// Input scale of the flow emitted at initialization, see
    /// [`FlowParams::identity_like`].
    pub init_input_scale: f64,
    /// Hidden-layer biases start as `U(-a, a)` with `a = init_bias_scale / sqrt(fan_in)`.
    pub init_bias_scale: f64,
}

impl HyperNetConfig {
    pub fn new(cond_dim: usize, trunk_widths: Vec<usize>, head_width_w: usize, head_width_b: usize) -> Self {
        Self {
            cond_dim,
            trunk_widths,
            head_width_w,
            head_width_b,
            init_input_scale: 1.0,
            init_bias_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cond_dim == 0 || self.head_width_w == 0 || self.head_width_b == 0 {
            return Err(Error::Argument(
                "hyper-network condition dimension and head widths must be at least 1".into(),
            ));
        }
        if self.trunk_widths.contains(&0) {
            return Err(Error::Argument("hyper-network trunk widths must be at least 1".into()));
        }
        if !(self.init_input_scale.is_finite() && self.init_input_scale > 0.0) {
            return Err(Error::Argument("init_input_scale must be positive and finite".into()));
        }
        if !(self.init_bias_scale.is_finite() && self.init_bias_scale >= 0.0) {
            return Err(Error::Argument("init_bias_scale must be non-negative and finite".into()));
        }
        Ok(())
    }

    /// Number of features the heads see.
    pub fn feature_dim(&self) -> usize {
        self.trunk_widths.last().copied().unwrap_or(self.cond_dim)
    }

    /// `(name, rows, cols)` of every parameter tensor, in storage order.
    pub fn tensor_shapes(&self, flow: &CondAFConfig) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut fan_in = self.cond_dim;
        for (i, &w) in self.trunk_widths.iter().enumerate() {
            out.push((format!("trunk.{i}.weight"), fan_in, w));
            out.push((format!("trunk.{i}.bias"), 1, w));
            fan_in = w;
        }
        for (head, width, n_out) in [
            ("head_w", self.head_width_w, flow.stored_weight_len()),
            ("head_b", self.head_width_b, flow.bias_len()),
        ] {
            out.push((format!("{head}.hidden.weight"), fan_in, width));
            out.push((format!("{head}.hidden.bias"), 1, width));
            out.push((format!("{head}.out.weight"), width, n_out));
            out.push((format!("{head}.out.bias"), 1, n_out));
        }
        out
    }
}

/// Parameter accounting for one HCNAF model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    /// Entries of the full masked flow weight matrices, structural zeros included.
    pub n_w: usize,
    pub n_b: usize,
    /// Hyper-network parameters with the last layer connected to `n_w + n_b` outputs.
    pub n_h: usize,
    /// `n_w + n_b + n_h`.
    pub total: usize,
    /// Flow weights actually emitted: diagonal and strictly lower blocks only.
    pub stored_w: usize,
    /// Trainable scalars allocated by [`HyperNet`].
    pub allocated: usize,
}

pub fn param_counts(af: &CondAFConfig, hn: &HyperNetConfig) -> ParamCounts {
    let (d, h, l) = (af.dim, af.width_per_dim, af.hidden_layers);
    let n_w = d * d * h * (2 + (l - 1) * h);
    let n_b = d * (h * l + 1);
    let mut early = 0;
    let mut fan_in = hn.cond_dim;
    for &w in &hn.trunk_widths {
        early += fan_in * w + w;
        fan_in = w;
    }
    early += (fan_in + 1) * (hn.head_width_w + hn.head_width_b);
    let n_h = early + hn.head_width_w * n_w + hn.head_width_b * n_b;
    let allocated = hn.tensor_shapes(af).iter().map(|(_, r, c)| r * c).sum();
    ParamCounts {
        n_w,
        n_b,
        n_h,
        total: n_w + n_b + n_h,
        stored_w: af.stored_weight_len(),
        allocated,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet {
    cfg: HyperNetConfig,
    flow: CondAFConfig,
    params: Vec<Arc<Matrix>>,
}

fn relu_in_place(m: &mut Matrix) {
    m.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn affine_rows(h: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = h.matmul(w)?;
    for i in 0..out.rows() {
        for (o, bb) in out.row_mut(i).iter_mut().zip(b.data()) {
            *o += bb;
        }
    }
    Ok(out)
}

impl HyperNet {
    /// A freshly initialized network; see [`HyperNet::init`].
    pub fn new(cfg: HyperNetConfig, flow: CondAFConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        flow.validate()?;
        let params = cfg
            .tensor_shapes(&flow)
            .into_iter()
            .map(|(_, r, c)| Arc::new(Matrix::zeros(r, c)))
            .collect();
        let mut net = Self { cfg, flow, params };
        net.init(seed);
        Ok(net)
    }

    /// Rebuilds a network from stored tensors, checking their shapes.
    pub fn from_params(cfg: HyperNetConfig, flow: CondAFConfig, params: Vec<Matrix>) -> Result<Self> {
        cfg.validate()?;
        flow.validate()?;
        let shapes = cfg.tensor_shapes(&flow);
        if shapes.len() != params.len() {
            return Err(Error::Shape {
                op: "HyperNet::from_params",
                detail: format!("{} tensors, expected {}", params.len(), shapes.len()),
            });
        }
        for ((name, r, c), p) in shapes.iter().zip(&params) {
            if p.shape() != (*r, *c) {
                return Err(Error::Shape {
                    op: "HyperNet::from_params",
                    detail: format!("{name} is {:?}, expected {:?}", p.shape(), (r, c)),
                });
            }
        }
        Ok(Self {
            cfg,
            flow,
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    /// Hidden layers get `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and
    /// biases, the biases scaled by `init_bias_scale`. Output layers get zero
    /// weights and biases emitting the identity-like flow, so every condition
    /// starts from the same flow.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ident_w, ident_b) = FlowParams::identity_like(&self.flow, self.cfg.init_input_scale).to_flat();
        let shapes = self.cfg.tensor_shapes(&self.flow);
        for ((name, r, c), p) in shapes.iter().zip(self.params.iter_mut()) {
            let m = if name == "head_w.out.bias" {
                Matrix::row_vector(&ident_w)
            } else if name == "head_b.out.bias" {
                Matrix::row_vector(&ident_b)
            } else if name.contains(".out.") {
                Matrix::zeros(*r, *c)
            } else {
                let fan_in = shapes.iter().find(|(n, _, _)| *n == name.replace(".bias", ".weight")).map_or(*r, |s| s.1);
                let scale = if name.ends_with(".bias") { self.cfg.init_bias_scale } else { 1.0 };
                let bound = scale / (fan_in as f64).sqrt();
                if bound == 0.0 {
                    Matrix::zeros(*r, *c)
                } else {
                    let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
                    Matrix::new(*r, *c, data).expect("shape from tensor_shapes")
                }
            };
            *p = Arc::new(m);
        }
    }

    pub fn config(&self) -> &HyperNetConfig {
        &self.cfg
    }

    pub fn flow_config(&self) -> &CondAFConfig {
        &self.flow
    }

    pub fn params(&self) -> &[Arc<Matrix>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Matrix>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.cfg.tensor_shapes(&self.flow).into_iter().map(|(n, _, _)| n).collect()
    }

    fn check_conditions(&self, c: &Matrix) -> Result<()> {
        if c.cols() != self.cfg.cond_dim {
            return Err(Error::Argument(format!(
                "condition has {} values, hyper-network expects {}",
                c.cols(),
                self.cfg.cond_dim
            )));
        }
        if !c.is_finite() {
            return Err(Error::NonFinite("condition".into()));
        }
        Ok(())
    }

    /// Head outputs for every row of `c` (`g x cond_dim`): stored flow
    /// weights `g x stored_weight_len` and biases `g x bias_len`.
    pub fn heads(&self, c: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_conditions(c)?;
        let p = &self.params;
        let mut h = c.clone();
        let n_trunk = self.cfg.trunk_widths.len();
        for i in 0..n_trunk {
            h = affine_rows(&h, &p[2 * i], &p[2 * i + 1])?;
            relu_in_place(&mut h);
        }
        let mut outs = Vec::with_capacity(2);
        for head in 0..2 {
            let base = 2 * n_trunk + 4 * head;
            let mut z = affine_rows(&h, &p[base], &p[base + 1])?;
            relu_in_place(&mut z);
            outs.push(affine_rows(&z, &p[base + 2], &p[base + 3])?);
        }
        let b = outs.pop().expect("two heads");
        let w = outs.pop().expect("two heads");
        Ok((w, b))
    }

    /// Records [`HyperNet::heads`] on `tape`; `vars` are the leaves of
    /// [`HyperNet::params`] in order.
    pub fn record_heads(&self, tape: &mut Tape, vars: &[Var], c: &Matrix) -> Result<(Var, Var)> {
        self.check_conditions(c)?;
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter leaves for {} tensors",
                vars.len(),
                self.params.len()
            )));
        }
        let mut h = tape.constant(c.clone());
        let n_trunk = self.cfg.trunk_widths.len();
        let layer = |tape: &mut Tape, h: Var, w: Var, b: Var, relu: bool| -> Result<Var> {
            let a = tape.matmul(h, w)?;
            let a = tape.add_row(a, b)?;
            if relu {
                tape.relu(a)
            } else {
                Ok(a)
            }
        };
        for i in 0..n_trunk {
            h = layer(tape, h, vars[2 * i], vars[2 * i + 1], true)?;
        }
        let mut outs = [h; 2];
        for (head, out) in outs.iter_mut().enumerate() {
            let base = 2 * n_trunk + 4 * head;
            let z = layer(tape, h, vars[base], vars[base + 1], true)?;
            *out = layer(tape, z, vars[base + 2], vars[base + 3], false)?;
        }
        Ok((outs[0], outs[1]))
    }
}

/// `theta = f_H(c)`.
pub fn hyper_forward(net: &HyperNet, c: &[f64]) -> Result<FlowParams> {
    let (w, b) = net.heads(&Matrix::row_vector(c))?;
    FlowParams::from_flat(&net.flow, w.data(), b.data())
}
