//! Reverse-mode differentiation over matrix primitives.
//!
//! A [`Tape`] records every primitive as a node holding its value and the
//! indices of its operands. Nodes are appended in evaluation order, so the
//! node index is a topological order and [`Tape::backward`] simply walks the
//! nodes from the output back to the first one, visiting each exactly once.
//!
//! The tape is rebuilt for every evaluation; parameters enter as shared
//! [`Arc<Matrix>`] leaves so recording a step never copies the weights.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{gemm, log_dtanh, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Arithmetic precision emulated by a tape.
///
/// `Single` rounds every recorded value and every adjoint to the nearest
/// `f32`, which reproduces the accuracy of 32-bit training without a second
/// code path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::Double => 64,
            Precision::Single => 32,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            64 => Ok(Precision::Double),
            32 => Ok(Precision::Single),
            other => Err(Error::Argument(format!("unsupported precision {other}"))),
        }
    }

    #[inline]
    fn round(self, m: &mut Matrix) {
        if self == Precision::Single {
            m.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `m x n` plus a `1 x n` row broadcast over rows.
    AddRow(usize, usize),
    /// `m x n` plus an `m x 1` column broadcast over columns.
    AddCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    LogDTanh(usize),
    Square(usize),
    Sum(usize),
    /// Column sums, `m x n -> 1 x n`.
    SumRows(usize),
    LogSumExp(usize),
    BlockLogMatMulExp {
        a: usize,
        b: usize,
        blocks: usize,
    },
    SliceReshape {
        src: usize,
        row: usize,
        start: usize,
    },
    Columns {
        src: usize,
        start: usize,
    },
    MaskedBlocks {
        diag: usize,
        off: usize,
        blocks: usize,
    },
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
}

/// Recorded computation graph.
pub struct Tape {
    id: u64,
    precision: Precision,
    nodes: Vec<Node>,
    n_params: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: Vec::new(),
            n_params: 0,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Contract(format!(
                "variable recorded on tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        if v.index >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown node {}", v.index)));
        }
        Ok(v.index)
    }

    fn push(&mut self, mut value: Matrix, op: Op) -> Var {
        self.precision.round(&mut value);
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    #[inline]
    fn val(&self, i: usize) -> &Matrix {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    /// Records a trainable leaf. Parameters are numbered in call order and
    /// [`Gradients`] is indexed by that number.
    pub fn param(&mut self, m: &Arc<Matrix>) -> Var {
        let id = self.n_params;
        self.n_params += 1;
        if self.precision == Precision::Single {
            let mut rounded = (**m).clone();
            self.precision.round(&mut rounded);
            self.push_arc(Arc::new(rounded), Op::Param(id))
        } else {
            self.push_arc(Arc::clone(m), Op::Param(id))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).zip_map(self.val(ib), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).zip_map(self.val(ib), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).zip_map(self.val(ib), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let (m, r) = (self.val(ia), self.val(ir));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(shape("add_row", m, r));
        }
        let mut out = m.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(ia, ir)))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ic) = (self.idx(a)?, self.idx(col)?);
        let (m, c) = (self.val(ia), self.val(ic));
        if c.cols() != 1 || c.rows() != m.rows() {
            return Err(shape("add_col", m, c));
        }
        let mut out = m.clone();
        for i in 0..out.rows() {
            let b = c.data()[i];
            out.row_mut(i).iter_mut().for_each(|o| *o += b);
        }
        Ok(self.push(out, Op::AddCol(ia, ic)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|x| x * s);
        Ok(self.push(out, Op::Scale(ia, s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|x| x + s);
        Ok(self.push(out, Op::AddScalar(ia)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// `log(1 - tanh(a)^2)` elementwise.
    pub fn log_dtanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, log_dtanh, Op::LogDTanh)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(f);
        Ok(self.push(out, op(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).sum();
        Ok(self.push(Matrix::scalar(s), Op::Sum(ia)))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let m = self.val(ia);
        let mut out = Matrix::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SumRows(ia)))
    }

    /// logsumexp over every entry, producing a 1x1 result.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = super::logsumexp(self.val(ia).data())?;
        Ok(self.push(Matrix::scalar(v), Op::LogSumExp(ia)))
    }

    /// See [`super::block_log_matmul_exp`].
    pub fn block_log_matmul_exp(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = super::block_log_matmul_exp(self.val(ia), self.val(ib), blocks)?;
        Ok(self.push(out, Op::BlockLogMatMulExp { a: ia, b: ib, blocks }))
    }

    /// Entries `start..start + rows*cols` of row `row` of `src`, reshaped
    /// row-major into `rows x cols`.
    pub fn slice_reshape(
        &mut self,
        src: Var,
        row: usize,
        start: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let is = self.idx(src)?;
        let m = self.val(is);
        if row >= m.rows() || start + rows * cols > m.cols() {
            return Err(Error::Shape {
                op: "slice_reshape",
                detail: format!(
                    "row {row}, range {start}..{} of a {}x{} matrix",
                    start + rows * cols,
                    m.rows(),
                    m.cols()
                ),
            });
        }
        let data = m.row(row)[start..start + rows * cols].to_vec();
        let out = Matrix::new(rows, cols, data)?;
        Ok(self.push(out, Op::SliceReshape { src: is, row, start }))
    }

    /// Columns `start..start+count` of `src`.
    pub fn columns(&mut self, src: Var, start: usize, count: usize) -> Result<Var> {
        let is = self.idx(src)?;
        let m = self.val(is);
        if start + count > m.cols() {
            return Err(Error::Shape {
                op: "columns",
                detail: format!("columns {start}..{} of {} ", start + count, m.cols()),
            });
        }
        let mut out = Matrix::zeros(m.rows(), count);
        for i in 0..m.rows() {
            out.row_mut(i).copy_from_slice(&m.row(i)[start..start + count]);
        }
        Ok(self.push(out, Op::Columns { src: is, start }))
    }

    /// Assembles a block lower-triangular matrix.
    ///
    /// `diag` is `blocks*h_out x h_in` and holds the diagonal blocks stacked
    /// vertically. `off` is a `1 x n` row holding, for each row-block `d`, the
    /// `h_out x d*h_in` strictly-lower region row-major. Blocks above the
    /// diagonal are zero in the output, which is `blocks*h_out x blocks*h_in`.
    pub fn masked_blocks(&mut self, diag: Var, off: Var, blocks: usize) -> Result<Var> {
        let (id, io) = (self.idx(diag)?, self.idx(off)?);
        let out = assemble_masked(self.val(id), self.val(io), blocks)?;
        Ok(self.push(out, Op::MaskedBlocks { diag: id, off: io, blocks }))
    }

    /// Backpropagates from a 1x1 node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.idx(output)?;
        if self.val(out).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from a non-scalar node of shape {:?}",
                self.val(out).shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; out + 1];
        let mut grads: Vec<Option<Matrix>> = vec![None; self.n_params];
        adj[out] = Some(Matrix::scalar(1.0));

        for i in (0..=out).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Constant => {}
                Op::Param(p) => grads[p] = Some(g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.val(a), self.val(b));
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm(1.0, &g, false, vb, true, 0.0, &mut ga);
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(1.0, va, true, &g, false, 0.0, &mut gb);
                    self.acc(&mut adj, a, ga);
                    self.acc(&mut adj, b, gb);
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, a, g.clone());
                    self.acc(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, a, g.clone());
                    self.acc(&mut adj, b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.val(b), |x, y| x * y)?;
                    let gb = g.zip_map(self.val(a), |x, y| x * y)?;
                    self.acc(&mut adj, a, ga);
                    self.acc(&mut adj, b, gb);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for k in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    self.acc(&mut adj, r, gr);
                    self.acc(&mut adj, a, g);
                }
                Op::AddCol(a, c) => {
                    let gc: Vec<f64> = (0..g.rows()).map(|k| g.row(k).iter().sum()).collect();
                    self.acc(&mut adj, c, Matrix::column(&gc));
                    self.acc(&mut adj, a, g);
                }
                Op::Scale(a, s) => self.acc(&mut adj, a, g.map(|x| x * s)),
                Op::AddScalar(a) => self.acc(&mut adj, a, g),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, t| x * (1.0 - t * t))?;
                    self.acc(&mut adj, a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.val(a), |x, u| if u > 0.0 { x } else { 0.0 })?;
                    self.acc(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, e| x * e)?;
                    self.acc(&mut adj, a, ga);
                }
                Op::LogDTanh(a) => {
                    let ga = g.zip_map(self.val(a), |x, u| -2.0 * x * u.tanh())?;
                    self.acc(&mut adj, a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.val(a), |x, u| 2.0 * x * u)?;
                    self.acc(&mut adj, a, ga);
                }
                Op::Sum(a) => {
                    let va = self.val(a);
                    self.acc(&mut adj, a, Matrix::filled(va.rows(), va.cols(), g.item()));
                }
                Op::SumRows(a) => {
                    let va = self.val(a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for k in 0..va.rows() {
                        ga.row_mut(k).copy_from_slice(g.data());
                    }
                    self.acc(&mut adj, a, ga);
                }
                Op::LogSumExp(a) => {
                    let l = node.value.item();
                    let gi = g.item();
                    let ga = self.val(a).map(|x| gi * (x - l).exp());
                    self.acc(&mut adj, a, ga);
                }
                Op::BlockLogMatMulExp { a, b, blocks } => {
                    let (ga, gb) =
                        super::block_lme_backward(self.val(a), self.val(b), &node.value, &g, blocks);
                    self.acc(&mut adj, a, ga);
                    self.acc(&mut adj, b, gb);
                }
                Op::SliceReshape { src, row, start } => {
                    let cols = self.val(src).cols();
                    let slot = adj[src].get_or_insert_with(|| {
                        let v = self.val(src);
                        Matrix::zeros(v.rows(), v.cols())
                    });
                    let dst = &mut slot.data_mut()[row * cols + start..row * cols + start + g.len()];
                    for (d, v) in dst.iter_mut().zip(g.data()) {
                        *d += v;
                    }
                    self.precision.round(slot);
                }
                Op::Columns { src, start } => {
                    let slot = adj[src].get_or_insert_with(|| {
                        let v = self.val(src);
                        Matrix::zeros(v.rows(), v.cols())
                    });
                    for k in 0..g.rows() {
                        let dst = &mut slot.row_mut(k)[start..start + g.cols()];
                        for (d, v) in dst.iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    self.precision.round(slot);
                }
                Op::MaskedBlocks { diag, off, blocks } => {
                    let (gd, go) = masked_backward(self.val(diag), self.val(off), &g, blocks);
                    self.acc(&mut adj, diag, gd);
                    self.acc(&mut adj, off, go);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, adj: &mut [Option<Matrix>], i: usize, mut g: Matrix) {
        match &mut adj[i] {
            Some(existing) => {
                existing.add_assign(&g);
                self.precision.round(existing);
            }
            slot @ None => {
                self.precision.round(&mut g);
                *slot = Some(g);
            }
        }
    }
}

fn shape(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        detail: format!("{}x{} with {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
    }
}

/// Number of stored strictly-lower entries for a block lower-triangular
/// matrix with `blocks` row-blocks of `h_out x h_in` blocks.
pub fn masked_off_len(blocks: usize, h_out: usize, h_in: usize) -> usize {
    h_out * h_in * blocks * (blocks.saturating_sub(1)) / 2
}

pub(crate) fn assemble_masked(diag: &Matrix, off: &Matrix, blocks: usize) -> Result<Matrix> {
    if blocks == 0 || diag.rows() % blocks != 0 {
        return Err(Error::Shape {
            op: "masked_blocks",
            detail: format!("{} diagonal rows in {blocks} blocks", diag.rows()),
        });
    }
    let h_out = diag.rows() / blocks;
    let h_in = diag.cols();
    if off.len() != masked_off_len(blocks, h_out, h_in) {
        return Err(Error::Shape {
            op: "masked_blocks",
            detail: format!(
                "{} off-diagonal values, expected {}",
                off.len(),
                masked_off_len(blocks, h_out, h_in)
            ),
        });
    }
    let cols = blocks * h_in;
    let mut out = Matrix::zeros(blocks * h_out, cols);
    let offd = off.data();
    let mut pos = 0;
    for d in 0..blocks {
        let width = d * h_in;
        for i in 0..h_out {
            let r = d * h_out + i;
            let row = out.row_mut(r);
            row[..width].copy_from_slice(&offd[pos..pos + width]);
            pos += width;
            row[width..width + h_in].copy_from_slice(diag.row(r));
        }
    }
    Ok(out)
}

fn masked_backward(diag: &Matrix, off: &Matrix, g: &Matrix, blocks: usize) -> (Matrix, Matrix) {
    let h_out = diag.rows() / blocks;
    let h_in = diag.cols();
    let mut gd = Matrix::zeros(diag.rows(), diag.cols());
    let mut go = Matrix::zeros(off.rows(), off.cols());
    let mut pos = 0;
    for d in 0..blocks {
        let width = d * h_in;
        for i in 0..h_out {
            let r = d * h_out + i;
            let grow = g.row(r);
            go.data_mut()[pos..pos + width].copy_from_slice(&grow[..width]);
            pos += width;
            gd.row_mut(r).copy_from_slice(&grow[width..width + h_in]);
        }
    }
    (gd, go)
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of parameter `id`; `None` when the output does not depend on it.
    pub fn get(&self, id: usize) -> Option<&Matrix> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradients as dense matrices shaped like `params`, zero where unused.
    pub fn into_dense(self, params: &[Arc<Matrix>]) -> Vec<Matrix> {
        let mut grads = self.grads;
        grads.resize(params.len(), None);
        grads
            .into_iter()
            .zip(params)
            .map(|(g, p)| g.unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect()
    }
}

/// Value and gradient of a scalar function of `params`.
///
/// `f` receives a fresh tape and one leaf per parameter, in order.
pub fn gradient<F>(params: &[Arc<Matrix>], f: F) -> Result<(f64, Vec<Matrix>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    let grads = tape.backward(out)?;
    Ok((value, grads.into_dense(params)))
}
