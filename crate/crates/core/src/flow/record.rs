use super::{CondAFConfig, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

/// Records `log p(x_s | c)` for every column of `x` (`dim x n`) on `tape`.
///
/// The flow parameters are row `row` of the head outputs: `weights` holds
/// one [`CondAFConfig::stored_weight_len`] row per condition and `biases`
/// one [`CondAFConfig::bias_len`] row. Returns a `1 x n` node.
pub fn record_log_prob(
    tape: &mut Tape,
    cfg: &CondAFConfig,
    weights: Var,
    biases: Var,
    row: usize,
    x: &Matrix,
) -> Result<Var> {
    if x.rows() != cfg.dim {
        return Err(Error::Shape {
            op: "record_log_prob",
            detail: format!("input has {} rows, flow dimension is {}", x.rows(), cfg.dim),
        });
    }
    let dim = cfg.dim;
    let n = x.cols();
    let mut h = tape.constant(x.clone());
    let mut chain = tape.constant(Matrix::zeros(dim, n));
    let (mut wp, mut bp) = (0, 0);
    for (k, s) in cfg.layer_shapes().into_iter().enumerate() {
        let (nd, no, nb) = (s.diag_len(dim), s.off_len(dim), s.bias_len(dim));
        let log_diag = tape.slice_reshape(weights, row, wp, dim * s.h_out, s.h_in)?;
        let off = tape.slice_reshape(weights, row, wp + nd, 1, no)?;
        let bias = tape.slice_reshape(biases, row, bp, nb, 1)?;
        wp += nd + no;
        bp += nb;

        let diag = tape.exp(log_diag)?;
        let w = tape.masked_blocks(diag, off, dim)?;
        let a = tape.matmul(w, h)?;
        let a = tape.add_col(a, bias)?;
        let lme = tape.block_log_matmul_exp(log_diag, chain, dim)?;
        if k < cfg.hidden_layers {
            let slope = tape.log_dtanh(a)?;
            chain = tape.add(lme, slope)?;
            h = tape.tanh(a)?;
        } else {
            chain = lme;
            h = a;
        }
    }
    let zsq = tape.square(h)?;
    let zsq = tape.sum_rows(zsq)?;
    let logdet = tape.sum_rows(chain)?;
    let half = tape.scale(zsq, 0.5)?;
    let lp = tape.sub(logdet, half)?;
    tape.add_scalar(lp, -(dim as f64) * HALF_LN_2PI)
}
