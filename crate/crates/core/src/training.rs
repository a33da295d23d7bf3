//! Maximum-likelihood training: NLL objective, Adam, the plateau learning
//! rate schedule, the training loop and finite-difference gradient checks.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ConditionalModel, Dataset};
use crate::tensor::{Matrix, Precision, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub patience_iters: usize,
    /// Minimum validation NLL decrease that counts as an improvement.
    pub improvement_threshold: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub precision: Precision,
    pub val_fraction: f64,
    pub val_every: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            decay_factor: 0.5,
            patience_iters: 2000,
            improvement_threshold: 1e-4,
            batch_size: 64,
            max_iters: 10_000,
            seed: 0,
            precision: Precision::Double,
            val_fraction: 0.1,
            val_every: 100,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.val_every == 0 || self.patience_iters == 0 {
            return bad("batch_size, val_every and patience_iters must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the rows of `x` given `c`.
pub fn nll_loss<M: ConditionalModel + ?Sized>(model: &M, x: &Matrix, c: &Matrix) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let lp = model.log_prob_batch(x, c)?;
    if let Some(index) = lp.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { index });
    }
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

fn record_nll<M: ConditionalModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &[Arc<Matrix>],
    x: &Matrix,
    c: &Matrix,
) -> Result<Var> {
    if x.rows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let ll = model.record_log_likelihood(tape, &vars, x, c)?;
    tape.scale(ll, -1.0 / x.rows() as f64)
}

/// Mean NLL and its gradient with respect to every parameter tensor.
pub fn nll_and_grad<M: ConditionalModel + ?Sized>(
    model: &M,
    x: &Matrix,
    c: &Matrix,
    precision: Precision,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::with_precision(precision);
    let loss = record_nll(model, &mut tape, model.params(), x, c)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        // locate the offending sample
        nll_loss(model, x, c)?;
        return Err(Error::NonFiniteLoss { index: 0 });
    }
    let grads = tape.backward(loss)?.into_dense(model.params());
    Ok((value, grads))
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[Arc<Matrix>]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Arc<Matrix>], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = Arc::make_mut(p);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the validation loss has
/// not improved by more than `threshold` for `patience` iterations.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.decay_factor, cfg.patience_iters, cfg.improvement_threshold)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records a validation loss measured `iters` iterations after the
    /// previous one and returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64, iters: usize) -> f64 {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += iters;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    /// Mean training batch NLL since the previous row.
    pub train_nll: f64,
    pub val_nll: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub best_val_nll: f64,
    pub best_iter: usize,
    pub initial_val_nll: f64,
}

impl TrainReport {
    /// `iter,train_nll,val_nll,lr` with full-precision values.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("iter,train_nll,val_nll,lr\n");
        for r in &self.metrics {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", r.iter, r.train_nll, r.val_nll, r.lr));
        }
        s
    }
}

/// Splits off `fraction` of the samples (at least one) as a validation set
/// using a seeded shuffle.
pub fn split_validation(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if data.len() < 2 {
        return Err(Error::Argument("need at least two samples to hold out a validation set".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a1d));
    let n_val = ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len() - 1);
    let (val, train) = idx.split_at(n_val);
    Ok((data.subset(train), data.subset(val)))
}

/// Trains on `data` with a held-out validation split.
pub fn train<M: ConditionalModel + ?Sized>(model: &mut M, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (tr, val) = split_validation(data, cfg.val_fraction, cfg.seed)?;
    train_with_validation(model, &tr, &val, cfg)
}

/// Adam on shuffled minibatches of `train`; the model ends at the
/// parameters with the best validation NLL seen.
pub fn train_with_validation<M: ConditionalModel + ?Sized>(
    model: &mut M,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    if cfg.precision == Precision::Single {
        for p in model.params_mut() {
            Arc::make_mut(p).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
    let mut adam = Adam::new(model.params());
    let mut sched = PlateauSchedule::from_config(cfg);
    let initial_val = nll_loss(model, &val.x, &val.c)?;
    sched.observe(initial_val, 0);
    let mut best = (initial_val, 0usize, model.params().to_vec());
    let mut metrics = Vec::new();
    let (mut acc, mut acc_n, mut last_eval) = (0.0, 0usize, 0usize);

    for iter in 1..=cfg.max_iters {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = train.subset(&idx);
        let (loss, mut grads) = match nll_and_grad(model, &batch.x, &batch.c, cfg.precision) {
            Ok(v) => v,
            Err(Error::NonFiniteLoss { .. }) => return Err(Error::Divergence { iter, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if loss > 1e6 {
            return Err(Error::Divergence { iter, loss });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(model.params_mut(), &grads, sched.lr());
        if cfg.precision == Precision::Single {
            for p in model.params_mut() {
                Arc::make_mut(p).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
        acc += loss;
        acc_n += 1;

        if iter % cfg.val_every == 0 || iter == cfg.max_iters {
            let v = match nll_loss(model, &val.x, &val.c) {
                Ok(v) => v,
                Err(Error::NonFiniteLoss { .. }) => return Err(Error::Divergence { iter, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if v < best.0 {
                best = (v, iter, model.params().to_vec());
            }
            let lr = sched.observe(v, iter - last_eval);
            last_eval = iter;
            metrics.push(MetricRow {
                iter,
                train_nll: acc / acc_n as f64,
                val_nll: v,
                lr,
            });
            acc = 0.0;
            acc_n = 0;
        }
    }
    model.params_mut().clone_from_slice(&best.2);
    Ok(TrainReport {
        metrics,
        best_val_nll: best.0,
        best_iter: best.1,
        initial_val_nll: initial_val,
    })
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Fraction of each tensor's entries to probe.
    pub fraction: f64,
    /// Upper bound on probes per tensor.
    pub max_per_tensor: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Central-difference step. Differences are always evaluated in double
    /// precision: at single precision the rounding of the loss itself
    /// (about 2e-7 near 3 nats) swamps the difference quotient.
    pub step: f64,
    /// Gradients smaller than this in magnitude are compared absolutely.
    pub floor: f64,
}

impl GradCheckOptions {
    pub fn new(precision: Precision) -> Self {
        Self {
            fraction: 0.05,
            max_per_tensor: 200,
            seed: 0,
            precision,
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares the analytic NLL gradient, computed at `opts.precision`, with
/// central differences on a random subset of parameter entries. Relative
/// error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<M: ConditionalModel + ?Sized>(
    model: &M,
    x: &Matrix,
    c: &Matrix,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = nll_and_grad(model, x, c, opts.precision)?;
    let names = model.param_names();
    let base: Vec<Arc<Matrix>> = model.params().to_vec();
    let eval = |params: &[Arc<Matrix>]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = record_nll(model, &mut tape, params, x, c)?;
        Ok(tape.value(loss).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut params = base.clone();
    for (t, p) in base.iter().enumerate() {
        let n = ((p.len() as f64 * opts.fraction).ceil() as usize).clamp(1, opts.max_per_tensor.max(1)).min(p.len());
        let mut entries: Vec<usize> = (0..p.len()).collect();
        entries.shuffle(&mut rng);
        for &e in &entries[..n] {
            let orig = p.data()[e];
            Arc::make_mut(&mut params[t]).data_mut()[e] = orig + h;
            let fp = eval(&params)?;
            Arc::make_mut(&mut params[t]).data_mut()[e] = orig - h;
            let fm = eval(&params)?;
            params[t] = Arc::clone(&base[t]);
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[t].data()[e];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((names[t].clone(), e));
            }
        }
    }
    Ok(report)
}
