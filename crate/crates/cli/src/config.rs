//! Run configuration and its flat `key = value` file format.
//!
//! The first non-comment line is `hcnaf-config 1`. Every other non-empty
//! line is `key = value` with dotted keys; `#` starts a comment line.
//! Keys missing from a file take the defaults of the named experiment, so
//! `experiment` must be present. Floats are written in shortest round-trip
//! form, which makes [`RunConfig::to_text`] and [`RunConfig::parse`] exact
//! inverses.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use hcnaf::experiments::pom;
use hcnaf::flow::CondAFConfig;
use hcnaf::hypernet::HyperNetConfig;
use hcnaf::tensor::Precision;
use hcnaf::training::TrainConfig;
use hcnaf::{Error, Result};

pub const CONFIG_HEADER: &str = "hcnaf-config 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Toy1,
    Toy2,
    ToyPom,
    Mnist,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::Toy1, Experiment::Toy2, Experiment::ToyPom, Experiment::Mnist];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Toy1 => "toy1",
            Experiment::Toy2 => "toy2",
            Experiment::ToyPom => "toypom",
            Experiment::Mnist => "mnist",
        }
    }

    /// `(dim, cond_dim)` of the data.
    pub fn shape(self) -> (usize, usize) {
        match self {
            Experiment::Toy1 => (2, 1),
            Experiment::Toy2 => (2, 2),
            Experiment::ToyPom => (2, pom::COND_DIM),
            Experiment::Mnist => (64, 1),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown experiment '{s}' (expected toy1, toy2, toypom or mnist)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Hcnaf,
    Affine,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Hcnaf => "hcnaf",
            ModelKind::Affine => "affine",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hcnaf" => Ok(ModelKind::Hcnaf),
            "affine" => Ok(ModelKind::Affine),
            _ => Err(Error::Argument(format!("unknown model '{s}' (expected hcnaf or affine)"))),
        }
    }
}

/// Training-data parameters. `n` counts samples per condition for the
/// Gaussian toys, scenes for `toypom`, and images for `mnist` (0 = all).
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    pub seed: u64,
    /// IDX directory for `mnist`.
    pub dir: PathBuf,
    /// Dequantization boundary for `mnist`.
    pub lambda: f64,
}

/// Evaluation sample sizes and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Held-out samples per condition.
    pub n_samples: usize,
    /// Samples for Monte Carlo entropy floors.
    pub entropy_samples: usize,
    /// Episodes for the extra-nats metric.
    pub episodes: usize,
    pub eta_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub model: ModelKind,
    /// Parameter initialization seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub flow: CondAFConfig,
    pub hyper: HyperNetConfig,
    pub affine_hidden: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let (dim, cond_dim) = experiment.shape();
        let mut train = TrainConfig::default();
        let mut data = DataConfig {
            n: 20_000,
            seed: 1,
            dir: PathBuf::from("data/digits8x8"),
            lambda: hcnaf::experiments::mnist::DEFAULT_LAMBDA,
        };
        let mut bias_scale = 1.0;
        let (layers, width, trunk, heads, scale) = match experiment {
            Experiment::Toy1 => {
                train.max_iters = 30_000;
                train.val_every = 500;
                bias_scale = 0.0;
                (2, 32, vec![], 64, 0.25)
            }
            Experiment::Toy2 => {
                train.learning_rate = 1e-3;
                train.max_iters = 5_000;
                train.val_every = 500;
                (3, 16, vec![], 256, 0.25)
            }
            Experiment::ToyPom => {
                data.n = 40_000;
                train.max_iters = 10_000;
                train.val_every = 500;
                (2, 16, vec![64], 64, 0.25)
            }
            Experiment::Mnist => {
                data.n = 0;
                data.lambda = 1e-6;
                train.max_iters = 3_000;
                train.val_every = 250;
                train.patience_iters = 1_000;
                (1, 4, vec![], 32, 0.1)
            }
        };
        let mut hyper = HyperNetConfig::new(cond_dim, trunk, heads, heads);
        hyper.init_input_scale = scale;
        hyper.init_bias_scale = bias_scale;
        Self {
            experiment,
            model: ModelKind::Hcnaf,
            seed: 0,
            output_dir: PathBuf::from(format!("runs/{experiment}")),
            data,
            flow: CondAFConfig::new(dim, layers, width).expect("valid default flow"),
            hyper,
            affine_hidden: 64,
            train,
            eval: EvalConfig {
                n_samples: 10_000,
                entropy_samples: 1_000_000,
                episodes: 10_000,
                eta_sigma: 0.01,
                seed: 12_345,
            },
        }
    }

    /// Ordered `(key, value)` entries of every field.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let e = [
            ("experiment", self.experiment.name().to_string()),
            ("model", self.model.name().to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("data.n", self.data.n.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("data.dir", self.data.dir.display().to_string()),
            ("data.lambda", fmt_f64(self.data.lambda)),
            ("flow.dim", self.flow.dim.to_string()),
            ("flow.hidden_layers", self.flow.hidden_layers.to_string()),
            ("flow.width_per_dim", self.flow.width_per_dim.to_string()),
            ("hyper.cond_dim", self.hyper.cond_dim.to_string()),
            ("hyper.trunk_widths", join(&self.hyper.trunk_widths)),
            ("hyper.head_width_w", self.hyper.head_width_w.to_string()),
            ("hyper.head_width_b", self.hyper.head_width_b.to_string()),
            ("hyper.init_input_scale", fmt_f64(self.hyper.init_input_scale)),
            ("hyper.init_bias_scale", fmt_f64(self.hyper.init_bias_scale)),
            ("affine.hidden", self.affine_hidden.to_string()),
            ("train.learning_rate", fmt_f64(t.learning_rate)),
            ("train.decay_factor", fmt_f64(t.decay_factor)),
            ("train.patience_iters", t.patience_iters.to_string()),
            ("train.improvement_threshold", fmt_f64(t.improvement_threshold)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_iters", t.max_iters.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.precision", precision_name(t.precision).to_string()),
            ("train.val_fraction", fmt_f64(t.val_fraction)),
            ("train.val_every", t.val_every.to_string()),
            ("train.clip_norm", fmt_f64(t.clip_norm)),
            ("eval.n_samples", self.eval.n_samples.to_string()),
            ("eval.entropy_samples", self.eval.entropy_samples.to_string()),
            ("eval.episodes", self.eval.episodes.to_string()),
            ("eval.eta_sigma", fmt_f64(self.eval.eta_sigma)),
            ("eval.seed", self.eval.seed.to_string()),
        ];
        e.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CONFIG_HEADER}\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, CONFIG_HEADER)) => {}
            Some((n, l)) => return Err(Error::Format(format!("line {n}: expected '{CONFIG_HEADER}', found '{l}'"))),
            None => return Err(Error::Format("empty config".into())),
        }
        let mut pairs = Vec::new();
        for (n, l) in lines {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {n}: expected 'key = value'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    /// Experiment defaults overridden by `pairs`; `experiment` is required.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if map.insert(k.as_str(), v.as_str()).is_some() {
                return Err(Error::Format(format!("duplicate key '{k}'")));
            }
        }
        let exp: Experiment = map
            .remove("experiment")
            .ok_or_else(|| Error::Format("missing key 'experiment'".into()))?
            .parse()?;
        let mut cfg = Self::defaults(exp);
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "experiment" => {
                let e: Experiment = value.parse()?;
                if e != self.experiment {
                    return Err(Error::Argument("experiment cannot be overridden".into()));
                }
            }
            "model" => self.model = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "data.n" => self.data.n = num(key, value)?,
            "data.seed" => self.data.seed = num(key, value)?,
            "data.dir" => self.data.dir = PathBuf::from(value),
            "data.lambda" => self.data.lambda = num(key, value)?,
            "flow.dim" => self.flow.dim = num(key, value)?,
            "flow.hidden_layers" => self.flow.hidden_layers = num(key, value)?,
            "flow.width_per_dim" => self.flow.width_per_dim = num(key, value)?,
            "hyper.cond_dim" => self.hyper.cond_dim = num(key, value)?,
            "hyper.trunk_widths" => self.hyper.trunk_widths = split(key, value)?,
            "hyper.head_width_w" => self.hyper.head_width_w = num(key, value)?,
            "hyper.head_width_b" => self.hyper.head_width_b = num(key, value)?,
            "hyper.init_input_scale" => self.hyper.init_input_scale = num(key, value)?,
            "hyper.init_bias_scale" => self.hyper.init_bias_scale = num(key, value)?,
            "affine.hidden" => self.affine_hidden = num(key, value)?,
            "train.learning_rate" => t.learning_rate = num(key, value)?,
            "train.decay_factor" => t.decay_factor = num(key, value)?,
            "train.patience_iters" => t.patience_iters = num(key, value)?,
            "train.improvement_threshold" => t.improvement_threshold = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.max_iters" => t.max_iters = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "train.precision" => t.precision = parse_precision(value)?,
            "train.val_fraction" => t.val_fraction = num(key, value)?,
            "train.val_every" => t.val_every = num(key, value)?,
            "train.clip_norm" => t.clip_norm = num(key, value)?,
            "eval.n_samples" => self.eval.n_samples = num(key, value)?,
            "eval.entropy_samples" => self.eval.entropy_samples = num(key, value)?,
            "eval.episodes" => self.eval.episodes = num(key, value)?,
            "eval.eta_sigma" => self.eval.eta_sigma = num(key, value)?,
            "eval.seed" => self.eval.seed = num(key, value)?,
            _ => return Err(Error::Format(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let (dim, cond_dim) = self.experiment.shape();
        if self.flow.dim != dim || self.hyper.cond_dim != cond_dim {
            return Err(Error::Argument(format!(
                "{} data has dimension {dim} and condition dimension {cond_dim}; config says {} and {}",
                self.experiment, self.flow.dim, self.hyper.cond_dim
            )));
        }
        self.flow.validate()?;
        self.hyper.validate()?;
        self.train.validate()?;
        if self.affine_hidden == 0 {
            return Err(Error::Argument("affine.hidden must be at least 1".into()));
        }
        if !(self.data.lambda > 0.0 && self.data.lambda < 0.5) {
            return Err(Error::Argument("data.lambda must lie in (0, 0.5)".into()));
        }
        if !(self.eval.eta_sigma > 0.0 && self.eval.eta_sigma.is_finite()) {
            return Err(Error::Argument("eval.eta_sigma must be positive".into()));
        }
        if self.eval.n_samples == 0 || self.eval.entropy_samples == 0 || self.eval.episodes == 0 {
            return Err(Error::Argument("evaluation sample counts must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn join(v: &[usize]) -> String {
    v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

fn split(key: &str, s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|w| num(key, w.trim())).collect()
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("invalid value '{value}' for '{key}'")))
}

pub fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Double => "double",
        Precision::Single => "single",
    }
}

pub fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "double" | "64" => Ok(Precision::Double),
        "single" | "32" => Ok(Precision::Single),
        _ => Err(Error::Argument(format!("unknown precision '{s}' (expected double or single)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_roundtrip() {
        for e in Experiment::ALL {
            let c = RunConfig::defaults(e);
            c.validate().unwrap();
            assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::parse("# comment\nhcnaf-config 1\nexperiment = toy2\ntrain.max_iters = 7\n").unwrap();
        let mut d = RunConfig::defaults(Experiment::Toy2);
        d.train.max_iters = 7;
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_bad_files() {
        for bad in [
            "",
            "experiment = toy1\n",
            "hcnaf-config 2\nexperiment = toy1\n",
            "hcnaf-config 1\n",
            "hcnaf-config 1\nexperiment = toy3\n",
            "hcnaf-config 1\nexperiment = toy1\nnope = 1\n",
            "hcnaf-config 1\nexperiment = toy1\nseed = 1\nseed = 2\n",
            "hcnaf-config 1\nexperiment = toy1\nseed\n",
            "hcnaf-config 1\nexperiment = toy1\ntrain.batch_size = -3\n",
            "hcnaf-config 1\nexperiment = toy1\nflow.dim = 3\n",
            "hcnaf-config 1\nexperiment = toy1\ntrain.precision = half\n",
            "hcnaf-config 1\nexperiment = toy1\ntrain.learning_rate = 0\n",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad:?}");
        }
    }

    proptest! {
        #[test]
        fn arbitrary_configs_roundtrip(
            exp in 0usize..4,
            lr in 1e-6f64..1.0,
            lambda in 1e-9f64..0.1,
            trunk in proptest::collection::vec(1usize..300, 0..3),
            scale in 1e-6f64..10.0,
            single in any::<bool>(),
            seed in any::<u64>(),
            layers in 1usize..5,
        ) {
            let mut c = RunConfig::defaults(Experiment::ALL[exp]);
            c.train.learning_rate = lr;
            c.data.lambda = lambda;
            c.hyper.trunk_widths = trunk;
            c.hyper.init_input_scale = scale;
            c.train.precision = if single { Precision::Single } else { Precision::Double };
            c.seed = seed;
            c.flow.hidden_layers = layers;
            c.model = if single { ModelKind::Affine } else { ModelKind::Hcnaf };
            prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
