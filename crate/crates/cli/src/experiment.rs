//! Per-experiment data, model construction and evaluation reports.

use std::path::Path;

use hcnaf::checkpoint::{Archive, CHECKPOINT_MAGIC};
use hcnaf::experiments::{density_grid, eval_nll, mnist, pom, toy, with_condition, Estimate};
use hcnaf::hypernet::HyperNet;
use hcnaf::model::{AffineConfig, AffineModel, ConditionalModel, Dataset, Model};
use hcnaf::tensor::Matrix;
use hcnaf::{Error, Result};

use crate::config::{fmt_f64, Experiment, ModelKind, RunConfig};

/// Prefix of the run-configuration entries stored in checkpoints.
const RUN_PREFIX: &str = "run.";

pub fn training_data(cfg: &RunConfig) -> Result<Dataset> {
    let (n, seed) = (cfg.data.n, cfg.data.seed);
    match cfg.experiment {
        Experiment::Toy1 => toy::toy1_dataset(n, seed),
        Experiment::Toy2 => toy::toy2_dataset(&toy::CondGaussianSpec::default(), n, seed),
        Experiment::ToyPom => pom::scenes_to_dataset(&pom::gen_toy_pom(n, seed)),
        Experiment::Mnist => {
            let mut images = load_digits(cfg, "train")?;
            if n > 0 {
                images.pixels.truncate(n);
                images.labels.truncate(n);
            }
            mnist::to_dataset(&images, cfg.data.lambda, seed)
        }
    }
}

/// `{split}-images.idx` and `{split}-labels.idx` from `data.dir`, resampled
/// to 8 x 8 when stored at another size.
pub fn load_digits(cfg: &RunConfig, split: &str) -> Result<mnist::LabeledImages> {
    let dir = &cfg.data.dir;
    let mut images = mnist::load_labeled(
        &dir.join(format!("{split}-images.idx")),
        &dir.join(format!("{split}-labels.idx")),
    )?;
    let side = (cfg.experiment.shape().0 as f64).sqrt() as usize;
    if images.side != side {
        images.pixels = images.pixels.iter().map(|p| mnist::downsample(p, images.side, side)).collect();
        images.side = side;
    }
    Ok(images)
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    cfg.validate()?;
    Ok(match cfg.model {
        ModelKind::Hcnaf => Model::Hcnaf(HyperNet::new(cfg.hyper.clone(), cfg.flow.clone(), cfg.seed)?),
        ModelKind::Affine => Model::Affine(AffineModel::new(
            AffineConfig {
                dim: cfg.flow.dim,
                cond_dim: cfg.hyper.cond_dim,
                hidden: cfg.affine_hidden,
            },
            cfg.seed,
        )?),
    })
}

/// Run-configuration entries stored alongside the model, without the
/// output directory so that checkpoints do not depend on where they are written.
pub fn checkpoint_entries(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.entries()
        .into_iter()
        .filter(|(k, _)| k != "output_dir")
        .map(|(k, v)| (format!("{RUN_PREFIX}{k}"), v))
        .collect()
}

pub fn save_checkpoint(model: &Model, cfg: &RunConfig, path: &Path) -> Result<()> {
    model.save(path, &checkpoint_entries(cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model)> {
    let archive = Archive::load(path, CHECKPOINT_MAGIC)?;
    let pairs: Vec<(String, String)> = archive
        .config
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(RUN_PREFIX).map(|k| (k.to_string(), v.clone())))
        .collect();
    let cfg = RunConfig::from_pairs(&pairs)?;
    let model = Model::from_archive(&archive)?;
    if model.dim() != cfg.flow.dim || model.cond_dim() != cfg.hyper.cond_dim {
        return Err(Error::Format("checkpoint model does not match its run configuration".into()));
    }
    Ok((cfg, model))
}

/// Ordered `key=value` metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, v: f64) {
        self.entries.push((key.into(), fmt_f64(v)));
    }

    pub fn push_estimate(&mut self, key: &str, e: &Estimate) {
        self.push(key, e.mean);
        self.push(format!("{key}_se"), e.se);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).and_then(|(_, v)| v.parse().ok())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Held-out metrics appropriate to the experiment.
pub fn evaluate(cfg: &RunConfig, model: &Model) -> Result<Report> {
    let mut r = Report::default();
    let e = &cfg.eval;
    match cfg.experiment {
        Experiment::Toy1 => {
            for class in 0..toy::GRID_SIDES.len() {
                let spec = toy::GridGaussianSpec::for_class(class)?;
                let test = toy::gen_grid_gaussians(&spec, e.n_samples, e.seed.wrapping_add(class as u64))?;
                let nll = eval_nll(model, &test)?;
                let floor = toy::mc_entropy(&spec, e.entropy_samples, e.seed.wrapping_add(100 + class as u64))?;
                let key = format!("toy1.grid{}", spec.k);
                r.push_estimate(&format!("{key}.nll"), &nll);
                r.push_estimate(&format!("{key}.entropy"), &floor);
                r.push(format!("{key}.gap"), nll.mean - floor.mean);
            }
        }
        Experiment::Toy2 => {
            let spec = toy::CondGaussianSpec::default();
            let h = toy::gaussian_entropy(spec.sigma);
            r.push("toy2.entropy", h);
            for (group, conds) in [("train", &spec.train), ("unseen", &spec.unseen)] {
                let (mut ce_sum, mut kl_sum) = (0.0, 0.0);
                for (i, c) in conds.iter().enumerate() {
                    let seed = e.seed.wrapping_add(i as u64 + if group == "train" { 0 } else { 50 });
                    let test = toy::gen_conditional_gaussian(*c, spec.sigma, e.n_samples, seed)?;
                    let k = hcnaf::experiments::kl_from_samples(model, &test, h)?;
                    let key = format!("toy2.{group}.c{}_{}", c[0], c[1]);
                    r.push_estimate(&format!("{key}.cross_entropy"), &k.cross_entropy);
                    r.push(format!("{key}.kl"), k.kl);
                    ce_sum += k.cross_entropy.mean;
                    kl_sum += k.kl;
                }
                r.push(format!("toy2.{group}.cross_entropy"), ce_sum / conds.len() as f64);
                r.push(format!("toy2.{group}.kl"), kl_sum / conds.len() as f64);
            }
        }
        Experiment::ToyPom => {
            let mut worst: f64 = f64::NEG_INFINITY;
            for s in 0..pom::scenarios().len() {
                let scen = pom::scenario(s)?;
                for &h in &pom::HORIZONS {
                    let seed = e.seed.wrapping_add((10 * s + h) as u64);
                    let kl = pom_kl(model, s, h as f64, e.n_samples, seed)?;
                    worst = worst.max(kl.mean);
                    r.push_estimate(&format!("toypom.{}.dt{h}.kl", scen.name), &kl);
                }
            }
            r.push("toypom.max_kl", worst);
            let (left, right) = pom_side_mass(model, 0, *pom::HORIZONS.last().expect("non-empty"))?;
            r.push("toypom.t-junction.left_mass", left);
            r.push("toypom.t-junction.right_mass", right);
            r.push("toypom.t-junction.left_right_ratio", left / right);
            let episodes = pom::gen_episodes(e.episodes, e.eta_sigma, e.seed.wrapping_add(7));
            let en = pom::extra_nats(&episodes, e.eta_sigma, |s, dt, pts| pom_log_q(model, s, dt, pts))?;
            r.push_estimate("toypom.extra_nats", &en);
            let oracle = pom::extra_nats(&episodes, e.eta_sigma, |s, dt, pts| {
                let scen = pom::scenario(s)?;
                Ok(pts.iter().map(|p| scen.log_density_with_noise(p, dt, e.eta_sigma)).collect())
            })?;
            r.push_estimate("toypom.extra_nats_oracle", &oracle);
        }
        Experiment::Mnist => {
            let test_images = load_digits(cfg, "test")?;
            let test = mnist::to_dataset(&test_images, cfg.data.lambda, e.seed)?;
            let cond = eval_nll(model, &test)?;
            r.push_estimate("mnist.conditional_nll", &cond);
            let mix = mnist::mixture_log_prob(model, &test.x)?;
            let nll: Vec<f64> = mix.iter().map(|v| -v).collect();
            r.push_estimate("mnist.mixture_nll", &Estimate::from_values(&nll)?);
            let bpp: Vec<f64> = mix
                .iter()
                .enumerate()
                .map(|(i, &lp)| mnist::bits_per_pixel(lp, test.x.row(i), cfg.data.lambda))
                .collect();
            r.push_estimate("mnist.bits_per_pixel", &Estimate::from_values(&bpp)?);
        }
    }
    Ok(r)
}

/// `KL(p || q)` for the analytic scenario density `p`, estimated as the
/// mean of `log p - log q` over draws of `p`.
pub fn pom_kl(model: &Model, scenario: usize, dt: f64, n: usize, seed: u64) -> Result<Estimate> {
    let data = pom::scenario_samples(scenario, dt, n, seed)?;
    let scen = pom::scenario(scenario)?;
    let lq = model.log_prob_batch(&data.x, &data.c)?;
    let diffs: Vec<f64> = lq
        .iter()
        .enumerate()
        .map(|(i, q)| scen.log_density(data.x.row(i), dt) - q)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("scenario log density ratio".into()));
    }
    Estimate::from_values(&diffs)
}

fn pom_log_q(model: &Model, scenario: usize, dt: f64, pts: &[[f64; 2]]) -> Result<Vec<f64>> {
    let x = Matrix::new(pts.len(), 2, pts.iter().flatten().copied().collect())?;
    let data = with_condition(x, &pom::scenario(scenario)?.condition(dt))?;
    model.log_prob_batch(&data.x, &data.c)
}

/// Model mass left and right of the approach road's centerline on a
/// 200 x 200 grid over the scene extent.
pub fn pom_side_mass(model: &Model, scenario: usize, dt: usize) -> Result<(f64, f64)> {
    let c = pom::scenario(scenario)?.condition(dt as f64);
    let ext = pom::EXTENT + 1.0;
    let g = density_grid(model, &c, [-ext, ext, -ext, ext], 200, 200)?;
    Ok((g.mass_where(|x, _| x < 0.0), g.mass_where(|x, _| x > 0.0)))
}

/// Condition vector from either an explicit list or a toy-POM scenario.
pub fn resolve_condition(
    cfg: &RunConfig,
    condition: Option<&str>,
    scenario: Option<usize>,
    horizon: Option<usize>,
) -> Result<Vec<f64>> {
    let c = match (condition, scenario, horizon) {
        (Some(list), None, None) => list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Argument(format!("invalid condition value '{v}'")))
            })
            .collect::<Result<Vec<_>>>()?,
        (None, Some(s), Some(h)) if cfg.experiment == Experiment::ToyPom => {
            if !pom::HORIZONS.contains(&h) {
                return Err(Error::Argument(format!("horizon must be one of {:?}", pom::HORIZONS)));
            }
            pom::scenario(s)?.condition(h as f64)
        }
        (None, Some(_), Some(_)) => {
            return Err(Error::Argument("--scenario/--horizon apply only to toypom checkpoints".into()))
        }
        _ => return Err(Error::Argument("give either --condition or both --scenario and --horizon".into())),
    };
    if c.len() != cfg.hyper.cond_dim {
        return Err(Error::Argument(format!(
            "condition has {} values, the model expects {}",
            c.len(),
            cfg.hyper.cond_dim
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("condition values must be finite".into()));
    }
    Ok(c)
}
