//! Desk-scale occupancy forecasting: a point agent drives north towards an
//! intersection and continues left, straight or right with scenario-specific
//! probabilities. The future position at horizon `dt` follows an analytic
//! Gaussian mixture, so model densities can be scored exactly.
//!
//! The condition vector is the flattened 32x32 road occupancy grid, the last
//! five agent positions and the horizon.

use std::f64::consts::{E, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Estimate;
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::tensor::{logsumexp, Matrix};

pub const GRID_SIDE: usize = 32;
pub const EXTENT: f64 = 4.0;
pub const HISTORY: usize = 5;
pub const HORIZONS: [usize; 4] = [1, 2, 3, 4];
pub const COND_DIM: usize = GRID_SIDE * GRID_SIDE + 2 * HISTORY + 1;
const ROAD_HALF_WIDTH: f64 = 0.5;
const SPEED: f64 = 1.0;
const START: [f64; 2] = [0.0, -2.0];
const HISTORY_STEP: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Left,
    Straight,
    Right,
}

impl Route {
    fn arm_end(self) -> [f64; 2] {
        match self {
            Route::Left => [-EXTENT, 0.0],
            Route::Straight => [0.0, EXTENT],
            Route::Right => [EXTENT, 0.0],
        }
    }
}

/// Road layout and route probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: &'static str,
    pub routes: Vec<(Route, f64)>,
}

/// The four scenarios; index 0 is the symmetric T-junction.
pub fn scenarios() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "t-junction",
            routes: vec![(Route::Left, 0.5), (Route::Right, 0.5)],
        },
        Scenario {
            name: "four-way",
            routes: vec![(Route::Left, 0.25), (Route::Straight, 0.5), (Route::Right, 0.25)],
        },
        Scenario {
            name: "left-bend",
            routes: vec![(Route::Left, 1.0)],
        },
        Scenario {
            name: "left-or-straight",
            routes: vec![(Route::Left, 0.4), (Route::Straight, 0.6)],
        },
    ]
}

pub fn scenario(index: usize) -> Result<Scenario> {
    scenarios()
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::Argument(format!("unknown scenario {index}")))
}

/// Position spread at horizon `dt`.
pub fn sigma(dt: f64) -> f64 {
    0.15 + 0.1 * dt
}

/// Position after travelling `dt` seconds along `route` from the current position.
pub fn route_position(route: Route, dt: f64) -> [f64; 2] {
    let s = SPEED * dt;
    let to_junction = -START[1];
    if s <= to_junction {
        return [START[0], START[1] + s];
    }
    let rest = s - to_junction;
    let end = route.arm_end();
    let norm = (end[0] * end[0] + end[1] * end[1]).sqrt();
    [end[0] / norm * rest, end[1] / norm * rest]
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

impl Scenario {
    /// Row-major occupancy, row 0 at the bottom; 1 on road cells.
    pub fn occupancy(&self) -> Vec<f64> {
        let cell = 2.0 * EXTENT / GRID_SIDE as f64;
        let mut out = Vec::with_capacity(GRID_SIDE * GRID_SIDE);
        for r in 0..GRID_SIDE {
            for c in 0..GRID_SIDE {
                let p = [-EXTENT + (c as f64 + 0.5) * cell, -EXTENT + (r as f64 + 0.5) * cell];
                let mut d = segment_distance(p, [0.0, -EXTENT], [0.0, 0.0]);
                for (route, _) in &self.routes {
                    d = d.min(segment_distance(p, [0.0, 0.0], route.arm_end()));
                }
                out.push(if d <= ROAD_HALF_WIDTH { 1.0 } else { 0.0 });
            }
        }
        out
    }

    /// Past positions, oldest first, ending at the current position.
    pub fn history(&self) -> Vec<[f64; 2]> {
        (0..HISTORY)
            .map(|i| {
                let back = (HISTORY - 1 - i) as f64 * HISTORY_STEP * SPEED;
                [START[0], START[1] - back]
            })
            .collect()
    }

    pub fn current_position(&self) -> [f64; 2] {
        START
    }

    /// `[occupancy, history, dt]`.
    pub fn condition(&self, dt: f64) -> Vec<f64> {
        let mut c = self.occupancy();
        for p in self.history() {
            c.extend(p);
        }
        c.push(dt);
        c
    }

    /// Mixture components `(weight, mean)` at horizon `dt`.
    pub fn components(&self, dt: f64) -> Vec<(f64, [f64; 2])> {
        self.routes.iter().map(|&(r, w)| (w, route_position(r, dt))).collect()
    }

    /// Analytic `log p(x | scenario, dt)`, optionally with extra isotropic
    /// noise of standard deviation `extra` added to the position.
    pub fn log_density_with_noise(&self, x: &[f64], dt: f64, extra: f64) -> f64 {
        let s2 = sigma(dt).powi(2) + extra * extra;
        let terms: Vec<f64> = self
            .components(dt)
            .iter()
            .map(|(w, m)| {
                let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                w.ln() - 0.5 * d2 / s2 - (2.0 * PI * s2).ln()
            })
            .collect();
        logsumexp(&terms).expect("at least one route")
    }

    pub fn log_density(&self, x: &[f64], dt: f64) -> f64 {
        self.log_density_with_noise(x, dt, 0.0)
    }

    /// A future position at horizon `dt`; `dt = 0` returns the current position.
    pub fn sample_target(&self, dt: f64, rng: &mut impl Rng) -> [f64; 2] {
        if dt == 0.0 {
            return self.current_position();
        }
        let route = self.pick_route(rng);
        self.sample_on_route(route, dt, rng)
    }

    fn pick_route(&self, rng: &mut impl Rng) -> Route {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(r, w) in &self.routes {
            acc += w;
            if u < acc {
                return r;
            }
        }
        self.routes.last().expect("at least one route").0
    }

    fn sample_on_route(&self, route: Route, dt: f64, rng: &mut impl Rng) -> [f64; 2] {
        let m = route_position(route, dt);
        let s = sigma(dt);
        let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        [m[0] + s * a, m[1] + s * b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub scenario: usize,
    pub dt: f64,
    pub target: [f64; 2],
}

/// `n_scenes` scenes with uniformly drawn scenario and horizon.
pub fn gen_toy_pom(n_scenes: usize, seed: u64) -> Vec<ToyScene> {
    let all = scenarios();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_scenes)
        .map(|_| {
            let scenario = rng.random_range(0..all.len());
            let dt = HORIZONS[rng.random_range(0..HORIZONS.len())] as f64;
            let target = all[scenario].sample_target(dt, &mut rng);
            ToyScene { scenario, dt, target }
        })
        .collect()
}

pub fn scenes_to_dataset(scenes: &[ToyScene]) -> Result<Dataset> {
    let all = scenarios();
    let conds: Vec<Vec<Vec<f64>>> = all
        .iter()
        .map(|s| HORIZONS.iter().map(|&h| s.condition(h as f64)).collect())
        .collect();
    let mut x = Vec::with_capacity(2 * scenes.len());
    let mut c = Vec::with_capacity(COND_DIM * scenes.len());
    for s in scenes {
        let h = HORIZONS
            .iter()
            .position(|&h| h as f64 == s.dt)
            .ok_or_else(|| Error::Argument(format!("horizon {} not in 1..=4", s.dt)))?;
        x.extend(s.target);
        c.extend_from_slice(&conds[s.scenario][h]);
    }
    Dataset::new(Matrix::new(scenes.len(), 2, x)?, Matrix::new(scenes.len(), COND_DIM, c)?)
}

/// `n` draws from one (scenario, horizon) pair with its condition attached.
pub fn scenario_samples(index: usize, dt: f64, n: usize, seed: u64) -> Result<Dataset> {
    let s = scenario(index)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    for _ in 0..n {
        x.extend(s.sample_target(dt, &mut rng));
    }
    super::with_condition(Matrix::new(n, 2, x)?, &s.condition(dt))
}

/// Differential entropy of `N(0, eta^2 I)` over `n_dims` scalar dimensions.
pub fn noise_entropy(eta_sigma: f64, n_dims: usize) -> f64 {
    0.5 * n_dims as f64 * (2.0 * PI * E * eta_sigma * eta_sigma).ln()
}

/// Ground-truth episodes: one route per episode, a position at every
/// horizon, each perturbed by `N(0, eta^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scenario: usize,
    /// Perturbed positions at horizons `1..=T`.
    pub positions: Vec<[f64; 2]>,
}

pub fn gen_episodes(n: usize, eta_sigma: f64, seed: u64) -> Vec<Episode> {
    let all = scenarios();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let scenario = rng.random_range(0..all.len());
            let s = &all[scenario];
            let route = s.pick_route(&mut rng);
            let positions = HORIZONS
                .iter()
                .map(|&h| {
                    let p = s.sample_on_route(route, h as f64, &mut rng);
                    let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    [p[0] + eta_sigma * a, p[1] + eta_sigma * b]
                })
                .collect();
            Episode { scenario, positions }
        })
        .collect()
}

/// Extra nats `[H(p', q) - H(eta)] / (T A D)` per episode, averaged.
///
/// `log_q(scenario, dt, points)` returns the model's log density of each
/// point. With `A = 1` agent and `D = 2`.
pub fn extra_nats(
    episodes: &[Episode],
    eta_sigma: f64,
    log_q: impl Fn(usize, f64, &[[f64; 2]]) -> Result<Vec<f64>>,
) -> Result<Estimate> {
    let t = HORIZONS.len();
    let (a, d) = (1usize, 2usize);
    let norm = (t * a * d) as f64;
    let h_eta = noise_entropy(eta_sigma, t * a * d);
    let mut per_episode = vec![0.0; episodes.len()];
    for s in 0..scenarios().len() {
        let idx: Vec<usize> = (0..episodes.len()).filter(|&i| episodes[i].scenario == s).collect();
        if idx.is_empty() {
            continue;
        }
        for (k, &h) in HORIZONS.iter().enumerate() {
            let pts: Vec<[f64; 2]> = idx.iter().map(|&i| episodes[i].positions[k]).collect();
            let lq = log_q(s, h as f64, &pts)?;
            for (&i, v) in idx.iter().zip(lq) {
                per_episode[i] -= v;
            }
        }
    }
    let e: Vec<f64> = per_episode.iter().map(|ce| (ce - h_eta) / norm).collect();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("extra nats".into()));
    }
    Estimate::from_values(&e)
}
