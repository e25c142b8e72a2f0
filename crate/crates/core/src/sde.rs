//! Euler-Maruyama Monte Carlo for the controlled diffusion, killed on leaving
//! the solution domain, as an independent check of the Bellman value.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hjb::{GridSpec, TrackingFunction};
use crate::model::{positive_excess, ControlVector, ScaledSystem};
use crate::queue::{CostEstimate, TrackingMap};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeConfig {
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
}

impl SdeConfig {
    /// `min(0.01, 0.1 / max_i mu_i)`.
    pub fn default_dt(sys: &ScaledSystem) -> f64 {
        let mu_max = (0..sys.class_count()).map(|i| sys.mu(i)).fold(0.0, f64::max);
        0.01f64.min(0.1 / mu_max)
    }

    /// Horizon with `e^{-gamma T} * value_bound <= 0.1 * se_target`.
    pub fn horizon_for(sys: &ScaledSystem, se_target: f64) -> Result<f64> {
        Ok(crate::queue::default_horizon(
            sys.gamma(),
            sys.value_bound()?,
            0.1 * se_target,
        ))
    }

    fn validate(&self, sys: &ScaledSystem, domain: &GridSpec, x0: &[f64]) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(Error::Config(format!(
                "need 0 < dt <= horizon (dt = {}, horizon = {})",
                self.dt, self.horizon
            )));
        }
        if self.paths == 0 {
            return Err(Error::Config("at least one path is required".into()));
        }
        let worst = (0..sys.class_count())
            .map(|k| {
                let b = sys.drift(x0, &ControlVector::vertex(sys.class_count(), k));
                crate::model::norm(&b)
            })
            .fold(0.0, f64::max);
        if worst * self.dt >= 0.1 * domain.domain_radius() {
            return Err(Error::Config(format!(
                "dt = {} moves the start state by {:.3}, over a tenth of the domain radius",
                self.dt,
                worst * self.dt
            )));
        }
        Ok(())
    }
}

/// `x + b(x,u) dt + sigma(x,u) sqrt(dt) xi` with independent noise per class.
pub fn em_step(sys: &ScaledSystem, x: &[f64], u: &ControlVector, dt: f64, xi: &[f64]) -> Result<Vec<f64>> {
    let b = sys.drift(x, u);
    let sigma = sys.diffusion(x, u)?;
    let sq = dt.sqrt();
    Ok((0..x.len())
        .map(|i| x[i] + b[i] * dt + sigma[i] * sq * xi[i])
        .collect())
}

fn one_path<R: Rng + ?Sized>(
    sys: &ScaledSystem,
    domain: &GridSpec,
    control: &dyn TrackingMap,
    x0: &[f64],
    cfg: &SdeConfig,
    rng: &mut R,
) -> Result<f64> {
    let dims = sys.class_count();
    let gamma = sys.gamma();
    let mut x = x0.to_vec();
    let mut next = vec![0.0; dims];
    let mut t = 0.0;
    let mut acc = 0.0;
    let sq = cfg.dt.sqrt();
    while t < cfg.horizon && domain.in_domain(&x) {
        let k = control.eval(&x);
        let s = positive_excess(&x);
        acc += (-gamma * t).exp() * sys.cost(k) * s * cfg.dt;
        for i in 0..dims {
            let ui = if i == k { 1.0 } else { 0.0 };
            let b = sys.drift_component(i, x[i], ui, s);
            let v = sys.variance_component(i, x[i], ui, s);
            if v < 0.0 {
                return Err(Error::Domain(format!(
                    "negative diffusion radicand {v:.6} for class {} at x = {x:?}",
                    i + 1
                )));
            }
            let xi: f64 = rng.sample(StandardNormal);
            next[i] = x[i] + b * cfg.dt + v.sqrt() * sq * xi;
        }
        std::mem::swap(&mut x, &mut next);
        t += cfg.dt;
    }
    Ok(acc)
}

/// Discounted cost of the diffusion under the Markov control `control`,
/// killed on leaving `domain`.
pub fn estimate_with_control(
    sys: &ScaledSystem,
    domain: &GridSpec,
    control: &dyn TrackingMap,
    x0: &[f64],
    cfg: &SdeConfig,
) -> Result<CostEstimate> {
    if x0.len() != sys.class_count() {
        return Err(Error::Domain(format!(
            "start state has {} entries, system has {} classes",
            x0.len(),
            sys.class_count()
        )));
    }
    let bound = sys.value_bound()? * (-sys.gamma() * cfg.horizon).exp();
    if !domain.in_domain(x0) {
        let zeros = vec![0.0; cfg.paths.max(1)];
        return Ok(CostEstimate::from_samples(&zeros, cfg.horizon, bound, cfg.seed));
    }
    cfg.validate(sys, domain, x0)?;
    let samples: Vec<f64> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = seeds::stream(cfg.seed, p as u64);
            one_path(sys, domain, control, x0, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(CostEstimate::from_samples(&samples, cfg.horizon, bound, cfg.seed))
}

/// Value of the tracking control read off a Bellman solution, on that
/// solution's domain.
pub fn estimate_adcp_value(
    sys: &ScaledSystem,
    tf: &TrackingFunction,
    x0: &[f64],
    cfg: &SdeConfig,
) -> Result<CostEstimate> {
    estimate_with_control(sys, &tf.solution.grid, tf, x0, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassParams, Regime, SystemParams};
    use crate::queue::ConstantTracking;

    fn two_class() -> ScaledSystem {
        let p = SystemParams::new(
            vec![
                ClassParams { a: 0.5, mu: 1.0, c: 1.0 },
                ClassParams { a: 0.5, mu: 2.0, c: 3.0 },
            ],
            0.0,
            1.0,
            1.0,
            3,
            Regime::Paper,
        )
        .unwrap();
        ScaledSystem::new(p, 90).unwrap()
    }

    #[test]
    fn euler_step_by_hand() {
        let sys = two_class();
        let u = ControlVector::vertex(2, 0);
        let x = em_step(&sys, &[3.0, -1.0], &u, 0.01, &[1.0, -1.0]).unwrap();
        assert!((x[0] - (3.0 - 0.01 + 11.0 * 0.1)).abs() < 1e-9);
        assert!((x[1] - (-1.0 + 0.02 - 118f64.sqrt() * 0.1)).abs() < 1e-9);
        let det = em_step(&sys, &[3.0, -1.0], &u, 0.01, &[0.0, 0.0]).unwrap();
        assert!((det[0] - 2.99).abs() < 1e-9 && (det[1] + 0.98).abs() < 1e-9);
        let origin = em_step(&sys, &[0.0, 0.0], &u, 0.01, &[0.0, 0.0]).unwrap();
        assert!(origin.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn start_on_boundary_costs_nothing() {
        let sys = two_class();
        let grid = GridSpec::new(2, 10.0, 5, 10.0).unwrap();
        let cfg = SdeConfig {
            dt: 0.01,
            horizon: 5.0,
            paths: 10,
            seed: 1,
        };
        let control = ConstantTracking { classes: 2, target: 0 };
        let est = estimate_with_control(&sys, &grid, &control, &[10.0, 0.0], &cfg).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn invalid_configs() {
        let sys = two_class();
        let grid = GridSpec::new(2, 10.0, 5, 10.0).unwrap();
        let control = ConstantTracking { classes: 2, target: 0 };
        let bad = SdeConfig {
            dt: 2.0,
            horizon: 1.0,
            paths: 10,
            seed: 1,
        };
        assert!(estimate_with_control(&sys, &grid, &control, &[0.0, 0.0], &bad).is_err());
        let coarse = SdeConfig {
            dt: 0.9,
            horizon: 1.0,
            paths: 10,
            seed: 1,
        };
        assert!(estimate_with_control(&sys, &grid, &control, &[5.0, 0.0], &coarse).is_err());
    }
}
