//! System parameters, the square-root staffing scaling, and the drift,
//! diffusion and holding-cost primitives of the approximating diffusion.
//!
//! Classes are indexed from zero throughout the library. Exported files use
//! one-based class labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class primitives: arrival fraction, service rate, holding cost rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassParams {
    pub a: f64,
    pub mu: f64,
    pub c: f64,
}

/// Whether the ball exponent `m` must respect the `m >= 3` requirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Regime {
    #[default]
    Paper,
    /// Allows `1 <= m < 3`. Balls with `m >= 3` are far larger than any
    /// grid that fits in memory, so most desk-scale runs use this.
    NonPaper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    classes: Vec<ClassParams>,
    beta: f64,
    gamma: f64,
    kappa: f64,
    m: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    non_paper_regime: bool,
}

impl RawParams {
    fn regime(&self, requested: Regime) -> Regime {
        if self.non_paper_regime {
            Regime::NonPaper
        } else {
            requested
        }
    }
}

/// Validated system primitives shared by every system size `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct SystemParams {
    classes: Vec<ClassParams>,
    beta: f64,
    gamma: f64,
    kappa: f64,
    m: u32,
}

impl TryFrom<RawParams> for SystemParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        let regime = raw.regime(Regime::Paper);
        SystemParams::new(raw.classes, raw.beta, raw.gamma, raw.kappa, raw.m, regime)
    }
}

impl From<SystemParams> for RawParams {
    fn from(p: SystemParams) -> Self {
        RawParams {
            non_paper_regime: p.is_non_paper_regime(),
            classes: p.classes,
            beta: p.beta,
            gamma: p.gamma,
            kappa: p.kappa,
            m: p.m,
        }
    }
}

impl SystemParams {
    pub fn new(
        classes: Vec<ClassParams>,
        beta: f64,
        gamma: f64,
        kappa: f64,
        m: u32,
        regime: Regime,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        for (i, cl) in classes.iter().enumerate() {
            let ok = |v: f64| v.is_finite() && v > 0.0;
            if !ok(cl.a) || !ok(cl.mu) || !ok(cl.c) {
                return Err(Error::Config(format!(
                    "class {}: a, mu and c must be finite and positive (got a={}, mu={}, c={})",
                    i + 1,
                    cl.a,
                    cl.mu,
                    cl.c
                )));
            }
        }
        let total: f64 = classes.iter().map(|cl| cl.a).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "arrival fractions must sum to 1 (sum is {total:.15})"
            )));
        }
        if !beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive (got {gamma})")));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive (got {kappa})")));
        }
        match (regime, m) {
            (_, 0) => return Err(Error::Config("m must be at least 1".into())),
            (Regime::Paper, 1 | 2) => {
                return Err(Error::Config(format!(
                    "m = {m} is below 3; pass the non-paper regime flag to allow it"
                )))
            }
            _ => {}
        }
        let mut classes = classes;
        for cl in &mut classes {
            cl.a /= total;
        }
        Ok(SystemParams {
            classes,
            beta,
            gamma,
            kappa,
            m,
        })
    }

    /// Parses the JSON config object (`classes`, `beta`, `gamma`, `kappa`, `m`,
    /// optional `non_paper_regime`).
    pub fn from_json(text: &str, regime: Regime) -> Result<Self> {
        let raw: RawParams = serde_json::from_str(text)?;
        let regime = raw.regime(regime);
        SystemParams::new(raw.classes, raw.beta, raw.gamma, raw.kappa, raw.m, regime)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>, regime: Regime) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, regime)
    }

    pub fn classes(&self) -> &[ClassParams] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    /// True when `m < 3`.
    pub fn is_non_paper_regime(&self) -> bool {
        self.m < 3
    }

    pub fn cost_sum(&self) -> f64 {
        self.classes.iter().map(|cl| cl.c).sum()
    }

    /// Copy with every holding cost multiplied by `t`.
    pub fn with_costs_scaled(&self, t: f64) -> Result<Self> {
        let mut out = self.clone();
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Config(format!("cost scale must be positive (got {t})")));
        }
        for cl in &mut out.classes {
            cl.c *= t;
        }
        Ok(out)
    }

    pub fn with_kappa(&self, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive (got {kappa})")));
        }
        let mut out = self.clone();
        out.kappa = kappa;
        Ok(out)
    }

    /// Harmonic-mean service rate `[sum_i a_i / mu_i]^-1`.
    pub fn mu_bar(&self) -> f64 {
        1.0 / self.classes.iter().map(|cl| cl.a / cl.mu).sum::<f64>()
    }
}

/// The `n`-server system obtained from [`SystemParams`] under square-root staffing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledSystem {
    pub params: SystemParams,
    pub n: u32,
    /// Total arrival rate.
    pub lambda_total: f64,
    pub lambda: Vec<f64>,
    /// Nominal load, the number of servers needed at fluid scale.
    pub load: f64,
    /// Relative loads, summing to one.
    pub nu: Vec<f64>,
    /// Drift offsets `lambda_i - mu_i nu_i n`.
    pub l: Vec<f64>,
    pub mu_bar: f64,
}

impl ScaledSystem {
    /// Inverts `n = R + beta sqrt(R)` for the nominal load `R`.
    pub fn new(params: SystemParams, n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("number of servers must be positive".into()));
        }
        let nf = f64::from(n);
        let beta = params.beta;
        let Some(sqrt_load) = sqrt_load(beta, nf) else {
            return Err(Error::Domain(format!(
                "beta = {beta} leaves no positive nominal load for n = {n}"
            )));
        };
        let load = sqrt_load * sqrt_load;
        let mu_bar = params.mu_bar();
        let lambda_total = mu_bar * load;
        let weight: f64 = params.classes.iter().map(|cl| cl.a / cl.mu).sum();
        let lambda: Vec<f64> = params.classes.iter().map(|cl| cl.a * lambda_total).collect();
        let nu: Vec<f64> = params
            .classes
            .iter()
            .map(|cl| (cl.a / cl.mu) / weight)
            .collect();
        let l = params
            .classes
            .iter()
            .zip(&lambda)
            .zip(&nu)
            .map(|((cl, lam), v)| lam - cl.mu * v * nf)
            .collect();
        Ok(ScaledSystem {
            params,
            n,
            lambda_total,
            lambda,
            load,
            nu,
            l,
            mu_bar,
        })
    }

    pub fn class_count(&self) -> usize {
        self.params.class_count()
    }

    pub fn mu(&self, i: usize) -> f64 {
        self.params.classes[i].mu
    }

    pub fn cost(&self, i: usize) -> f64 {
        self.params.classes[i].c
    }

    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }

    /// Fluid-scale head counts `nu_i n`.
    pub fn fluid_point(&self) -> Vec<f64> {
        let nf = f64::from(self.n);
        self.nu.iter().map(|v| v * nf).collect()
    }

    /// Drift of class `i` when the excess `(e.x)^+` has already been formed.
    #[inline]
    pub fn drift_component(&self, i: usize, xi: f64, ui: f64, excess: f64) -> f64 {
        self.l[i] - self.mu(i) * (xi - ui * excess)
    }

    /// Squared diffusion coefficient of class `i`; may be negative outside
    /// the valid region.
    #[inline]
    pub fn variance_component(&self, i: usize, xi: f64, ui: f64, excess: f64) -> f64 {
        let mu = self.mu(i);
        self.lambda[i] + mu * self.nu[i] * f64::from(self.n) + mu * (xi - ui * excess)
    }

    pub fn drift(&self, x: &[f64], u: &ControlVector) -> Vec<f64> {
        let s = positive_excess(x);
        (0..self.class_count())
            .map(|i| self.drift_component(i, x[i], u[i], s))
            .collect()
    }

    pub fn diffusion(&self, x: &[f64], u: &ControlVector) -> Result<Vec<f64>> {
        let s = positive_excess(x);
        (0..self.class_count())
            .map(|i| {
                let v = self.variance_component(i, x[i], u[i], s);
                if v < 0.0 {
                    Err(Error::Domain(format!(
                        "negative diffusion radicand {v:.6} for class {} at x = {x:?}",
                        i + 1
                    )))
                } else {
                    Ok(v.sqrt())
                }
            })
            .collect()
    }

    /// Running cost `sum_i c_i u_i (e.x)^+`.
    pub fn holding_cost(&self, x: &[f64], u: &ControlVector) -> f64 {
        let s = positive_excess(x);
        (0..self.class_count())
            .map(|i| self.cost(i) * u[i])
            .sum::<f64>()
            * s
    }

    /// Radius `kappa sqrt(n) (ln n)^m` of the ball on which the diffusion
    /// control problem is posed.
    pub fn ball(&self) -> Result<BallSpec> {
        if self.n < 3 {
            return Err(Error::Domain(format!(
                "ball radius needs n >= 3 (got n = {})",
                self.n
            )));
        }
        let nf = f64::from(self.n);
        Ok(BallSpec {
            radius: self.params.kappa * nf.sqrt() * nf.ln().powi(self.params.m as i32),
        })
    }

    /// Upper bound `(e.c) radius / gamma` on the diffusion value function.
    pub fn value_bound(&self) -> Result<f64> {
        Ok(self.params.cost_sum() * self.ball()?.radius / self.params.gamma)
    }
}

/// Euclidean ball centred at the origin of the centred coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub radius: f64,
}

impl BallSpec {
    pub fn contains(&self, x: &[f64]) -> bool {
        norm(x) < self.radius
    }
}

/// A point of the simplex `{u >= 0, sum u = 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector(Vec<f64>);

impl ControlVector {
    pub fn new(u: Vec<f64>) -> Result<Self> {
        if u.is_empty() {
            return Err(Error::Domain("empty control vector".into()));
        }
        if u.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain(format!("control has a negative entry: {u:?}")));
        }
        let total: f64 = u.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "control entries must sum to 1 (sum is {total:.15})"
            )));
        }
        Ok(ControlVector(u))
    }

    /// Unit vector selecting class `k`.
    pub fn vertex(dim: usize, k: usize) -> Self {
        assert!(k < dim, "class {k} out of range for dimension {dim}");
        let mut u = vec![0.0; dim];
        u[k] = 1.0;
        ControlVector(u)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for ControlVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[inline]
pub fn positive_excess(x: &[f64]) -> f64 {
    x.iter().sum::<f64>().max(0.0)
}

#[inline]
pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Positive root of `r^2 + beta r = n`.
fn sqrt_load(beta: f64, nf: f64) -> Option<f64> {
    let root = (beta * beta + 4.0 * nf).sqrt();
    // rationalized for beta > 0 to avoid cancellation
    let r = if beta > 0.0 {
        2.0 * nf / (beta + root)
    } else {
        0.5 * (root - beta)
    };
    (r > 0.0 && r.is_finite()).then_some(r)
}

/// Lower bound on the smallest class variance over the ball, from
/// `lambda_i + mu_i nu_i n - 2 mu_i kappa sqrt(n) (ln n)^m`.
fn variance_floor(params: &SystemParams, n: u32) -> Option<f64> {
    let nf = f64::from(n);
    let load = sqrt_load(params.beta, nf)?.powi(2);
    let mu_bar = params.mu_bar();
    let radius = params.kappa * nf.sqrt() * nf.ln().powi(params.m as i32);
    params
        .classes
        .iter()
        .map(|cl| {
            let lambda = cl.a * mu_bar * load;
            let nu = cl.a / cl.mu * mu_bar;
            lambda + cl.mu * nu * nf - 2.0 * cl.mu * radius
        })
        .reduce(f64::min)
}

/// Smallest `n` from which the variance floor stays at or above one.
///
/// The floor is not monotone: `(ln n)^m` vanishes at `n = 1` and outgrows
/// `sqrt(n)` until `n = e^{2m}`. Up to that turning point every `n` is
/// checked. Past it the floor relative to `sqrt(n) (ln n)^m` increases, so the
/// remaining failures form an interval whose end is found by bisection and
/// then spot-checked on `[n, 4n + 64]`.
pub fn min_n_for_ball(params: &SystemParams) -> u32 {
    let holds = |n: u32| variance_floor(params, n).is_some_and(|v| v >= 1.0);
    let turn = (2.0 * f64::from(params.m)).exp().ceil().min(f64::from(u32::MAX / 8)) as u32;
    let mut last_bad = (1..=turn).filter(|&n| !holds(n)).max().unwrap_or(0);
    let mut from = turn;
    loop {
        if !holds(from.saturating_add(1)) {
            let (mut bad, mut good) = (from.saturating_add(1), None);
            let mut step = 1u32;
            while good.is_none() {
                let probe = bad.saturating_add(step);
                if holds(probe) {
                    good = Some(probe);
                } else if probe == u32::MAX {
                    return u32::MAX;
                } else {
                    bad = probe;
                    step = step.saturating_mul(2);
                }
            }
            let mut good = good.unwrap_or(u32::MAX);
            while good - bad > 1 {
                let mid = bad + (good - bad) / 2;
                if holds(mid) {
                    good = mid;
                } else {
                    bad = mid;
                }
            }
            last_bad = last_bad.max(bad);
        }
        let start = last_bad.max(turn).saturating_add(1);
        let end = start.saturating_mul(4).saturating_add(64);
        let ratio = (f64::from(end) / f64::from(start)).powf(1.0 / 256.0);
        let mut probe = f64::from(start);
        let mut failed = None;
        while probe <= f64::from(end) {
            let k = probe as u32;
            if !holds(k) {
                failed = Some(k);
                break;
            }
            probe = (probe * ratio).max(probe + 1.0);
        }
        match failed {
            None => return last_bad.saturating_add(1),
            Some(k) => {
                last_bad = k;
                from = k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class() -> ScaledSystem {
        let params = SystemParams::new(
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
        ScaledSystem::new(params, 90).unwrap()
    }

    fn single(beta: f64, kappa: f64, m: u32) -> SystemParams {
        SystemParams::new(
            vec![ClassParams { a: 1.0, mu: 1.0, c: 1.0 }],
            beta,
            1.0,
            kappa,
            m,
            Regime::NonPaper,
        )
        .unwrap()
    }

    #[test]
    fn two_class_scaling() {
        let sys = two_class();
        assert!((sys.mu_bar - 4.0 / 3.0).abs() < 1e-12);
        assert!((sys.load - 90.0).abs() < 1e-9);
        assert!((sys.lambda_total - 120.0).abs() < 1e-9);
        assert!((sys.lambda[0] - 60.0).abs() < 1e-9 && (sys.lambda[1] - 60.0).abs() < 1e-9);
        assert!((sys.nu[0] - 2.0 / 3.0).abs() < 1e-12 && (sys.nu[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(sys.l.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn single_class_positive_beta() {
        let sys = ScaledSystem::new(single(1.0, 1.0, 3), 100).unwrap();
        let root = (-1.0 + 401f64.sqrt()) / 2.0;
        assert!((sys.load.sqrt() - root).abs() < 1e-12);
        assert!((sys.lambda_total - 90.4875).abs() < 1e-4);
        assert!((sys.l[0] + root).abs() < 1e-9);
        assert!((sys.load + sys.load.sqrt() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn balanced_single_server() {
        let sys = ScaledSystem::new(single(0.0, 1.0, 3), 1).unwrap();
        assert!((sys.lambda_total - 1.0).abs() < 1e-15);
        assert_eq!(sys.nu, vec![1.0]);
        assert_eq!(sys.l, vec![0.0]);
    }

    #[test]
    fn degenerate_load_is_rejected() {
        // the load underflows to zero or overflows for |beta| this large
        let params = single(1e200, 1.0, 3);
        assert!(matches!(ScaledSystem::new(params, 1), Err(Error::Domain(_))));
        let params = single(-1e200, 1.0, 3);
        assert!(matches!(ScaledSystem::new(params, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn drift_and_diffusion_by_hand() {
        let sys = two_class();
        let u = ControlVector::vertex(2, 0);
        let x = [3.0, -1.0];
        let b = sys.drift(&x, &u);
        assert!((b[0] + 1.0).abs() < 1e-9 && (b[1] - 2.0).abs() < 1e-9);
        let s = sys.diffusion(&x, &u).unwrap();
        assert!((s[0] - 11.0).abs() < 1e-9);
        assert!((s[1] - 118f64.sqrt()).abs() < 1e-9);
        let origin = sys.drift(&[0.0, 0.0], &ControlVector::new(vec![0.3, 0.7]).unwrap());
        assert_eq!(origin, sys.l);
        let s0 = sys.diffusion(&[0.0, 0.0], &u).unwrap();
        assert!((s0[0].powi(2) - (60.0 + 60.0)).abs() < 1e-9);
    }

    #[test]
    fn negative_radicand_is_domain_error() {
        let sys = two_class();
        // variance of class 1 at x1 = -(120 + 0.5) is -0.5
        let x = [-120.5, 0.0];
        let err = sys.diffusion(&x, &ControlVector::vertex(2, 0)).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn holding_cost_by_hand() {
        let sys = two_class();
        let u = ControlVector::new(vec![0.25, 0.75]).unwrap();
        assert!((sys.holding_cost(&[3.0, 1.0], &u) - 10.0).abs() < 1e-12);
        assert_eq!(sys.holding_cost(&[-3.0, 1.0], &u), 0.0);
        assert_eq!(sys.holding_cost(&[2.0, 0.0], &ControlVector::vertex(2, 1)), 6.0);
    }

    #[test]
    fn ball_radius() {
        let sys = ScaledSystem::new(single(0.0, 1.0, 3), 7).unwrap();
        let r = sys.ball().unwrap().radius;
        assert!((r - 7f64.sqrt() * 7f64.ln().powi(3)).abs() < 1e-12);
        let doubled = ScaledSystem::new(single(0.0, 2.0, 3), 7).unwrap();
        assert!((doubled.ball().unwrap().radius - 2.0 * r).abs() < 1e-12);
        let mut prev = 0.0;
        for n in 3..200 {
            let r = ScaledSystem::new(single(0.0, 1.0, 3), n).unwrap().ball().unwrap().radius;
            assert!(r > prev);
            prev = r;
        }
        let small = ScaledSystem::new(single(0.0, 1.0, 3), 2).unwrap();
        assert!(small.ball().is_err());
    }

    #[test]
    fn min_n_matches_linear_scan() {
        let params = single(0.0, 0.1, 3);
        // independent scan: first n with the floor >= 1 that keeps it up to 10^5
        let floor = |n: u32| {
            let nf = f64::from(n);
            // beta = 0, mu = 1: lambda = n, nu n = n
            2.0 * nf - 2.0 * 0.1 * nf.sqrt() * nf.ln().powi(3)
        };
        let last_bad = (1..100_000u32).filter(|&n| floor(n) < 1.0).max().unwrap_or(0);
        assert_eq!(min_n_for_ball(&params), last_bad + 1);
    }

    #[test]
    fn min_n_bisection_agrees_with_full_scan() {
        for (beta, kappa, m) in [(0.5, 0.5, 2), (-1.0, 0.3, 3), (2.0, 1.0, 1)] {
            let params = single(beta, kappa, m);
            let last_bad = (1..2_000_000u32)
                .filter(|&n| variance_floor(&params, n).is_none_or(|v| v < 1.0))
                .max()
                .unwrap_or(0);
            assert_eq!(min_n_for_ball(&params), last_bad + 1, "{beta} {kappa} {m}");
        }
    }

    #[test]
    fn min_n_nondecreasing_in_kappa() {
        for kappa in [0.05, 0.1, 0.3, 1.0] {
            let a = min_n_for_ball(&single(0.5, kappa, 3));
            let b = min_n_for_ball(&single(0.5, 2.0 * kappa, 3));
            assert!(b >= a, "kappa {kappa}: {a} vs {b}");
        }
    }

    #[test]
    fn config_parsing() {
        let text = r#"{"classes":[{"a":0.5,"mu":1,"c":1},{"a":0.5,"mu":2,"c":3}],
            "beta":1,"gamma":1,"kappa":0.25,"m":3}"#;
        let p: SystemParams = serde_json::from_str(text).unwrap();
        assert_eq!(p.class_count(), 2);
        let extra = r#"{"classes":[{"a":1,"mu":1,"c":1}],"beta":0,"gamma":1,"kappa":1,"m":3,"x":1}"#;
        assert!(SystemParams::from_json(extra, Regime::Paper).is_err());
        let small_m = r#"{"classes":[{"a":1,"mu":1,"c":1}],"beta":0,"gamma":1,"kappa":1,"m":1}"#;
        assert!(SystemParams::from_json(small_m, Regime::Paper).is_err());
        assert!(SystemParams::from_json(small_m, Regime::NonPaper).unwrap().is_non_paper_regime());
        let bad_sum = r#"{"classes":[{"a":0.5,"mu":1,"c":1}],"beta":0,"gamma":1,"kappa":1,"m":3}"#;
        assert!(SystemParams::from_json(bad_sum, Regime::Paper).is_err());
    }

    #[test]
    fn control_vector_validation() {
        assert!(ControlVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ControlVector::new(vec![0.5, 0.6]).is_err());
        assert!(ControlVector::new(vec![-0.1, 1.1]).is_err());
    }
}
