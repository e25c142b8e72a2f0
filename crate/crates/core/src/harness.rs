//! Experiment plans, the per-`n` pipeline and report emission.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hjb::{solve_with, GridSpec, HjbSolution, SolverOptions, TrackingFunction};
use crate::model::{min_n_for_ball, Regime, ScaledSystem, SystemParams};
use crate::oracle::{self, GapResult};
use crate::queue::{
    default_horizon, estimate_cost, initial_state, simulate_trajectory, CostEstimate, InitMode, PolicySpec,
    QueueState, TrackingMap, Trajectory,
};
use crate::sde::{estimate_adcp_value, SdeConfig};
use crate::seeds;

pub const CSV_HEADER: &str = "n,tracking_cost,tracking_se,lower_bound,gap,gap_over_sqrt_n,\
gap_over_polylog,max_grad,max_hess,psi_disc,wall_time_s";

/// Columns that can be plotted against `ln n`.
pub const PLOT_QUANTITIES: [&str; 10] = [
    "tracking_cost",
    "tracking_se",
    "lower_bound",
    "gap",
    "gap_over_sqrt_n",
    "gap_over_polylog",
    "max_grad",
    "max_hess",
    "psi_disc",
    "wall_time_s",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSource {
    /// Path to a parameter file, relative to the plan file.
    Path(PathBuf),
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    #[default]
    Fluid,
    Offset(Vec<f64>),
}

fn d_grid_points() -> usize {
    101
}
fn d_replications() -> usize {
    1000
}
fn d_sde_paths() -> usize {
    1000
}
fn d_psi_paths() -> usize {
    20
}
fn d_init_radius() -> f64 {
    10.0
}
fn d_cap_margin() -> u32 {
    20
}
fn d_state_limit() -> u64 {
    5_000_000
}
fn d_sim_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub system: SystemSource,
    /// Accept `m < 3` in the cost-ball exponent.
    #[serde(default)]
    pub non_paper_regime: bool,
    #[serde(default)]
    pub n_list: Vec<u32>,
    /// Grid points per axis of the Bellman solver.
    #[serde(default = "d_grid_points")]
    pub grid_points: usize,
    /// Queue simulation replications per `n`.
    #[serde(default = "d_replications")]
    pub replications: usize,
    /// Simulation horizon; by default the discount tail falls below `sim_tail`.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default = "d_sim_tol")]
    pub sim_tail: f64,
    #[serde(default = "d_sde_paths")]
    pub sde_paths: usize,
    #[serde(default)]
    pub sde_dt: Option<f64>,
    /// Trajectories averaged for the tracking discrepancy.
    #[serde(default = "d_psi_paths")]
    pub psi_paths: usize,
    #[serde(default)]
    pub init: InitSpec,
    /// Largest allowed distance of the initial state from the fluid point, in
    /// units of `sqrt(n)`.
    #[serde(default = "d_init_radius")]
    pub init_radius: f64,
    /// Truncation cap of the exact oracle above `max(n, e.X(0))`.
    #[serde(default = "d_cap_margin")]
    pub cap_margin: u32,
    /// Largest truncated chain solved exactly.
    #[serde(default = "d_state_limit")]
    pub exact_state_limit: u64,
    /// Record elapsed time; off by default so reports are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
    #[serde(skip)]
    pub config_hash: String,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl ExperimentPlan {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut plan: ExperimentPlan =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment plan: {e}")))?;
        plan.base_dir = base_dir.into();
        let system_bytes = match &plan.system {
            SystemSource::Path(p) => {
                let path = plan.base_dir.join(p);
                std::fs::read(&path).map_err(|e| Error::io(path, e))?
            }
            SystemSource::Inline(_) => Vec::new(),
        };
        plan.config_hash = sha256_hex(&[text.as_bytes(), &system_bytes]);
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, dir)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "n_list must be strictly ascending, got {:?}",
                self.n_list
            )));
        }
        if self.n_list.first() == Some(&0) {
            return Err(Error::Config("n_list entries must be positive".into()));
        }
        if self.grid_points < 3 || self.grid_points % 2 == 0 {
            return Err(Error::Config(format!(
                "grid_points must be odd and at least 3 (got {})",
                self.grid_points
            )));
        }
        for (name, v) in [
            ("replications", self.replications),
            ("sde_paths", self.sde_paths),
            ("psi_paths", self.psi_paths),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.replications < 2 {
            return Err(Error::Config("replications must be at least 2".into()));
        }
        for (name, v) in [
            ("horizon", self.horizon),
            ("sde_dt", self.sde_dt),
            ("sim_tail", Some(self.sim_tail)),
            ("init_radius", Some(self.init_radius)),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive (got {v})")));
                }
            }
        }
        self.params().map(|_| ())
    }

    pub fn params(&self) -> Result<SystemParams> {
        let regime = if self.non_paper_regime {
            Regime::NonPaper
        } else {
            Regime::Paper
        };
        match &self.system {
            SystemSource::Path(p) => SystemParams::from_file(self.base_dir.join(p), regime),
            SystemSource::Inline(v) => SystemParams::from_json(&v.to_string(), regime),
        }
    }

    pub fn init_mode(&self) -> InitMode {
        match &self.init {
            InitSpec::Fluid => InitMode::Fluid,
            InitSpec::Offset(v) => InitMode::Offset(v.clone()),
        }
    }

    pub fn sim_horizon(&self, sys: &ScaledSystem) -> f64 {
        self.horizon
            .unwrap_or_else(|| default_horizon(sys.gamma(), 1.0, self.sim_tail))
    }
}

/// Per-`n` seeds, one per randomized module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RowSeeds {
    pub queue: u64,
    pub sde: u64,
    pub psi: u64,
}

impl RowSeeds {
    pub fn new(master: u64, n: u32) -> Self {
        RowSeeds {
            queue: seeds::derive(master, n, "queue"),
            sde: seeds::derive(master, n, "sde"),
            psi: seeds::derive(master, n, "psi"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SdeCheck {
    pub phi_x0: f64,
    pub estimate: CostEstimate,
    pub agrees: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReportRow {
    pub n: u32,
    /// Monte Carlo cost of the tracking policy from the initial state.
    pub tracking_cost: f64,
    pub tracking_se: f64,
    pub tracking_exact: Option<f64>,
    pub lower_bound: f64,
    pub lower_bound_exact: bool,
    /// Exact tracking value minus exact optimum when both exist, else the
    /// Monte Carlo cost minus the approximate bound.
    pub gap: f64,
    pub gap_over_sqrt_n: f64,
    pub gap_over_polylog: f64,
    pub max_grad: f64,
    pub max_hess: f64,
    pub psi_disc: f64,
    pub wall_time_s: f64,
    pub hjb_residual: f64,
    pub hjb_iterations: usize,
    pub sde: Option<SdeCheck>,
    pub seeds: RowSeeds,
    pub flags: Vec<String>,
}

impl GapReportRow {
    pub fn csv_values(&self) -> [f64; 11] {
        [
            f64::from(self.n),
            self.tracking_cost,
            self.tracking_se,
            self.lower_bound,
            self.gap,
            self.gap_over_sqrt_n,
            self.gap_over_polylog,
            self.max_grad,
            self.max_hess,
            self.psi_disc,
            self.wall_time_s,
        ]
    }

    pub fn quantity(&self, name: &str) -> Option<f64> {
        PLOT_QUANTITIES
            .iter()
            .position(|q| *q == name)
            .map(|i| self.csv_values()[i + 1])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RowFailure {
    pub n: u32,
    pub reason: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub polylog_normalizer: String,
    pub wall_time_recorded: bool,
}

impl Provenance {
    pub fn new(plan: &ExperimentPlan, seed: u64) -> Self {
        let m = plan.params().map(|p| p.m()).unwrap_or(0);
        Provenance {
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: plan.config_hash.clone(),
            seed,
            polylog_normalizer: format!("(ln n)^{}", m + 3),
            wall_time_recorded: plan.record_wall_time,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub provenance: Provenance,
    pub rows: Vec<GapReportRow>,
    pub failures: Vec<RowFailure>,
}

/// `int_0^tau e^{-gamma s} |psi(X, U) - psi(X, h(X))| ds` along a
/// piecewise-constant queue path, where the difference reduces to
/// `sum_i (h_i s - Q_i) (c_i + mu_i phi_i - mu_i phi_ii / 2)` with `s` the
/// total queue. Derivatives come from the nearest grid point; `tau` is the
/// first time the centred state leaves the solution domain.
pub fn evaluate_psi_discrepancy(
    sys: &ScaledSystem,
    solution: &HjbSolution,
    trajectory: &Trajectory,
    tf: &dyn TrackingMap,
) -> f64 {
    let gamma = sys.gamma();
    let grid = &solution.grid;
    let mut total = 0.0;
    for (j, state) in trajectory.points.iter().enumerate() {
        let start = state.t;
        let end = trajectory
            .points
            .get(j + 1)
            .map_or(trajectory.horizon, |p| p.t)
            .min(trajectory.horizon);
        if start >= end {
            continue;
        }
        let x = &state.x_check;
        if !grid.in_domain(x) {
            break;
        }
        let Some(st) = solution.stencil_at(grid.nearest(x)) else {
            break;
        };
        let s = state.queued() as f64;
        if s == 0.0 {
            continue;
        }
        let k = tf.eval(x);
        let diff: f64 = (0..sys.class_count())
            .map(|i| {
                let h = if i == k { s } else { 0.0 };
                let m = sys.cost(i) + sys.mu(i) * st.central(i) - 0.5 * sys.mu(i) * st.second[i];
                (h - f64::from(state.q[i])) * m
            })
            .sum();
        let weight = ((-gamma * start).exp() - (-gamma * end).exp()) / gamma;
        total += weight * diff.abs();
    }
    total
}

/// Mean discrepancy over independent trajectories of the tracking policy.
pub fn mean_psi_discrepancy(
    sys: &ScaledSystem,
    tf: &Arc<TrackingFunction>,
    init: &QueueState,
    horizon: f64,
    paths: usize,
    seed: u64,
) -> f64 {
    use rayon::prelude::*;
    let policy = PolicySpec::Tracking(tf.clone());
    let values: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = seeds::stream(seed, p as u64);
            let traj = simulate_trajectory(sys, &policy, init, horizon, &mut rng);
            evaluate_psi_discrepancy(sys, &tf.solution, &traj, tf.as_ref())
        })
        .collect();
    values.iter().sum::<f64>() / paths as f64
}

/// Upper estimate of the number of `(X, Q)` states below `cap`.
pub fn chain_size_estimate(classes: usize, n: u32, cap: u32) -> u64 {
    let mut heads: u64 = 1;
    for k in 1..=classes as u64 {
        heads = heads.saturating_mul(u64::from(cap) + k) / k;
    }
    heads.saturating_mul(u64::from(cap.saturating_sub(n)) + 1)
}

pub fn solve_for(plan: &ExperimentPlan, sys: &ScaledSystem) -> Result<HjbSolution> {
    let grid = GridSpec::for_system(sys, plan.grid_points)?;
    solve_with(sys, &grid, &SolverOptions::default())
}

pub fn sde_config(plan: &ExperimentPlan, sys: &ScaledSystem, seed: u64) -> Result<SdeConfig> {
    let bound = sys.value_bound()?;
    Ok(SdeConfig {
        dt: plan.sde_dt.unwrap_or_else(|| SdeConfig::default_dt(sys)),
        horizon: SdeConfig::horizon_for(sys, plan.sim_tail * 10.0 * bound)?,
        paths: plan.sde_paths,
        seed,
    })
}

/// Bellman value at the start state against its Monte Carlo estimate, within
/// three standard errors plus two percent.
pub fn sde_check(plan: &ExperimentPlan, solution: &HjbSolution, x0: &[f64], seed: u64) -> Result<SdeCheck> {
    let sys = &solution.system;
    let cfg = sde_config(plan, sys, seed)?;
    let tf = TrackingFunction::new(solution.clone());
    let estimate = estimate_adcp_value(sys, &tf, x0, &cfg)?;
    let phi_x0 = solution.value_at(x0);
    let agrees = (phi_x0 - estimate.mean).abs() <= 3.0 * estimate.std_error + 0.02 * phi_x0.abs();
    Ok(SdeCheck {
        phi_x0,
        estimate,
        agrees,
    })
}

/// Exact tracking value and preemptive optimum at `init`.
pub fn exact_gap(sys: &ScaledSystem, tf: Arc<dyn TrackingMap>, init: &QueueState, cap: u32) -> Result<GapResult> {
    let tracking = oracle::policy_value_exact(sys, &PolicySpec::Tracking(tf), cap)?;
    let optimal = oracle::optimal_value_exact(sys, cap)?;
    oracle::gap_from(&tracking, &optimal, init)
}

pub fn oracle_cap(plan: &ExperimentPlan, sys: &ScaledSystem, init: &QueueState) -> u32 {
    let start = u32::try_from(init.total()).unwrap_or(u32::MAX);
    start.max(sys.n).saturating_add(plan.cap_margin)
}

fn run_row(plan: &ExperimentPlan, params: &SystemParams, n: u32, seed: u64) -> Result<GapReportRow> {
    let clock = Instant::now();
    let seeds = RowSeeds::new(seed, n);
    let mut flags = Vec::new();
    let sys = ScaledSystem::new(params.clone(), n)?;
    if n < min_n_for_ball(params) {
        flags.push("below_min_n".to_string());
    }
    let solution = solve_for(plan, &sys)?;
    let tf = Arc::new(TrackingFunction::new(solution.clone()));
    let policy = PolicySpec::Tracking(tf.clone());
    let init = initial_state(&sys, plan.init_radius, &plan.init_mode())?;
    let horizon = plan.sim_horizon(&sys);
    let mc = estimate_cost(&sys, &policy, &init, horizon, plan.replications, seeds.queue)?;

    let cap = oracle_cap(plan, &sys, &init);
    let (tracking_exact, lower_bound, lower_bound_exact, gap) =
        if chain_size_estimate(sys.class_count(), n, cap) <= plan.exact_state_limit {
            let g = exact_gap(&sys, tf.clone(), &init, cap)?;
            if (mc.mean - g.tracking).abs() > 3.0 * mc.std_error + mc.truncation_bound {
                flags.push("mc_exact_mismatch".to_string());
            }
            (Some(g.tracking), g.optimal, true, g.gap)
        } else {
            flags.push("approximate_lower_bound".to_string());
            let lb = solution.value_at(&init.x_check);
            let gap = mc.mean - lb;
            if gap < -3.0 * mc.std_error {
                flags.push("negative_gap".to_string());
            }
            (None, lb, false, gap)
        };

    let sde = sde_check(plan, &solution, &init.x_check, seeds.sde)?;
    if !sde.agrees {
        flags.push("sde_mismatch".to_string());
    }
    let psi_disc = mean_psi_discrepancy(&sys, &tf, &init, horizon, plan.psi_paths, seeds.psi);

    let nf = f64::from(n);
    let polylog = nf.ln().powi(params.m() as i32 + 3);
    let wall = if plan.record_wall_time {
        clock.elapsed().as_secs_f64()
    } else {
        0.0
    };
    Ok(GapReportRow {
        n,
        tracking_cost: mc.mean,
        tracking_se: mc.std_error,
        tracking_exact,
        lower_bound,
        lower_bound_exact,
        gap,
        gap_over_sqrt_n: gap / nf.sqrt(),
        gap_over_polylog: gap / polylog,
        max_grad: solution.gradients.max_grad,
        max_hess: solution.gradients.max_hess,
        psi_disc,
        wall_time_s: wall,
        hjb_residual: solution.residual_sup,
        hjb_iterations: solution.iterations,
        sde: Some(sde),
        seeds,
        flags,
    })
}

/// One report row per `n`; a failing `n` is recorded and skipped.
pub fn run_pipeline(plan: &ExperimentPlan, seed: u64) -> Result<GapReport> {
    let params = plan.params()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &n in &plan.n_list {
        match run_row(plan, &params, n, seed) {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(RowFailure {
                n,
                reason: e.to_string(),
                exit_code: e.exit_code(),
            }),
        }
    }
    Ok(GapReport {
        provenance: Provenance::new(plan, seed),
        rows,
        failures,
    })
}

pub fn write_csv<W: Write>(rows: &[GapReportRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for row in rows {
        let v = row.csv_values();
        let mut line = row.n.to_string();
        for x in &v[1..] {
            let _ = write!(line, ",{x:.16e}");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn emit_csv(rows: &[GapReportRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).map_err(|e| Error::io(path, e))?;
    crate::io::write_atomic(path, &buf)
}

/// Parses a report CSV back into numeric columns.
pub fn parse_csv(text: &str) -> Result<Vec<[f64; 11]>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config("report CSV header does not match".into()));
    }
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 11 {
                return Err(Error::Config(format!("malformed report line: {line}")));
            }
            let mut out = [0.0; 11];
            for (o, f) in out.iter_mut().zip(fields) {
                *o = f
                    .parse()
                    .map_err(|_| Error::Config(format!("bad number {f:?} in report")))?;
            }
            Ok(out)
        })
        .collect()
}

/// `(ln n, quantity)` pairs for a line chart.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub quantity: String,
    pub points: Vec<(f64, f64)>,
}

pub fn plot_data(rows: &[GapReportRow], quantity: &str) -> Result<PlotData> {
    if !PLOT_QUANTITIES.contains(&quantity) {
        return Err(Error::Config(format!(
            "unknown quantity {quantity:?}; valid names: {}",
            PLOT_QUANTITIES.join(", ")
        )));
    }
    if rows.len() < 2 {
        return Err(Error::Config(format!(
            "a plot needs at least two rows, got {}",
            rows.len()
        )));
    }
    let points = rows
        .iter()
        .map(|r| (f64::from(r.n).ln(), r.quantity(quantity).unwrap_or(f64::NAN)))
        .collect();
    Ok(PlotData {
        quantity: quantity.to_string(),
        points,
    })
}

impl PlotData {
    /// Two whitespace-separated columns with a comment header.
    pub fn to_dat(&self) -> String {
        let mut s = format!("# ln_n {}\n", self.quantity);
        for (x, y) in &self.points {
            let _ = writeln!(s, "{x:.16e} {y:.16e}");
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let finite: Vec<(f64, f64)> = self
            .points
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        let span = |f: fn(&(f64, f64)) -> f64| {
            let lo = finite.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 1.0, lo + 1.0)
            }
        };
        let (x0, x1) = span(|p| p.0);
        let (y0, y1) = span(|p| p.1);
        let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let path: Vec<String> = finite
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(
            s,
            r#"<path d="M{pad},{pad} V{} H{}" fill="none" stroke="black"/>"#,
            h - pad,
            w - pad
        );
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (cx, cy) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="steelblue"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">ln n</text>"#,
            w / 2.0,
            h - 8.0
        );
        let _ = writeln!(
            s,
            r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
            h / 2.0,
            h / 2.0,
            self.quantity
        );
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="{}" font-size="10">{y1:.4e}</text>"#,
            pad - 6.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="{}" font-size="10">{y0:.4e}</text>"#,
            h - pad + 14.0
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        crate::io::write_atomic(&dir.join(format!("{}.dat", self.quantity)), self.to_dat().as_bytes())?;
        crate::io::write_atomic(&dir.join(format!("{}.svg", self.quantity)), self.to_svg().as_bytes())
    }
}

/// Writes `gap_report.csv`, `gap_report.json` and, with two or more rows,
/// plots of the scaled gap and the discrepancy.
pub fn write_report(report: &GapReport, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    emit_csv(&report.rows, out.join("gap_report.csv"))?;
    crate::io::write_atomic(
        &out.join("gap_report.json"),
        serde_json::to_string_pretty(report)?.as_bytes(),
    )?;
    if report.rows.len() >= 2 {
        for q in ["gap_over_sqrt_n", "gap_over_polylog", "psi_disc", "max_grad"] {
            plot_data(&report.rows, q)?.save(out)?;
        }
    }
    Ok(())
}

/// Writes a JSON document atomically.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), serde_json::to_string_pretty(value)?.as_bytes())
}

/// Subcommands of the command line front end. Each works through the plan's
/// `n_list` and writes its artifacts under `out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SolveHjb,
    Simulate,
    SdeCheck,
    Oracle,
    GapStudy,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'static str,
    provenance: Provenance,
    results: &'a [T],
}

fn manifest<T: Serialize>(out: &Path, command: &'static str, plan: &ExperimentPlan, seed: u64, results: &[T]) -> Result<()> {
    write_json(
        out.join(format!("{command}.json")),
        &Manifest {
            command,
            provenance: Provenance::new(plan, seed),
            results,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
struct SolveSummary {
    n: u32,
    radius: f64,
    residual_sup: f64,
    tol: f64,
    iterations: usize,
    phi_origin: f64,
    max_grad: f64,
    max_hess: f64,
    below_min_n: bool,
}

#[derive(Debug, Clone, Serialize)]
struct SimulateSummary {
    n: u32,
    seed: u64,
    estimate: CostEstimate,
    trajectory_events: usize,
}

#[derive(Debug, Clone, Serialize)]
struct SdeSummary {
    n: u32,
    x0: Vec<f64>,
    check: SdeCheck,
}

#[derive(Debug, Clone, Serialize)]
struct OracleSummary {
    n: u32,
    cap: u32,
    x0: Vec<u32>,
    q0: Vec<u32>,
    gap: GapResult,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SolveHjb => "solve-hjb",
            Command::Simulate => "simulate",
            Command::SdeCheck => "sde-check",
            Command::Oracle => "oracle",
            Command::GapStudy => "gap-study",
        }
    }

    /// Runs the command; returns one human-readable line per `n`.
    pub fn run(self, plan: &ExperimentPlan, seed: u64, out: &Path) -> Result<Vec<String>> {
        let params = plan.params()?;
        let mut lines = Vec::new();
        match self {
            Command::GapStudy => {
                let report = run_pipeline(plan, seed)?;
                write_report(&report, out)?;
                for r in &report.rows {
                    lines.push(format!(
                        "n={} gap={:.6e} gap/sqrt(n)={:.6e} flags={:?}",
                        r.n, r.gap, r.gap_over_sqrt_n, r.flags
                    ));
                }
                for f in &report.failures {
                    lines.push(format!("n={} failed: {}", f.n, f.reason));
                }
                if report.rows.is_empty() {
                    if let Some(f) = report.failures.first() {
                        let reason = format!("every n failed; n={}: {}", f.n, f.reason);
                        return Err(if f.exit_code == 2 {
                            Error::Config(reason)
                        } else {
                            Error::Domain(reason)
                        });
                    }
                }
            }
            Command::SolveHjb => {
                let mut results = Vec::new();
                for &n in &plan.n_list {
                    let sys = ScaledSystem::new(params.clone(), n)?;
                    let sol = solve_for(plan, &sys)?;
                    sol.save(out.join(format!("hjb_n{n}.json")))?;
                    let origin = vec![0.0; sys.class_count()];
                    let s = SolveSummary {
                        n,
                        radius: sol.grid.ball_radius,
                        residual_sup: sol.residual_sup,
                        tol: sol.tol,
                        iterations: sol.iterations,
                        phi_origin: sol.value_at(&origin),
                        max_grad: sol.gradients.max_grad,
                        max_hess: sol.gradients.max_hess,
                        below_min_n: n < min_n_for_ball(&params),
                    };
                    lines.push(format!(
                        "n={n} residual={:.3e} iterations={} phi(0)={:.6e}",
                        s.residual_sup, s.iterations, s.phi_origin
                    ));
                    results.push(s);
                }
                manifest(out, self.name(), plan, seed, &results)?;
            }
            Command::Simulate => {
                let mut results = Vec::new();
                for &n in &plan.n_list {
                    let sys = ScaledSystem::new(params.clone(), n)?;
                    let tf = TrackingFunction::new(solve_for(plan, &sys)?);
                    let policy = PolicySpec::tracking(tf);
                    let init = initial_state(&sys, plan.init_radius, &plan.init_mode())?;
                    let horizon = plan.sim_horizon(&sys);
                    let row_seed = RowSeeds::new(seed, n).queue;
                    let estimate = estimate_cost(&sys, &policy, &init, horizon, plan.replications, row_seed)?;
                    let mut rng = seeds::stream(row_seed, u64::MAX);
                    let traj = simulate_trajectory(&sys, &policy, &init, horizon, &mut rng);
                    traj.save_csv(out.join(format!("trajectory_n{n}.csv")))?;
                    lines.push(format!(
                        "n={n} cost={:.6e} se={:.3e} ({} replications)",
                        estimate.mean, estimate.std_error, estimate.replications
                    ));
                    results.push(SimulateSummary {
                        n,
                        seed: row_seed,
                        estimate,
                        trajectory_events: traj.events.len(),
                    });
                }
                manifest(out, self.name(), plan, seed, &results)?;
            }
            Command::SdeCheck => {
                let mut results = Vec::new();
                for &n in &plan.n_list {
                    let sys = ScaledSystem::new(params.clone(), n)?;
                    let sol = solve_for(plan, &sys)?;
                    let init = initial_state(&sys, plan.init_radius, &plan.init_mode())?;
                    let check = sde_check(plan, &sol, &init.x_check, RowSeeds::new(seed, n).sde)?;
                    lines.push(format!(
                        "n={n} phi={:.6e} monte_carlo={:.6e} se={:.3e} agrees={}",
                        check.phi_x0, check.estimate.mean, check.estimate.std_error, check.agrees
                    ));
                    results.push(SdeSummary {
                        n,
                        x0: init.x_check.clone(),
                        check,
                    });
                }
                manifest(out, self.name(), plan, seed, &results)?;
            }
            Command::Oracle => {
                let mut results = Vec::new();
                for &n in &plan.n_list {
                    let sys = ScaledSystem::new(params.clone(), n)?;
                    let tf: Arc<dyn TrackingMap> = Arc::new(TrackingFunction::new(solve_for(plan, &sys)?));
                    let init = initial_state(&sys, plan.init_radius, &plan.init_mode())?;
                    let cap = oracle_cap(plan, &sys, &init);
                    let size = chain_size_estimate(sys.class_count(), n, cap);
                    if size > plan.exact_state_limit {
                        return Err(Error::Config(format!(
                            "truncated chain for n = {n} has about {size} states, over the limit {}",
                            plan.exact_state_limit
                        )));
                    }
                    let tracking = oracle::policy_value_exact(&sys, &PolicySpec::Tracking(tf), cap)?;
                    let optimal = oracle::optimal_value_exact(&sys, cap)?;
                    tracking.save(out, &format!("tracking_value_n{n}"))?;
                    optimal.save(out, &format!("optimal_value_n{n}"))?;
                    let gap = oracle::gap_from(&tracking, &optimal, &init)?;
                    lines.push(format!(
                        "n={n} cap={cap} tracking={:.10e} optimal={:.10e} gap={:.6e}",
                        gap.tracking, gap.optimal, gap.gap
                    ));
                    results.push(OracleSummary {
                        n,
                        cap,
                        x0: init.x.clone(),
                        q0: init.q.clone(),
                        gap,
                    });
                }
                manifest(out, self.name(), plan, seed, &results)?;
            }
        }
        Ok(lines)
    }
}
