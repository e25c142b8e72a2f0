//! Exact event-driven simulation of the `n`-server multiclass Markovian queue.
//!
//! Only per-class head counts are tracked. With exponential services the
//! identity of individual servers does not affect any cost-relevant process.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::TrackingFunction;
use crate::model::ScaledSystem;
use crate::seeds;

/// Head counts of the queue: in system, in service, waiting.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    pub x: Vec<u32>,
    pub z: Vec<u32>,
    pub q: Vec<u32>,
    /// Centred counts `x_i - nu_i n`.
    pub x_check: Vec<f64>,
    pub t: f64,
}

impl QueueState {
    /// Builds a work-conserving state from head counts and queue lengths.
    pub fn from_counts(sys: &ScaledSystem, x: Vec<u32>, q: Vec<u32>) -> Result<Self> {
        let dims = sys.class_count();
        if x.len() != dims || q.len() != dims {
            return Err(Error::Domain(format!("state must have {dims} classes")));
        }
        if x.iter().zip(&q).any(|(xi, qi)| qi > xi) {
            return Err(Error::Domain(format!("queue {q:?} exceeds head count {x:?}")));
        }
        let total: u64 = x.iter().map(|&v| u64::from(v)).sum();
        let queued: u64 = q.iter().map(|&v| u64::from(v)).sum();
        let excess = total.saturating_sub(u64::from(sys.n));
        if queued != excess {
            return Err(Error::Domain(format!(
                "state x = {x:?}, q = {q:?} is not work conserving: {queued} waiting with \
                 {excess} jobs beyond capacity"
            )));
        }
        let z = x.iter().zip(&q).map(|(xi, qi)| xi - qi).collect();
        let x_check = centred(sys, &x);
        Ok(QueueState {
            x,
            z,
            q,
            x_check,
            t: 0.0,
        })
    }

    pub fn total(&self) -> u64 {
        self.x.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn busy(&self) -> u64 {
        self.z.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn queued(&self) -> u64 {
        self.q.iter().map(|&v| u64::from(v)).sum()
    }

    /// Ratio control `Q_i / max(e.Q, 1)`.
    pub fn ratio_control(&self) -> Vec<f64> {
        let total = self.queued().max(1) as f64;
        self.q.iter().map(|&v| f64::from(v) / total).collect()
    }

    /// `Q = X - Z >= 0` and `e.Z = min(e.X, n)`.
    pub fn check_invariants(&self, n: u32) -> Result<()> {
        for i in 0..self.x.len() {
            if self.z[i] + self.q[i] != self.x[i] {
                return Err(Error::Invariant(format!("X != Z + Q in {self}")));
            }
        }
        if self.busy() != self.total().min(u64::from(n)) {
            return Err(Error::Invariant(format!("not work conserving: {self}")));
        }
        Ok(())
    }

    fn refresh_centred(&mut self, sys: &ScaledSystem) {
        self.x_check = centred(sys, &self.x);
    }
}

impl fmt::Display for QueueState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={:.4} X={:?} Z={:?} Q={:?}", self.t, self.x, self.z, self.q)
    }
}

fn centred(sys: &ScaledSystem, x: &[u32]) -> Vec<f64> {
    let nf = f64::from(sys.n);
    x.iter()
        .zip(&sys.nu)
        .map(|(&xi, v)| f64::from(xi) - v * nf)
        .collect()
}

/// Largest-remainder apportionment of `total` proportionally to `weights`,
/// ties going to the lower index.
fn apportion(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if total == 0 || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let shares: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<u64> = shares.iter().map(|s| s.floor() as u64).collect();
    let mut left = total.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    /// Head counts at the fluid point `nu n`, all in service.
    Fluid,
    /// Head counts at `nu n + offset`, rounded.
    Offset(Vec<f64>),
}

/// Initial state within `M sqrt(n)` of the fluid point.
pub fn initial_state(sys: &ScaledSystem, m_bound: f64, mode: &InitMode) -> Result<QueueState> {
    let dims = sys.class_count();
    let n = u64::from(sys.n);
    let fluid = sys.fluid_point();
    let x: Vec<u64> = match mode {
        InitMode::Fluid => apportion(n, &sys.nu),
        InitMode::Offset(off) => {
            if off.len() != dims {
                return Err(Error::Domain(format!("offset must have {dims} entries")));
            }
            let mut x = Vec::with_capacity(dims);
            for (i, (f, o)) in fluid.iter().zip(off).enumerate() {
                let v = (f + o).round();
                if v < 0.0 {
                    return Err(Error::Domain(format!(
                        "offset {o} makes class {} head count negative",
                        i + 1
                    )));
                }
                x.push(v as u64);
            }
            x
        }
    };
    let dist = x
        .iter()
        .zip(&fluid)
        .map(|(&xi, f)| (xi as f64 - f).powi(2))
        .sum::<f64>()
        .sqrt();
    if dist > m_bound * (sys.n as f64).sqrt() + 1e-9 {
        return Err(Error::Domain(format!(
            "initial state is {dist:.3} from the fluid point, beyond M sqrt(n) = {:.3}",
            m_bound * f64::from(sys.n).sqrt()
        )));
    }
    let total: u64 = x.iter().sum();
    let weights: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let q = apportion(total.saturating_sub(n), &weights);
    let to_u32 = |v: Vec<u64>| -> Result<Vec<u32>> {
        v.into_iter()
            .map(|e| u32::try_from(e).map_err(|_| Error::Domain("head count overflow".into())))
            .collect()
    };
    QueueState::from_counts(sys, to_u32(x)?, to_u32(q)?)
}

/// A map from centred states to the class whose queue should hold the excess.
pub trait TrackingMap: Send + Sync + fmt::Debug {
    fn class_count(&self) -> usize;
    fn eval(&self, x: &[f64]) -> usize;
}

impl TrackingMap for TrackingFunction {
    fn class_count(&self) -> usize {
        TrackingFunction::class_count(self)
    }

    fn eval(&self, x: &[f64]) -> usize {
        TrackingFunction::eval(self, x)
    }
}

/// Tracking function that always targets one class.
#[derive(Debug, Clone, Copy)]
pub struct ConstantTracking {
    pub classes: usize,
    pub target: usize,
}

impl TrackingMap for ConstantTracking {
    fn class_count(&self) -> usize {
        self.classes
    }

    fn eval(&self, _x: &[f64]) -> usize {
        self.target
    }
}

#[derive(Debug, Clone)]
pub enum PolicySpec {
    /// Nonpreemptive randomized tracking of a target class map.
    Tracking(Arc<dyn TrackingMap>),
    /// Serve the first nonempty queue in this class order.
    StaticPriority(Vec<usize>),
    /// Pick among nonempty queues with probability proportional to arrival rates.
    ProportionalRandom,
}

impl PolicySpec {
    pub fn tracking(tf: TrackingFunction) -> Self {
        PolicySpec::Tracking(Arc::new(tf))
    }

    pub fn static_priority(order: Vec<usize>) -> Result<Self> {
        let mut seen = order.clone();
        seen.sort_unstable();
        if seen.iter().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::Config(format!(
                "priority order {order:?} is not a permutation of the classes"
            )));
        }
        Ok(PolicySpec::StaticPriority(order))
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Tracking(_) => "tracking",
            PolicySpec::StaticPriority(_) => "static_priority",
            PolicySpec::ProportionalRandom => "proportional_random",
        }
    }
}

/// Small set of class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct ClassSet(pub u32);

impl ClassSet {
    pub fn insert(&mut self, k: usize) {
        self.0 |= 1 << k;
    }

    pub fn contains(self, k: usize) -> bool {
        self.0 & (1 << k) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&k| self.contains(k))
    }
}

impl FromIterator<usize> for ClassSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        let mut set = ClassSet::default();
        for k in iter {
            set.insert(k);
        }
        set
    }
}

/// Classes whose queue exceeds its tracking target:
/// `{k : Q_k - h_k(X) (e.X)^+ > 0}` with `h` the one-hot tracked class.
pub fn k_set(sys: &ScaledSystem, state: &QueueState, tf: &dyn TrackingMap) -> ClassSet {
    let tracked = tf.eval(&state.x_check);
    let excess = state.total().saturating_sub(u64::from(sys.n));
    state
        .q
        .iter()
        .enumerate()
        .filter(|&(k, &qk)| {
            let target = if k == tracked { excess } else { 0 };
            u64::from(qk) > target
        })
        .map(|(k, _)| k)
        .collect()
}

/// Admission decision at a service completion.
#[derive(Debug, Clone, PartialEq)]
pub enum Dispatch {
    Idle,
    /// Candidate classes in increasing index order with their probabilities.
    Admit {
        choices: Vec<(usize, f64)>,
        /// The overfull set used by tracking, when nonempty.
        k_set: Option<ClassSet>,
    },
}

impl Dispatch {
    /// Inverse CDF over the class-ordered partition of `[0, 1)`.
    pub fn pick(&self, uniform: f64) -> Option<usize> {
        match self {
            Dispatch::Idle => None,
            Dispatch::Admit { choices, .. } => {
                let mut acc = 0.0;
                for &(k, p) in choices {
                    acc += p;
                    if uniform < acc {
                        return Some(k);
                    }
                }
                choices.last().map(|&(k, _)| k)
            }
        }
    }
}

fn proportional(sys: &ScaledSystem, classes: impl Iterator<Item = usize>) -> Vec<(usize, f64)> {
    let chosen: Vec<usize> = classes.collect();
    let total: f64 = chosen.iter().map(|&k| sys.lambda[k]).sum();
    chosen.iter().map(|&k| (k, sys.lambda[k] / total)).collect()
}

/// Admission distribution of `policy` in the post-departure state.
pub fn dispatch_distribution(sys: &ScaledSystem, state: &QueueState, policy: &PolicySpec) -> Dispatch {
    if state.queued() == 0 {
        return Dispatch::Idle;
    }
    let nonempty = || (0..state.q.len()).filter(|&k| state.q[k] > 0);
    match policy {
        PolicySpec::Tracking(tf) => {
            let ks = k_set(sys, state, tf.as_ref());
            if ks.is_empty() {
                let k = nonempty().next().expect("queue is nonempty");
                Dispatch::Admit {
                    choices: vec![(k, 1.0)],
                    k_set: None,
                }
            } else {
                Dispatch::Admit {
                    choices: proportional(sys, ks.iter()),
                    k_set: Some(ks),
                }
            }
        }
        PolicySpec::StaticPriority(order) => {
            let k = *order
                .iter()
                .find(|&&k| state.q[k] > 0)
                .expect("queue is nonempty");
            Dispatch::Admit {
                choices: vec![(k, 1.0)],
                k_set: None,
            }
        }
        PolicySpec::ProportionalRandom => Dispatch::Admit {
            choices: proportional(sys, nonempty()),
            k_set: None,
        },
    }
}

fn admit(state: &mut QueueState, k: usize) {
    state.q[k] -= 1;
    state.z[k] += 1;
}

/// Randomized tracking admission at a service completion. `state` must be the
/// post-departure state; the admitted class moves from queue to service.
pub fn tracking_dispatch<R: Rng + ?Sized>(
    sys: &ScaledSystem,
    state: &mut QueueState,
    tf: &Arc<dyn TrackingMap>,
    rng: &mut R,
) -> Option<usize> {
    let policy = PolicySpec::Tracking(Arc::clone(tf));
    dispatch_and_admit(sys, state, &policy, rng).0
}

fn dispatch_and_admit<R: Rng + ?Sized>(
    sys: &ScaledSystem,
    state: &mut QueueState,
    policy: &PolicySpec,
    rng: &mut R,
) -> (Option<usize>, Option<ClassSet>) {
    let dispatch = dispatch_distribution(sys, state, policy);
    let ks = match &dispatch {
        Dispatch::Admit { k_set, .. } => *k_set,
        Dispatch::Idle => None,
    };
    let chosen = match dispatch {
        Dispatch::Idle => None,
        ref d => d.pick(rng.random::<f64>()),
    };
    if let Some(k) = chosen {
        admit(state, k);
    }
    (chosen, ks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    Arrival {
        class: usize,
        queued: bool,
    },
    Departure {
        class: usize,
        admitted: Option<usize>,
        /// Overfull set used by a randomized tracking admission.
        k_set: Option<ClassSet>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Event time.
    pub t: f64,
    pub event: Event,
    /// Total transition rate of the state the event left.
    pub total_rate: f64,
}

/// Samples and applies the next transition.
pub fn step<R: Rng + ?Sized>(
    sys: &ScaledSystem,
    state: &mut QueueState,
    policy: &PolicySpec,
    rng: &mut R,
) -> StepRecord {
    let dims = sys.class_count();
    let departure_rate: f64 = (0..dims).map(|i| sys.mu(i) * f64::from(state.z[i])).sum();
    let total_rate = sys.lambda_total + departure_rate;
    let u_time: f64 = rng.random();
    let dt = -(1.0 - u_time).ln() / total_rate;
    let mut pick = rng.random::<f64>() * total_rate;
    state.t += dt;

    let mut event = None;
    for i in 0..dims {
        if pick < sys.lambda[i] {
            event = Some((true, i));
            break;
        }
        pick -= sys.lambda[i];
    }
    if event.is_none() {
        for i in 0..dims {
            let r = sys.mu(i) * f64::from(state.z[i]);
            if pick < r {
                event = Some((false, i));
                break;
            }
            pick -= r;
        }
    }
    // rounding can leave `pick` just past the last bucket
    let (is_arrival, class) = event.unwrap_or_else(|| {
        let last_busy = (0..dims).rev().find(|&i| state.z[i] > 0);
        match last_busy {
            Some(i) => (false, i),
            None => (true, dims - 1),
        }
    });

    let event = if is_arrival {
        state.x[class] += 1;
        let queued = state.busy() >= u64::from(sys.n);
        if queued {
            state.q[class] += 1;
        } else {
            state.z[class] += 1;
        }
        Event::Arrival { class, queued }
    } else {
        state.x[class] -= 1;
        state.z[class] -= 1;
        state.refresh_centred(sys);
        let (admitted, k_set) = dispatch_and_admit(sys, state, policy, rng);
        Event::Departure {
            class,
            admitted,
            k_set,
        }
    };
    state.refresh_centred(sys);
    StepRecord {
        t: state.t,
        event,
        total_rate,
    }
}

/// One sample of the discounted holding cost over `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscountedSample {
    pub value: f64,
    /// `(c.e) max_t e.X(t) e^{-gamma T} / gamma`.
    pub truncation_bound: f64,
}

/// Discounted cost of one trajectory, integrated exactly between events.
pub fn simulate_discounted_cost<R: Rng + ?Sized>(
    sys: &ScaledSystem,
    policy: &PolicySpec,
    init: &QueueState,
    horizon: f64,
    rng: &mut R,
) -> DiscountedSample {
    let gamma = sys.gamma();
    let costs: Vec<f64> = (0..sys.class_count()).map(|i| sys.cost(i)).collect();
    let mut state = init.clone();
    state.t = 0.0;
    let mut value = 0.0;
    let mut max_total = state.total();
    let mut t = 0.0;
    while t < horizon {
        let rate: f64 = costs.iter().zip(&state.q).map(|(c, &q)| c * f64::from(q)).sum();
        step(sys, &mut state, policy, rng);
        let end = state.t.min(horizon);
        if rate > 0.0 {
            value += rate * ((-gamma * t).exp() - (-gamma * end).exp()) / gamma;
        }
        t = state.t;
        max_total = max_total.max(state.total());
    }
    let truncation_bound =
        sys.params.cost_sum() * max_total as f64 * (-gamma * horizon).exp() / gamma;
    DiscountedSample {
        value,
        truncation_bound,
    }
}

/// Monte Carlo estimate of a discounted cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub replications: usize,
    pub horizon: f64,
    pub truncation_bound: f64,
    pub seed: u64,
}

impl CostEstimate {
    pub(crate) fn from_samples(samples: &[f64], horizon: f64, truncation_bound: f64, seed: u64) -> Self {
        let r = samples.len();
        let mean = samples.iter().sum::<f64>() / r as f64;
        let var = if r > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64
        } else {
            0.0
        };
        CostEstimate {
            mean,
            std_error: (var / r as f64).sqrt(),
            replications: r,
            horizon,
            truncation_bound,
            seed,
        }
    }
}

/// Horizon making the discount tail `scale e^{-gamma T}` at most `tol`.
pub fn default_horizon(gamma: f64, scale: f64, tol: f64) -> f64 {
    ((scale / tol).ln() / gamma).max(1.0 / gamma)
}

/// Independent replications on counter-split streams of `seed`; bit-for-bit
/// reproducible for fixed `(seed, replications, horizon)`.
pub fn estimate_cost(
    sys: &ScaledSystem,
    policy: &PolicySpec,
    init: &QueueState,
    horizon: f64,
    replications: usize,
    seed: u64,
) -> Result<CostEstimate> {
    if replications < 2 {
        return Err(Error::Config("at least two replications are required".into()));
    }
    if !(horizon >= 0.0) {
        return Err(Error::Config(format!("horizon must be nonnegative (got {horizon})")));
    }
    let samples: Vec<DiscountedSample> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeds::stream(seed, r as u64);
            simulate_discounted_cost(sys, policy, init, horizon, &mut rng)
        })
        .collect();
    let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
    let bound = samples
        .iter()
        .map(|s| s.truncation_bound)
        .fold(0.0, f64::max);
    Ok(CostEstimate::from_samples(&values, horizon, bound, seed))
}

/// Piecewise-constant path: `points[j]` holds on `[points[j].t, points[j+1].t)`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub points: Vec<QueueState>,
    pub events: Vec<StepRecord>,
    pub horizon: f64,
}

pub fn simulate_trajectory<R: Rng + ?Sized>(
    sys: &ScaledSystem,
    policy: &PolicySpec,
    init: &QueueState,
    horizon: f64,
    rng: &mut R,
) -> Trajectory {
    let mut state = init.clone();
    state.t = 0.0;
    let mut points = vec![state.clone()];
    let mut events = Vec::new();
    loop {
        let rec = step(sys, &mut state, policy, rng);
        if rec.t >= horizon {
            break;
        }
        points.push(state.clone());
        events.push(rec);
    }
    Trajectory {
        points,
        events,
        horizon,
    }
}

impl Trajectory {
    /// CSV with columns `t,event_type,class,X_*,Z_*,Q_*`. A departure is
    /// followed by an `admit` or `idle` row; class labels are one-based.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let dims = self.points.first().map_or(0, |s| s.x.len());
        let mut header = String::from("t,event_type,class");
        for name in ["X", "Z", "Q"] {
            for i in 1..=dims {
                header.push_str(&format!(",{name}_{i}"));
            }
        }
        writeln!(out, "{header}")?;
        let row = |out: &mut W, t: f64, kind: &str, class: Option<usize>, s: &QueueState| {
            let label = class.map(|k| (k + 1).to_string()).unwrap_or_default();
            let mut line = format!("{t:.17e},{kind},{label}");
            for v in s.x.iter().chain(&s.z).chain(&s.q) {
                line.push_str(&format!(",{v}"));
            }
            writeln!(out, "{line}")
        };
        for (rec, after) in self.events.iter().zip(&self.points[1..]) {
            match rec.event {
                Event::Arrival { class, .. } => row(out, rec.t, "arrival", Some(class), after)?,
                Event::Departure {
                    class, admitted, ..
                } => {
                    let mut before = after.clone();
                    if let Some(k) = admitted {
                        before.q[k] += 1;
                        before.z[k] -= 1;
                    }
                    row(out, rec.t, "departure", Some(class), &before)?;
                    match admitted {
                        Some(k) => row(out, rec.t, "admit", Some(k), after)?,
                        None => row(out, rec.t, "idle", None, after)?,
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::io::write_atomic(path, &buf)
    }
}
