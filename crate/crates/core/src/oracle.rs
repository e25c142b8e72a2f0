//! Exact discounted values on the truncated state space `{e.X <= cap}`.
//!
//! Arrivals that would push the head count past the cap are rejected. Policy
//! values come from a sparse linear solve over work-conserving states
//! `(X, Q)`; the preemptive optimum comes from value iteration on the
//! uniformized chain over head counts `X` alone, with the queue split chosen
//! freely at every instant.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::MSystem;
use crate::model::ScaledSystem;
use crate::queue::{dispatch_distribution, Dispatch, PolicySpec, QueueState, TrackingMap};

/// Largest queue excess for which queue splits are enumerated exactly.
pub const EXACT_SPLIT_LIMIT: u32 = 200;

/// All `x` in `Z_+^dims` with `sum x <= cap`, in lexicographic order.
fn head_counts(dims: usize, cap: u32) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, dims: usize, left: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dims {
            out.push(prefix.clone());
            return;
        }
        for v in 0..=left {
            prefix.push(v);
            rec(prefix, dims, left - v, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(dims), dims, cap, &mut out);
    out
}

/// All `q` with `sum q = total` and `q <= bound` componentwise.
fn splits(bound: &[u32], total: u32) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, bound: &[u32], left: u32, out: &mut Vec<Vec<u32>>) {
        let i = prefix.len();
        if i == bound.len() {
            if left == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        let rest: u32 = bound[i + 1..].iter().sum();
        let lo = left.saturating_sub(rest);
        for v in lo..=bound[i].min(left) {
            prefix.push(v);
            rec(prefix, bound, left - v, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(bound.len()), bound, total, &mut out);
    out
}

/// Greedy fills of the excess following every class order: the vertices of
/// the split polytope.
fn greedy_splits(bound: &[u32], total: u32) -> Vec<Vec<u32>> {
    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }
    let mut out: Vec<Vec<u32>> = permutations(bound.len())
        .into_iter()
        .map(|order| {
            let mut q = vec![0; bound.len()];
            let mut left = total;
            for k in order {
                q[k] = bound[k].min(left);
                left -= q[k];
            }
            q
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

fn excess(sys: &ScaledSystem, x: &[u32]) -> u32 {
    x.iter().sum::<u32>().saturating_sub(sys.n)
}

fn cost_of(sys: &ScaledSystem, q: &[u32]) -> f64 {
    q.iter()
        .enumerate()
        .map(|(i, &v)| sys.cost(i) * f64::from(v))
        .sum()
}

/// `lambda + n max_i mu_i`.
pub fn uniformization_constant(sys: &ScaledSystem) -> f64 {
    let mu_max = (0..sys.class_count()).map(|i| sys.mu(i)).fold(0.0, f64::max);
    sys.lambda_total + f64::from(sys.n) * mu_max
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChainState {
    pub x: Vec<u32>,
    pub q: Vec<u32>,
}

/// Work-conserving states of the truncated chain with their transition rates
/// under one nonpreemptive policy.
#[derive(Debug, Clone)]
pub struct TruncatedChain {
    pub cap: u32,
    pub states: Vec<ChainState>,
    pub index: HashMap<ChainState, usize>,
    /// Outgoing `(target, rate)` per state, self-loops excluded.
    pub transitions: Vec<Vec<(usize, f64)>>,
    pub uniformization: f64,
}

impl TruncatedChain {
    pub fn build(sys: &ScaledSystem, policy: &PolicySpec, cap: u32) -> Result<Self> {
        if cap < sys.n {
            return Err(Error::Config(format!(
                "truncation cap {cap} is below the number of servers {}",
                sys.n
            )));
        }
        let dims = sys.class_count();
        let mut states = Vec::new();
        for x in head_counts(dims, cap) {
            for q in splits(&x, excess(sys, &x)) {
                states.push(ChainState { x: x.clone(), q });
            }
        }
        let index: HashMap<ChainState, usize> =
            states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let lookup = |s: &ChainState| -> Result<usize> {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Invariant(format!("transition leaves the state space: {s:?}")))
        };

        let mut transitions = Vec::with_capacity(states.len());
        for s in &states {
            let mut out: Vec<(usize, f64)> = Vec::new();
            let total: u32 = s.x.iter().sum();
            for i in 0..dims {
                if total < cap {
                    let mut next = s.clone();
                    next.x[i] += 1;
                    if total >= sys.n {
                        next.q[i] += 1;
                    }
                    out.push((lookup(&next)?, sys.lambda[i]));
                }
                let zi = s.x[i] - s.q[i];
                if zi == 0 {
                    continue;
                }
                let rate = sys.mu(i) * f64::from(zi);
                let mut after = s.x.clone();
                after[i] -= 1;
                let post = QueueState::from_counts(sys, after.clone(), s.q.clone()).or_else(|_| {
                    // post-departure, pre-admission: one server idles while jobs wait
                    let mut st = QueueState::from_counts(sys, s.x.clone(), s.q.clone())?;
                    st.x[i] -= 1;
                    st.z[i] -= 1;
                    st.x_check = st
                        .x
                        .iter()
                        .zip(&sys.nu)
                        .map(|(&v, nu)| f64::from(v) - nu * f64::from(sys.n))
                        .collect();
                    Ok::<_, Error>(st)
                })?;
                match dispatch_distribution(sys, &post, policy) {
                    Dispatch::Idle => {
                        let next = ChainState {
                            x: after,
                            q: s.q.clone(),
                        };
                        out.push((lookup(&next)?, rate));
                    }
                    Dispatch::Admit { choices, .. } => {
                        for (k, p) in choices {
                            let mut q = s.q.clone();
                            q[k] -= 1;
                            let next = ChainState {
                                x: after.clone(),
                                q,
                            };
                            out.push((lookup(&next)?, rate * p));
                        }
                    }
                }
            }
            transitions.push(out);
        }
        let uniformization = uniformization_constant(sys);
        for (s, out) in states.iter().zip(&transitions) {
            let total: f64 = out.iter().map(|(_, r)| r).sum();
            if total > uniformization * (1.0 + 1e-12) {
                return Err(Error::Invariant(format!(
                    "state {s:?} has exit rate {total} above the uniformization constant"
                )));
            }
        }
        Ok(TruncatedChain {
            cap,
            states,
            index,
            transitions,
            uniformization,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleMetadata {
    pub truncation: &'static str,
    pub cap: u32,
    pub states: usize,
    pub action_space: &'static str,
    pub action_space_restricted: bool,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyValue {
    pub chain: TruncatedChain,
    pub values: Vec<f64>,
    pub residual: f64,
    pub sweeps: usize,
}

impl PolicyValue {
    pub fn value_of(&self, x: &[u32], q: &[u32]) -> Option<f64> {
        let key = ChainState {
            x: x.to_vec(),
            q: q.to_vec(),
        };
        self.chain.index.get(&key).map(|&i| self.values[i])
    }

    pub fn value_at(&self, state: &QueueState) -> Option<f64> {
        self.value_of(&state.x, &state.q)
    }

    pub fn metadata(&self) -> OracleMetadata {
        OracleMetadata {
            truncation: "reject_arrivals_at_cap",
            cap: self.chain.cap,
            states: self.chain.len(),
            action_space: "fixed_policy",
            action_space_restricted: false,
            iterations: self.sweeps,
            residual: self.residual,
        }
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let dims = self.chain.states.first().map_or(0, |s| s.x.len());
        write_value_csv(
            out,
            dims,
            self.chain
                .states
                .iter()
                .zip(&self.values)
                .map(|(s, &v)| (s.x.as_slice(), s.q.as_slice(), v)),
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        save_pair(dir.as_ref(), stem, |w| self.write_csv(w), &self.metadata())
    }
}

fn write_value_csv<'a, W: Write>(
    out: &mut W,
    dims: usize,
    rows: impl Iterator<Item = (&'a [u32], &'a [u32], f64)>,
) -> std::io::Result<()> {
    let mut header = Vec::new();
    for name in ["X", "Q"] {
        for i in 1..=dims {
            header.push(format!("{name}_{i}"));
        }
    }
    header.push("v".into());
    writeln!(out, "{}", header.join(","))?;
    for (x, q, v) in rows {
        let mut line: Vec<String> = x.iter().chain(q).map(|c| c.to_string()).collect();
        line.push(format!("{v:.16e}"));
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

fn save_pair(
    dir: &Path,
    stem: &str,
    csv: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    meta: &OracleMetadata,
) -> Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut buf = Vec::new();
    csv(&mut buf).map_err(|e| Error::io(&csv_path, e))?;
    crate::io::write_atomic(&csv_path, &buf)?;
    let meta_path = dir.join(format!("{stem}.meta.json"));
    crate::io::write_atomic(&meta_path, serde_json::to_string_pretty(meta)?.as_bytes())
}

/// Exact discounted value of a nonpreemptive Markov policy.
pub fn policy_value_exact(sys: &ScaledSystem, policy: &PolicySpec, cap: u32) -> Result<PolicyValue> {
    if let PolicySpec::Tracking(tf) = policy {
        if tf.class_count() != sys.class_count() {
            return Err(Error::Config("tracking map dimension does not match the system".into()));
        }
    }
    let chain = TruncatedChain::build(sys, policy, cap)?;
    let gamma = sys.gamma();
    let nnz = chain.transitions.iter().map(Vec::len).sum();
    let mut m = MSystem::with_capacity(chain.len(), nnz);
    for (s, out) in chain.states.iter().zip(&chain.transitions) {
        let exit: f64 = out.iter().map(|(_, r)| r).sum();
        m.push_row(gamma + exit, out.iter().copied(), cost_of(sys, &s.q));
    }
    let mut values = vec![0.0; chain.len()];
    let tol = 1e-10;
    let sweeps = m.gauss_seidel(&mut values, tol, 5_000_000)?;
    let residual = m.residual_sup(&values);
    Ok(PolicyValue {
        chain,
        values,
        residual,
        sweeps,
    })
}

#[derive(Debug, Clone)]
pub struct OptimalValue {
    pub cap: u32,
    pub states: Vec<Vec<u32>>,
    pub index: HashMap<Vec<u32>, usize>,
    pub values: Vec<f64>,
    /// Minimizing queue split per state.
    pub policy: Vec<Vec<u32>>,
    /// Sup-norm change of each value-iteration sweep.
    pub sweep_changes: Vec<f64>,
    pub contraction: f64,
    pub restricted: bool,
}

impl OptimalValue {
    pub fn value_at(&self, x: &[u32]) -> Option<f64> {
        self.index.get(x).map(|&i| self.values[i])
    }

    pub fn metadata(&self) -> OracleMetadata {
        OracleMetadata {
            truncation: "reject_arrivals_at_cap",
            cap: self.cap,
            states: self.states.len(),
            action_space: if self.restricted {
                "greedy_vertices"
            } else {
                "all_splits"
            },
            action_space_restricted: self.restricted,
            iterations: self.sweep_changes.len(),
            residual: self.sweep_changes.last().copied().unwrap_or(0.0),
        }
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let dims = self.states.first().map_or(0, Vec::len);
        write_value_csv(
            out,
            dims,
            self.states
                .iter()
                .zip(&self.policy)
                .zip(&self.values)
                .map(|((x, q), &v)| (x.as_slice(), q.as_slice(), v)),
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        save_pair(dir.as_ref(), stem, |w| self.write_csv(w), &self.metadata())
    }
}

struct Actions {
    /// Queue splits of all states, concatenated.
    splits: Vec<Vec<u32>>,
    start: Vec<usize>,
}

/// Optimal preemptive value by Jacobi value iteration on the uniformized
/// chain, started from zero so every iterate is a lower bound. Stops when the
/// contraction bound on the remaining error is below `1e-9 (e.c) / gamma`.
pub fn optimal_value_exact(sys: &ScaledSystem, cap: u32) -> Result<OptimalValue> {
    optimal_value_with_tol(sys, cap, None)
}

pub fn optimal_value_with_tol(sys: &ScaledSystem, cap: u32, tol: Option<f64>) -> Result<OptimalValue> {
    if cap < sys.n {
        return Err(Error::Config(format!(
            "truncation cap {cap} is below the number of servers {}",
            sys.n
        )));
    }
    let dims = sys.class_count();
    let states = head_counts(dims, cap);
    let index: HashMap<Vec<u32>, usize> =
        states.iter().enumerate().map(|(i, x)| (x.clone(), i)).collect();
    let mut restricted = false;
    let mut actions = Actions {
        splits: Vec::new(),
        start: vec![0],
    };
    for x in &states {
        let e = excess(sys, x);
        let list = if dims <= 2 && e <= EXACT_SPLIT_LIMIT {
            splits(x, e)
        } else {
            restricted = true;
            greedy_splits(x, e)
        };
        actions.splits.extend(list);
        actions.start.push(actions.splits.len());
    }
    // neighbours: up[i] after a class-i arrival (None at the cap), down[i] after a departure
    let neighbours: Vec<(Vec<Option<usize>>, Vec<Option<usize>>)> = states
        .iter()
        .map(|x| {
            let total: u32 = x.iter().sum();
            let up = (0..dims)
                .map(|i| {
                    (total < cap).then(|| {
                        let mut y = x.clone();
                        y[i] += 1;
                        index[&y]
                    })
                })
                .collect();
            let down = (0..dims)
                .map(|i| {
                    (x[i] > 0).then(|| {
                        let mut y = x.clone();
                        y[i] -= 1;
                        index[&y]
                    })
                })
                .collect();
            (up, down)
        })
        .collect();

    let lam = uniformization_constant(sys);
    let gamma = sys.gamma();
    let rho = lam / (lam + gamma);
    let cost_scale = sys.params.cost_sum() / gamma;
    let tol = tol.unwrap_or(1e-9 * cost_scale);

    let bellman = |v: &[f64], s: usize| -> (f64, usize) {
        let x = &states[s];
        let (up, down) = &neighbours[s];
        let here = v[s];
        let mut base = 0.0;
        let mut used = 0.0;
        for i in 0..dims {
            if let Some(j) = up[i] {
                base += sys.lambda[i] * v[j];
                used += sys.lambda[i];
            }
        }
        let mut best = f64::INFINITY;
        let mut best_a = actions.start[s];
        for a in actions.start[s]..actions.start[s + 1] {
            let q = &actions.splits[a];
            let mut val = cost_of(sys, q) + base;
            let mut out = used;
            for i in 0..dims {
                let z = x[i] - q[i];
                if z > 0 {
                    let r = sys.mu(i) * f64::from(z);
                    val += r * v[down[i].expect("busy class has a departure neighbour")];
                    out += r;
                }
            }
            val += (lam - out) * here;
            if val < best {
                best = val;
                best_a = a;
            }
        }
        (best / (lam + gamma), best_a)
    };

    let mut v = vec![0.0; states.len()];
    let mut sweep_changes = Vec::new();
    let max_sweeps = 10_000_000usize;
    loop {
        let next: Vec<f64> = (0..states.len())
            .into_par_iter()
            .map(|s| bellman(&v, s).0)
            .collect();
        let change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        sweep_changes.push(change);
        if change * rho / (1.0 - rho) <= tol {
            break;
        }
        if sweep_changes.len() >= max_sweeps {
            return Err(Error::NonConvergence {
                iterations: sweep_changes.len(),
                residual: change,
            });
        }
    }
    let policy = (0..states.len())
        .map(|s| actions.splits[bellman(&v, s).1].clone())
        .collect();
    Ok(OptimalValue {
        cap,
        states,
        index,
        values: v,
        policy,
        sweep_changes,
        contraction: rho,
        restricted,
    })
}

/// Exact tracking and optimal values at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapResult {
    pub tracking: f64,
    pub optimal: f64,
    pub gap: f64,
}

/// Tracking-policy value minus the preemptive optimum at `state`.
pub fn gap_exact(
    sys: &ScaledSystem,
    tf: std::sync::Arc<dyn TrackingMap>,
    cap: u32,
    state: &QueueState,
) -> Result<GapResult> {
    let tracking = policy_value_exact(sys, &PolicySpec::Tracking(tf), cap)?;
    let optimal = optimal_value_exact(sys, cap)?;
    gap_from(&tracking, &optimal, state)
}

pub fn gap_from(tracking: &PolicyValue, optimal: &OptimalValue, state: &QueueState) -> Result<GapResult> {
    let t = tracking
        .value_at(state)
        .ok_or_else(|| Error::Domain(format!("state {state} is outside the truncation")))?;
    let o = optimal
        .value_at(&state.x)
        .ok_or_else(|| Error::Domain(format!("state {state} is outside the truncation")))?;
    let gap = t - o;
    if gap < -1e-8 {
        return Err(Error::Invariant(format!(
            "tracking value {t} is below the preemptive optimum {o} at {state}"
        )));
    }
    Ok(GapResult {
        tracking: t,
        optimal: o,
        gap,
    })
}
