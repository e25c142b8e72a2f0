//! Scheduling multiclass many-server queues in the Halfin-Whitt regime by
//! tracking the minimizer of a diffusion Bellman equation.
//!
//! The pipeline, per system size `n`:
//!
//! 1. [`model`]: scale the primitives to `n` servers under square-root staffing.
//! 2. [`hjb`]: solve the Bellman equation of the approximating diffusion on a
//!    ball and read off the minimizing class per state.
//! 3. [`queue`]: simulate the nonpreemptive randomized tracking policy on the
//!    exact Markovian queue.
//! 4. [`sde`]: cross-check the Bellman value by Euler-Maruyama Monte Carlo.
//! 5. [`oracle`]: exact discounted values on a truncated state space, including
//!    the preemptive optimum that lower-bounds every policy.
//! 6. [`harness`]: sweeps over `n` producing optimality-gap reports.

pub mod error;
pub mod harness;
pub mod hjb;
mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod queue;
pub mod sde;
pub mod seeds;

pub use error::{Error, Result};
pub use hjb::{GridSpec, HjbSolution, TrackingFunction};
pub use model::{ClassParams, ControlVector, Regime, ScaledSystem, SystemParams};
pub use queue::{CostEstimate, PolicySpec, QueueState};
