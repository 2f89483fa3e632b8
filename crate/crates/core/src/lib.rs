//! Perishable-inventory replenishment simulator with value-based agents.
//!
//! The crate is organized bottom-up:
//!
//! * [`gld`] - generalized Tukey lambda distribution numerics and the
//!   quantile/expectile losses shared by the distributional agents.
//! * [`items`] - pseudo-item generation from a Clayton copula over
//!   correlated item attributes, plus CSV (de)serialization.
//! * [`market`] - seasonal purchase probabilities, correlated customer
//!   arrivals, binomial demand realization, and noisy demand forecasts.
//! * [`env`] - the per-item store environment: LIFO stock with shelf-life
//!   decay, an order pipeline with lead time, and the profit/waste reward.
//! * [`policy`] - the policy interface and the classical (s,Q) baseline.
//! * [`net`] - a small hand-rolled feedforward network (1-D convolution over
//!   the stock vector, LayerNorm + SELU trunk) trained with Adam, all f64.
//! * [`agents`] - replay buffer, epsilon-greedy exploration, and the DQN /
//!   QR-DQN / ER-DQN / GTDQN update rules on top of [`net`].
//! * [`harness`] - experiment configuration, the training and paired
//!   evaluation loops, result aggregation, and the invariant audit.
//!
//! With the default `parallel` feature, evaluation fans out across items via
//! rayon; disabling it compiles a sequential fallback with identical output.

pub mod agents;
pub mod env;
pub mod gld;
pub mod harness;
pub mod items;
pub mod market;
pub mod net;
pub(crate) mod par;
pub mod policy;
