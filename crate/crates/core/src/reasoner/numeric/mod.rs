//! Anchor-conditioned latent trajectories and their fusion with the data embedding.

pub mod latent;
pub mod ode;

pub use latent::{AnchorContext, FusedRepresentation, LatentTrajectory, NumericReasoner};
pub use ode::{integrate_rk4, rk4_step, CompletionStrategy, OdeConfig, OdeSystem};
