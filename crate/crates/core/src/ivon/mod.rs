//! The IVON variational optimizer and local (client-side) fitting.
//!
//! A client's posterior is a diagonal Gaussian `N(m, σ²)` with
//! `σ² = 1 / (λ (h + δ))`. Each minibatch step draws `θ ~ q`, computes the
//! minibatch gradient `ĝ` at `θ`, and forms the reparameterized Hessian
//! estimate `ĥ = ĝ ⊙ (θ − m) / σ²`. The state update is
//!
//! ```text
//! g ← β₁ g + (1 − β₁) ĝ
//! h ← β₂ h + (1 − β₂) ĥ + ½ (1 − β₂)² (h − ĥ)² / (h + δ)      then h ← max(h, 0)
//! ḡ ← g / (1 − β₁ᵉ)
//! m ← m − α (ḡ + δ m) / (h + δ)
//! ```
//!
//! with `e` the post-increment step count and `α` a scalar learning rate
//! decaying linearly over the fit.

mod client;
mod optimizer;
mod posterior;
mod reference;

pub use client::{
    client_update, estimate_step, noise_stream, personalized_client_update, shuffle_stream,
    steps_per_fit, LocalFit, PriorSpec,
};
pub use optimizer::{ivon_step, Ess, IvonConfig, IvonState, LinearSchedule};
pub use posterior::{hessian_estimate, PosteriorRecord, PriorAnchor, VariationalPosterior, MIN_PRECISION};
pub use reference::{vogn_hessian, vogn_step, von_step, VonState};
