//! Desk-scale laboratory for learned quadcopter dynamics models.
//!
//! The crate trains two world models on chirp-excitation flight data from a
//! simulated quadcopter and evaluates how their closed-loop rollouts behave in
//! and out of the training distribution:
//!
//! - a physics-structured model: an MLP predicts the net body-frame force and
//!   moment, which is integrated through differentiable 6DOF rigid-body
//!   dynamics with an RK4 step,
//! - a recurrent baseline: an MLP initializer followed by an LSTM that
//!   predicts next-state deltas.
//!
//! Both are trained by backpropagating multi-step rollout MSE through the
//! whole prediction pipeline (integrator included) using the tape-based
//! reverse-mode engine in [`autodiff`].
//!
//! Module map:
//! - [`types`]: state/action/episode vocabulary and frame conventions
//! - [`autodiff`]: reverse-mode tape over scalar and vector expressions
//! - [`dynamics`]: 6DOF equations of motion and the RK4 integrator, generic
//!   over plain numbers and tape variables
//! - [`nn`]: MLP, LSTM cell, initialization, Adam
//! - [`sim`]: ground-truth quadcopter plant with rate/position controllers
//! - [`excitation`]: chirp data-collection protocol
//! - [`replay`]: episode buffer and sequence sampling
//! - [`worldmodel`]: the two models behind one rollout interface
//! - [`training`]: rollout-MSE training loop with validation and checkpoints
//! - [`evaluation`]: RMSE tables and error-over-time series

pub mod autodiff;
pub mod dynamics;
pub mod evaluation;
pub mod excitation;
pub mod math;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod sim;
pub mod training;
pub mod types;
pub mod worldmodel;

pub use types::{Action, Episode, EpisodeTag, RigidBodyParams, State12, Wrench};
