//! Privacy layer for model-predictive control over an untrusted cloud.
//!
//! A plant encodes its dynamics, quadratic cost and affine constraints with a
//! randomly sampled control-system isomorphism, ships the encoded problem to
//! the cloud, exchanges encoded measurements and inputs, and decodes the
//! optimal inputs locally. The privacy obtained is quantified as the dimension
//! of the set of problem instances the cloud cannot tell apart.

pub mod error;
pub mod group;
pub mod instance;
pub mod io;
pub mod linalg;
pub mod mpc;
pub mod objective;
pub mod privacy;
pub mod protocol;
pub mod sysmodel;
pub mod wire;

pub use error::{Error, Result};
