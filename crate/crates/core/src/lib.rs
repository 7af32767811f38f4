//! Sequential image hashing with a recurrent policy agent.
//!
//! An RNN agent reads a precomputed image feature and emits a `q`-bit hash
//! code one bit at a time, in action groups of `k` bits. Each triplet of
//! images (anchor, positive, negative) produces two kinds of reward from the
//! triplet ranking hinge: one per action group and one for the whole code.
//! Group rewards are optimized with REINFORCE; the global reward is
//! differentiated analytically and pushed through the recurrence by
//! backpropagation through time.
//!
//! Module map:
//!
//! - [`linalg`]: dense kernels, nonlinearities, seeded RNG, finite differences
//! - [`dataio`]: datasets, binary/CSV feature files, splits, synthetic clusters
//! - [`policy`]: the agent (recurrence, policy layer, rollout, binarization)
//! - [`reward`]: triplet sampling, hinge loss, group/global rewards
//! - [`trainer`]: gradients, SGD, the training loops and the no-sequence baseline
//! - [`retrieval`]: Hamming index, ranking, MAP / precision / PR metrics
//! - [`oracle`]: brute-force enumeration and gradient checking
//! - [`config`]: TOML run configuration and manifests

pub mod config;
pub mod dataio;
pub mod error;
pub mod linalg;
pub mod oracle;
pub mod policy;
pub mod retrieval;
pub mod reward;
pub mod trainer;

pub use error::{DataError, Error, Result};
