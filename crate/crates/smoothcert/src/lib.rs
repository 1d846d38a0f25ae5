//! Noise-smoothed robust training and certification for small classifiers.
//!
//! The crate trains multilayer perceptrons against noise-averaged adversarial
//! perturbations, evaluates distributional robustness certificates of the
//! form `gamma*rho + E[phi_gamma]`, certifies smoothed predictions with
//! exact binomial confidence bounds, and ships independent brute-force
//! oracles (grids, quadrature, finite differences, exhaustive tail sums)
//! that the test suite uses to verify every quantitative claim.
//!
//! Determinism is a hard contract throughout: every random draw comes from a
//! stateless sub-stream keyed by `(seed, purpose, indices)`, so results are
//! bit-identical across reruns and thread counts.

pub mod adversary;
pub mod bound;
pub mod certifier;
pub mod data;
pub mod nn;
pub mod oracles;
pub mod smoothing;
pub mod trainers;
pub mod verify;
pub mod rng;
pub mod tensor;
