//! Physics-informed neural network (PINN) solver core.
//!
//! Forward PDE problems are solved by minimizing the strong-form residual at
//! quasi-random collocation points together with boundary/initial penalties;
//! inverse problems train unknown PDE coefficients jointly with the network.
//! Everything differentiable is an expression-graph node, so input
//! derivatives of the network (for the residual) and weight gradients (for
//! training) come from the same engine.

pub mod autodiff;
pub mod conditions;
pub mod domain;
pub mod dsl;
pub mod net;
pub mod optim;
pub mod solver;

/// Stable derivation of per-purpose RNG seeds from one master seed, so that
/// e.g. weight init and collocation sampling draw from independent streams.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    // FNV-1a over the stream tag, mixed with the master seed.
    let mut h: u64 = 0xcbf29ce484222325 ^ master.rotate_left(17);
    for b in stream.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ master
}
