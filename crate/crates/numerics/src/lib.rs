//! Dense tensor algebra with tape-based reverse-mode gradients.
//!
//! Everything in the stereo pipeline is expressed with the operations in this
//! crate: a [`Graph`] records each forward operation together with a
//! [`Backward`] rule, and [`Graph::backward`] replays the tape in reverse.
//! The same code runs in `f32` for model execution and in `f64` for
//! finite-difference checks, via the [`Real`] trait.

pub mod adam;
pub mod checkpoint;
pub mod conv;
mod error;
pub mod gradcheck;
mod graph;
pub mod ops;
mod param;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NumericsError, Result};
pub use graph::{Backward, BackwardCtx, Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;

/// Initializes the global worker pool, honoring `RRESM_THREADS` when set.
/// Denormals are flushed to zero on the calling thread and on every worker.
///
/// Calling this more than once is harmless; only the first call configures
/// the pool.
pub fn init_threads() {
    flush_subnormals();
    let threads = std::env::var("RRESM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new().start_handler(|_| flush_subnormals());
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let _ = builder.build_global();
}

/// Sets FTZ and DAZ on the current thread (x86-64 only).
pub fn flush_subnormals() {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    // SAFETY: only toggles the two denormal bits of MXCSR.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}
