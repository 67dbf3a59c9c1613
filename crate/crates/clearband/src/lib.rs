//! Streaming subband speech enhancement with a self-contained training
//! harness.
//!
//! The crate splits into a signal layer (`dsp`), a small reverse-mode tensor
//! library (`tensor`), and the model stack built on top of them. Everything
//! runs on the CPU; the heavy kernels use rayon when the `parallel` feature
//! is on (default) and fall back to identical sequential loops without it.

pub mod complex;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod postproc;
pub mod scalar;
pub mod subband;
pub mod tensor;
pub mod trainer;
