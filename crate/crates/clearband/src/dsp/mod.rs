//! Signal-level front end: transforms, WAV I/O, mixing, and test signals.

pub mod fft;
pub mod mix;
pub mod stft;
pub mod synth;
pub mod wav;
