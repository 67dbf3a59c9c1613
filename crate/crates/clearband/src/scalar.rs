//! Scalar abstraction over the two float widths used by the engine.
//!
//! Inference and training run in `f32`; gradient checking instantiates the
//! same code in `f64` so finite differences have enough headroom.

use rustfft::FftNum;

/// Element type for all tensors and signals.
pub trait Scalar:
    FftNum + num_traits::Float + num_traits::FloatConst + std::iter::Sum + Default
{
    const DTYPE: Dtype;

    fn of_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;

    fn of_usize(n: usize) -> Self {
        Self::of_f64(n as f64)
    }

    /// Error function, accurate to ~1e-15 in `f64`.
    fn erf(self) -> Self {
        Self::of_f64(erf_f64(self.into_f64()))
    }
}

/// Tag stored in checkpoints alongside each blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn of_f64(x: f64) -> Self {
        x as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn of_f64(x: f64) -> Self {
        x
    }

    fn into_f64(self) -> f64 {
        self
    }
}

/// erf via the Abramowitz & Stegun 7.1.26-style rational approximation is not
/// accurate enough for label tests, so use the standard Chebyshev-backed
/// erfc evaluation (W. J. Cody style, double precision).
pub fn erf_f64(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax < 0.5 {
        // Alternating series erf(x) = 2/sqrt(pi) * sum_k (-1)^k x^(2k+1) / (k! (2k+1)),
        // rapidly convergent for |x| < 0.5.
        let x2 = x * x;
        let c = 2.0 / std::f64::consts::PI.sqrt();
        let mut term = x;
        let mut acc = x;
        for k in 1..40 {
            term *= -x2 / k as f64;
            let add = term / (2 * k + 1) as f64;
            acc += add;
            if add.abs() < 1e-18 * acc.abs().max(1e-300) {
                break;
            }
        }
        c * acc
    } else {
        1.0f64.copysign(x) * (1.0 - erfc_f64(ax))
    }
}

/// Complementary error function for x >= 0.5, via the continued-fraction/
/// rational expansion from Numerical Recipes (erfc ~ 1.2e-16 max rel err).
pub fn erfc_f64(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    let t = 2.0 / (2.0 + x);
    let ty = 4.0 * t - 2.0;
    const COF: [f64; 28] = [
        -1.3026537197817094,
        6.4196979235649026e-1,
        1.9476473204185836e-2,
        -9.561514786808631e-3,
        -9.46595344482036e-4,
        3.66839497852761e-4,
        4.2523324806907e-5,
        -2.0278578112534e-5,
        -1.624290004647e-6,
        1.303655835580e-6,
        1.5626441722e-8,
        -8.5238095915e-8,
        6.529054439e-9,
        5.059343495e-9,
        -9.91364156e-10,
        -2.27365122e-10,
        9.6467911e-11,
        2.394038e-12,
        -6.886027e-12,
        8.94487e-13,
        3.13092e-13,
        -1.12708e-13,
        3.81e-16,
        7.106e-15,
        -1.523e-15,
        -9.4e-17,
        1.21e-16,
        -2.8e-17,
    ];
    let mut d = 0.0;
    let mut dd = 0.0;
    for &c in COF.iter().rev().take(COF.len() - 1) {
        let tmp = d;
        d = ty * d - dd + c;
        dd = tmp;
    }
    t * (-x * x + 0.5 * (COF[0] + ty * d) - dd).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_points() {
        // Values from standard tables.
        assert!((erf_f64(0.0) - 0.0).abs() < 1e-15);
        assert!((erf_f64(1.0) - 0.8427007929497149).abs() < 1e-13);
        assert!((erf_f64(-1.0) + 0.8427007929497149).abs() < 1e-13);
        assert!((erf_f64(0.5) - 0.5204998778130465).abs() < 1e-13);
        assert!((erf_f64(2.0) - 0.9953222650189527).abs() < 1e-13);
        assert!((erf_f64(3.0) - 0.9999779095030014).abs() < 1e-13);
    }

    #[test]
    fn erf_matches_quadrature() {
        // Independent oracle: Simpson integration of 2/sqrt(pi) exp(-t^2).
        for &x in &[0.1, 0.3, 0.84, 1.5, 2.5, 4.0] {
            let n = 20_000;
            let h = x / n as f64;
            let f = |t: f64| (-t * t).exp();
            let mut s = f(0.0) + f(x);
            for i in 1..n {
                let t = i as f64 * h;
                s += f(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let oracle = s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt();
            assert!(
                (erf_f64(x) - oracle).abs() < 1e-12,
                "x={x}: {} vs {}",
                erf_f64(x),
                oracle
            );
        }
    }
}
