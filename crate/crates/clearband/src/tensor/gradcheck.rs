//! Central finite differences against the tape, in f64.
//!
//! Module tests hand a graph-building closure and representative inputs to
//! [`check_tape`]; it compares the analytic leaf gradients against
//! (L(x+h) - L(x-h)) / 2h on a seeded sample of coordinates. Anything built
//! from tape ops can be checked this way, including the full model forward.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Coordinates checked per input tensor; small tensors are checked in full.
pub const DEFAULT_SAMPLES: usize = 24;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn eval_loss<B>(build: &B, inputs: &[Tensor<f64>]) -> f64
where
    B: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let loss = build(&g, &vars);
    g.value(loss).item()
}

/// Build the tape once for analytic gradients, then probe sampled
/// coordinates of every input with central differences. Returns the largest
/// relative error seen, or a description of the first coordinate that
/// exceeded `tol`.
pub fn check_tape<B>(
    build: B,
    inputs: &[Tensor<f64>],
    samples: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> std::result::Result<f64, String>
where
    B: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.len()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(samples.min(input.len()));
        for idx in coords {
            let mut plus = input.data().to_vec();
            let mut minus = plus.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let mut inputs_p = inputs.to_vec();
            let mut inputs_m = inputs.to_vec();
            inputs_p[which] = Tensor::new(input.shape().to_vec(), plus);
            inputs_m[which] = Tensor::new(input.shape().to_vec(), minus);
            let fd = (eval_loss(&build, &inputs_p) - eval_loss(&build, &inputs_m)) / (2.0 * h);
            let an = analytic[which].data()[idx];
            let err = rel_err(fd, an);
            if err > tol {
                return Err(format!(
                    "input {which} coordinate {idx}: finite difference {fd:.9e} vs analytic {an:.9e} (rel {err:.3e})"
                ));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
