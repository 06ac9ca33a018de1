//! Central finite-difference gradient checks in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Which coordinates to probe: all of them, or a seeded sample per tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coords {
    All,
    Sample { per_tensor: usize, seed: u64 },
}

/// `max|a − n| / (max|a| + max|n| + 1e-12)` over the probed coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let a = analytic.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let n = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / (a + n + 1e-12)
}

/// Compares `analytic[i]` against central differences of `loss` around
/// `values[i]`; `values` is restored before returning.
pub fn compare_with_finite_differences(
    values: &mut [Tensor<f64>],
    analytic: &[Vec<f64>],
    mut loss: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    h: f64,
    coords: Coords,
) -> Result<f64> {
    if analytic.len() != values.len() {
        return Err(Error::Shape("one analytic gradient per input is required".into()));
    }
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for i in 0..values.len() {
        let n = values[i].numel();
        if analytic[i].len() != n {
            return Err(Error::Shape(format!("gradient {i} has {} entries for {n} values", analytic[i].len())));
        }
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_tensor, seed } if per_tensor < n => {
                let mut rng = vah_core::seed::Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let mut v = sample(&mut rng, n, per_tensor).into_vec();
                v.sort_unstable();
                v
            }
            Coords::Sample { .. } => (0..n).collect(),
        };
        for j in picks {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + h;
            let up = loss(values)?;
            values[i].data_mut()[j] = orig - h;
            let down = loss(values)?;
            values[i].data_mut()[j] = orig;
            n_all.push((up - down) / (2.0 * h));
            a_all.push(analytic[i][j]);
        }
    }
    Ok(relative_error(&a_all, &n_all))
}

/// Deterministic weights in `[-1, 1]` that turn a tensor output into a scalar.
fn probe(numel: usize) -> Tensor<f64> {
    Tensor::from_fn(&[numel], |i| ((i as f64 + 1.0) * 0.618_034).sin())
}

fn scalar_loss(
    f: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[n])?;
    let w = tape.constant(probe(n));
    let weighted = tape.mul(flat, w)?;
    let loss = tape.sum(weighted);
    Ok((tape, vars, loss))
}

/// Maximum relative error between the tape's gradient of `f` and central
/// differences with step `h`, over every input coordinate.
pub fn grad_check(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let (tape, vars, loss) = scalar_loss(&f, inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut values = inputs.to_vec();
    compare_with_finite_differences(
        &mut values,
        &analytic,
        |vals| {
            let (tape, _, loss) = scalar_loss(&f, vals)?;
            Ok(tape.value(loss).item())
        },
        h,
        Coords::All,
    )
}
