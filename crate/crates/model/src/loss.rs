//! Multi-resolution STFT magnitude loss.

use vah_core::signal::{stft, AudioClip, StftPlan};
use vah_fabric::{Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// `Σ_k mean |(|STFT_k(pred)| − |STFT_k(target)|)|` recorded on the tape.
pub fn mr_stft_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &[S],
    plans: &[StftPlan<S>],
) -> Result<Var> {
    if tape.value(pred).numel() != target.len() {
        return Err(Error::Input(format!(
            "prediction has {} samples, target {}",
            tape.value(pred).numel(),
            target.len()
        )));
    }
    let mut total: Option<Var> = None;
    for plan in plans {
        let p = tape.stft_magnitude(pred, plan)?;
        let shape = tape.shape(p).to_vec();
        let t = tape.constant(Tensor::new(&shape, plan.magnitude(target))?);
        let d = tape.sub(p, t)?;
        let d = tape.abs(d);
        let term = tape.mean(d);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("loss needs at least one resolution".into()))
}

/// Plain evaluation of the same objective with hop = window / 4.
pub fn mr_stft_loss(pred: &AudioClip, target: &AudioClip, windows: &[usize]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Input(format!("prediction has {} samples, target {}", pred.len(), target.len())));
    }
    let mut total = 0.0;
    for &w in windows {
        let a = stft(pred, w, w / 4)?.magnitude();
        let b = stft(target, w, w / 4)?.magnitude();
        total += a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
    }
    Ok(total)
}
