//! Central-finite-difference validation of the backward pass.

use crate::error::{Error, Result};
use crate::tape::{backward, forward, Bindings, ParamStore, Tape};

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub enum GradCheck {
    /// Max relative error between analytic and finite-difference gradients
    /// over every element of every `requires_grad` parameter.
    Checked { max_rel_err: f64, elements: usize },
    /// A max-pool window held a near-tie at the evaluation point; the
    /// subgradient is ambiguous there, so the probe is excluded.
    TiePoint { gap: f64 },
}

impl GradCheck {
    pub fn max_rel_err(&self) -> Option<f64> {
        match self {
            GradCheck::Checked { max_rel_err, .. } => Some(*max_rel_err),
            GradCheck::TiePoint { .. } => None,
        }
    }
}

/// Compare `backward` against central finite differences at step `epsilon`.
///
/// Relative error per element is `|fd - an| / max(|fd|, |an|, 1)`. The
/// perturbed parameter values are realized in 32-bit storage and the
/// divisor uses the actually-realized difference, so the check stays exact
/// for linear maps.
pub fn grad_check(
    tape: &Tape,
    store: &ParamStore,
    inputs: &Bindings,
    loss: &str,
    epsilon: f64,
) -> Result<GradCheck> {
    if epsilon <= 0.0 || epsilon.is_nan() {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let checked_ids: Vec<usize> = store
        .iter()
        .filter(|(_, e)| e.tensor.requires_grad)
        .map(|(id, _)| id)
        .collect();
    if checked_ids.is_empty() {
        return Err(Error::DegenerateTape);
    }

    let base_pass = forward(tape, store, inputs)?;
    let tie_gap = base_pass.pool_tie_gap;
    if tie_gap < 10.0 * epsilon {
        return Ok(GradCheck::TiePoint { gap: tie_gap });
    }
    let analytic = backward(base_pass, store, loss)?;

    let mut work = store.clone();
    let mut max_rel_err = 0.0f64;
    let mut elements = 0usize;
    for &pid in &checked_ids {
        let an = analytic.get_f64(pid).into_owned();
        for i in 0..an.len() {
            let original = work.tensor(pid).data()[i];
            let plus = (original as f64 + epsilon) as f32;
            let minus = (original as f64 - epsilon) as f32;

            work.tensor_mut(pid).data_mut()[i] = plus;
            let loss_plus = forward(tape, &work, inputs)?.scalar(loss)?;
            work.tensor_mut(pid).data_mut()[i] = minus;
            let loss_minus = forward(tape, &work, inputs)?.scalar(loss)?;
            work.tensor_mut(pid).data_mut()[i] = original;

            let fd = (loss_plus - loss_minus) / (plus as f64 - minus as f64);
            let rel = (fd - an[i]).abs() / fd.abs().max(an[i].abs()).max(1.0);
            max_rel_err = max_rel_err.max(rel);
            elements += 1;
        }
    }
    Ok(GradCheck::Checked {
        max_rel_err,
        elements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{ParamGroup, PrimitiveOp};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_tape_is_exact_to_machine_precision() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = store.add(
            "w",
            Tensor::init_fan_in(&mut rng, &[3, 2], 3),
            ParamGroup::Weight,
        );
        let b = store.add("b", Tensor::uniform(&mut rng, &[2], 0.5), ParamGroup::Weight);
        let x = tape.input("x");
        let (wv, bv) = (tape.param(w), tape.param(b));
        let y = tape.affine(x, wv, bv);
        let loss = tape.mean(y, &[0, 1]);
        tape.mark_output("loss", loss);

        let inputs = Bindings::new().with("x", Tensor::uniform(&mut rng, &[4, 3], 1.0));
        let out = grad_check(&tape, &store, &inputs, "loss", 1e-4).unwrap();
        let err = out.max_rel_err().unwrap();
        assert!(err < 1e-9, "linear tape rel err {err}");
    }

    #[test]
    fn smooth_tape_within_tolerance() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = store.add(
            "w",
            Tensor::init_fan_in(&mut rng, &[4, 4], 4),
            ParamGroup::Weight,
        );
        let b = store.add("b", Tensor::uniform(&mut rng, &[4], 0.5), ParamGroup::Weight);
        let x = tape.input("x");
        let (wv, bv) = (tape.param(w), tape.param(b));
        let h = tape.affine(x, wv, bv);
        let t = tape.tanh(h);
        let s = tape.sigmoid(t);
        let loss = tape.mean(s, &[0, 1]);
        tape.mark_output("loss", loss);

        let inputs = Bindings::new().with("x", Tensor::uniform(&mut rng, &[2, 4], 1.0));
        let err = grad_check(&tape, &store, &inputs, "loss", 1e-4)
            .unwrap()
            .max_rel_err()
            .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn max_pool_tie_point_is_flagged() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        // all-equal input makes every pooling window a tie
        let p = store.add("p", Tensor::filled(&[1, 1, 2, 2], 1.0), ParamGroup::Weight);
        let pv = tape.param(p);
        let pooled = tape.apply(
            PrimitiveOp::MaxPool2d {
                kernel: 2,
                stride: 2,
                padding: 0,
            },
            &[pv],
        );
        let loss = tape.mean(pooled, &[0, 1, 2, 3]);
        tape.mark_output("loss", loss);

        let out = grad_check(&tape, &store, &Bindings::new(), "loss", 1e-4).unwrap();
        assert!(matches!(out, GradCheck::TiePoint { gap } if gap == 0.0));
    }

    #[test]
    fn degenerate_tape_is_an_error() {
        let mut tape = Tape::new();
        let store = ParamStore::new();
        let x = tape.input("x");
        let loss = tape.mean(x, &[0]);
        tape.mark_output("loss", loss);
        let inputs = Bindings::new().with("x", Tensor::filled(&[3], 1.0));
        assert!(matches!(
            grad_check(&tape, &store, &inputs, "loss", 1e-4),
            Err(Error::DegenerateTape)
        ));
    }
}
