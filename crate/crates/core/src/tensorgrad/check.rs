use crate::error::{Error, Result};

use super::{NodeId, Real, Tape};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Leaf and flat index of the worst entry.
    pub worst: Option<(NodeId, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|)`, defined as 0 when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the reverse-mode gradient of `loss` against central
/// differences at the listed `(leaf, flat index)` entries.
///
/// Leaves are restored and the tape replayed before returning.
pub fn finite_difference_check<T: Real>(
    tape: &mut Tape<T>,
    loss: NodeId,
    entries: &[(NodeId, usize)],
    step: f64,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let grads = tape.backward(loss)?;
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &(leaf, index) in entries {
        let original = tape.value(leaf).clone();
        if index >= original.len() {
            return Err(Error::invalid(format!(
                "entry {index} out of range for leaf {}",
                leaf.index()
            )));
        }
        let analytic = grads
            .get(leaf)
            .ok_or_else(|| Error::invalid(format!("node {} is not a leaf", leaf.index())))?
            .data()[index]
            .as_f64();

        let mut eval_at = |delta: f64| -> Result<f64> {
            let mut v = original.clone();
            let x = v.data()[index].as_f64();
            v.data_mut()[index] = T::lit(x + delta);
            tape.set_value(leaf, v)?;
            tape.replay()?;
            Ok(tape.value(loss).data()[0].as_f64())
        };
        let plus = eval_at(step)?;
        let minus = eval_at(-step)?;
        tape.set_value(leaf, original)?;
        let numeric = (plus - minus) / (2.0 * step);

        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((leaf, index));
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    tape.replay()?;
    Ok(report)
}
