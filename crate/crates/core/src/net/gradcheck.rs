//! Central finite-difference check of [`Graph::backward`].

use super::tape::{Graph, NodeId};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so gradients that are zero on
/// both sides do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn evaluate<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    Ok(g.value(out).item())
}

/// Compares the tape gradient of the scalar graph `build(inputs)` against
/// central differences for every input element.
///
/// Fails with [`Error::GradCheckFailure`] when the worst relative error
/// `|a − n| / max(|a|, |n|, 1e-3)` exceeds `tolerance`.
pub fn grad_check<F>(inputs: &[Tensor], tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, id) in ids.iter().enumerate() {
        let analytic = g
            .grad(*id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        for e in 0..inputs[ti].len() {
            let x0 = inputs[ti].data()[e];
            work[ti].data_mut()[e] = x0 + STEP;
            let up = evaluate(&build, &work)?;
            work[ti].data_mut()[e] = x0 - STEP;
            let down = evaluate(&build, &work)?;
            work[ti].data_mut()[e] = x0;

            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = (ti, e);
            }
            report.checked += 1;
        }
    }
    if !(report.max_rel_error <= tolerance) {
        return Err(Error::GradCheckFailure {
            max_rel_error: report.max_rel_error,
            tolerance,
            location: format!("input {} element {}", report.worst.0, report.worst.1),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_a_smooth_function() {
        let x = Tensor::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let r = grad_check(&[x], 1e-6, |g, ids| {
            let t = g.tanh(ids[0]);
            let sq = g.mul(t, ids[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn reports_a_wrong_gradient() {
        // The scale op is detached through a constant copy: the tape sees
        // no dependency, the finite differences do.
        let x = Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap();
        let err = grad_check(&[x], 1e-4, |g, ids| {
            let copy = g.constant(g.value(ids[0]).clone());
            Ok(g.sum(copy))
        })
        .unwrap_err();
        assert!(matches!(err, Error::GradCheckFailure { .. }));
    }
}
