use crate::{AdError, NodeId, Result, Tape, Tensor};

/// Outcome of comparing tape gradients to central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat entry)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, NodeId, Vec<NodeId>)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    Ok((tape, loss, ids))
}

fn scalar_value(tape: &Tape, loss: NodeId) -> Result<f64> {
    let v = tape.value(loss);
    v.item().ok_or_else(|| AdError::NonScalarLoss(v.shape().to_vec()))
}

/// Compares the tape gradient of `f` against the central difference
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every entry of every parameter.
///
/// Per entry the error is `|g_tape − g_fd| / max(|g_tape|, |g_fd|, 1e-8)`;
/// the report carries the maximum.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(AdError::InvalidEps(eps));
    }
    let (tape, loss, ids) = evaluate(&f, params)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut probe = params.to_vec();
    for (p, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("every param has a gradient");
        for index in 0..params[p].len() {
            let original = params[p].data()[index];
            let mut side = |delta: f64| -> Result<f64> {
                probe[p]
                    .set(index, original + delta)
                    .map_err(|_| AdError::ProbeNonFinite { param: p, index })?;
                let value = evaluate(&f, &probe)
                    .and_then(|(t, l, _)| scalar_value(&t, l))
                    .map_err(|_| AdError::ProbeNonFinite { param: p, index });
                probe[p].set(index, original).expect("original value is finite");
                value
            };
            let plus = side(eps)?;
            let minus = side(-eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let tape_grad = analytic.data()[index];
            let denom = tape_grad.abs().max(numeric.abs()).max(1e-8);
            let rel = (tape_grad - numeric).abs() / denom;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((p, index));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
