use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Checks every coordinate of every input. `f` must build a scalar on the tape
/// it is given; it is re-run from scratch for each perturbed evaluation.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone(), with_grad))
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(TensorError::dim(
                "grad_check",
                format!("function must be scalar, got {:?}", tape.value(out).shape()),
            )
            .into());
        }
        let y = tape.value(out).item();
        if !with_grad {
            return Ok((y, Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars
            .iter()
            .zip(values)
            .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((y, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for idx in 0..inputs[which].len() {
            let orig = inputs[which].data()[idx];
            work[which].data_mut()[idx] = orig + h;
            let (plus, _) = eval(&work, false)?;
            work[which].data_mut()[idx] = orig - h;
            let (minus, _) = eval(&work, false)?;
            work[which].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = which;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
