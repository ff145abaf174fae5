use super::{Result, Tape, Tensor, TensorError, Var};

/// Denominator floor for relative errors, so entries whose true gradient is
/// essentially zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per input; `None` for inputs that were frozen.
    pub max_rel_error: Vec<Option<f64>>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Worst relative error over all checked inputs.
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().flatten().copied().fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor], trainable: &[bool]) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(trainable)
        .map(|(t, &g)| tape.leaf(t.clone(), g))
        .collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)
}

fn scalar_of(tape: &Tape<'_>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Checks the tape's gradients of a scalar function `f` against central
/// differences with step `h`.
///
/// Inputs marked non-trainable are recorded without gradient and skipped.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    trainable: &[bool],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if inputs.len() != trainable.len() {
        return Err(TensorError::Contract(
            "grad_check: one trainable flag per input required".into(),
        ));
    }
    if !(h > 0.0) {
        return Err(TensorError::Contract("grad_check: step must be positive".into()));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(trainable)
        .map(|(t, &g)| tape.leaf(t.clone(), g))
        .collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut perturbed = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        if !trainable[k] {
            max_rel_error.push(None);
            continue;
        }
        let zeros = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zeros).data().to_vec();
        let mut worst: f64 = 0.0;
        for j in 0..inputs[k].numel() {
            let orig = inputs[k].data()[j];
            perturbed[k].data_mut()[j] = orig + h;
            let plus = evaluate(&f, &perturbed, trainable)?;
            perturbed[k].data_mut()[j] = orig - h;
            let minus = evaluate(&f, &perturbed, trainable)?;
            perturbed[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error.push(Some(worst));
    }
    let passed = max_rel_error.iter().flatten().all(|e| *e <= tol);
    Ok(GradCheckReport {
        max_rel_error,
        tolerance: tol,
        passed,
    })
}
