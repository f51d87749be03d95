use super::{Array, NumericsError, Result, Tape, Var};

/// Evaluates `program` on a fresh tape with `inputs` recorded as constants.
pub fn eval_graph<T, F>(inputs: &[(&str, Array<T>)], program: F) -> Result<Array<T>>
where
    T: super::Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, a)| tape.constant(a.clone())).collect();
    let out = program(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Maximum relative error between analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_input: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_input
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    }
}

fn run_scalar<F>(inputs: &[(String, Array<f64>)], program: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, a)| tape.param(a.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(NumericsError::NonScalarOutput(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of a scalar program against central
/// differences with the given step.
///
/// Error per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`;
/// the report holds the maximum over each input's coordinates.
pub fn finite_diff_check<F>(program: F, inputs: &[(&str, Array<f64>)], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&step) {
        return Err(NumericsError::InvalidStep(step));
    }
    let mut owned: Vec<(String, Array<f64>)> =
        inputs.iter().map(|(n, a)| (n.to_string(), a.clone())).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = owned.iter().map(|(_, a)| tape.param(a.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Array<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut per_input = Vec::with_capacity(owned.len());
    for k in 0..owned.len() {
        let mut worst = 0.0f64;
        for j in 0..owned[k].1.len() {
            let orig = owned[k].1.data()[j];
            owned[k].1.data_mut()[j] = orig + step;
            let up = run_scalar(&owned, &program)?;
            owned[k].1.data_mut()[j] = orig - step;
            let down = run_scalar(&owned, &program)?;
            owned[k].1.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
        per_input.push((owned[k].0.clone(), worst));
    }
    Ok(GradCheckReport { per_input })
}
