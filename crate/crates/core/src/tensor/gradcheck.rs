use super::{Graph, Tensor, TensorError, Var};

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|)
/// for a scalar function of one parameter tensor.
pub fn finite_difference_check<F>(f: F, params: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    finite_difference_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(params), step)
}

/// Same check over several parameter tensors at once.
pub fn finite_difference_check_many<F>(
    f: F,
    params: &[Tensor],
    step: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::Invalid(format!("step must be positive, got {step}")));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(TensorError::NonFinite { index: 0, value: base });
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    let mut flat = 0;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            for v in [up, down] {
                if !v.is_finite() {
                    return Err(TensorError::NonFinite { index: flat, value: v });
                }
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            flat += 1;
        }
    }
    Ok(worst)
}
