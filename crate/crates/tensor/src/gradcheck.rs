//! Central-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn eval_scalar<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| {
            if track {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::shape(
            "grad_check",
            format!("function must return a scalar, got {:?}", g.shape(out)),
        ));
    }
    if !g.value(out).is_finite() {
        return Err(TensorError::NonFinite {
            op: "grad_check".into(),
        });
    }
    Ok((g, vars, out))
}

/// Max over every element of every input of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_scaled(f, inputs, eps, 0.0)
}

/// Like [`grad_check_many`], but the denominator is also floored at
/// `rel_floor` times the largest analytic gradient magnitude of the same
/// input, so elements far below that scale are judged against it rather
/// than against their own rounding noise.
pub fn grad_check_scaled<F>(f: F, inputs: &[Tensor], eps: f64, rel_floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = eval_scalar(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        let floor = grads.iter().fold(1e-8_f64, |m, a| m.max(rel_floor * a.abs()));
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &probe, false)?;
            let fp = plus.0.value(plus.2).item();
            probe[t].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &probe, false)?;
            let fm = minus.0.value(minus.2).item();
            probe[t].data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = grads[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(input), eps)
}
