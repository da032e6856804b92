//! Central finite differences against the tape's analytic gradients.

use super::{Graph, Result, Tensor, Var};

/// Worst disagreement between two gradient sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (tensor, element) of the largest relative error.
    pub worst: Option<(usize, usize)>,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps entries
/// whose true gradient is zero from dividing rounding noise by itself.
pub fn compare_gradients(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>], floor: f64) -> GradCheck {
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    for (t, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (x - y).abs();
            let rel = abs / x.abs().max(y.abs()).max(floor);
            out.checked += 1;
            out.max_abs_error = out.max_abs_error.max(abs);
            if !(rel <= out.max_rel_error) {
                out.max_rel_error = rel;
                out.worst = Some((t, i));
            }
        }
    }
    out
}

/// Gradient of `f` at `params` by central differences with step `eps`.
pub fn finite_difference<E>(
    params: &mut [Tensor<f64>],
    eps: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> std::result::Result<f64, E>,
) -> std::result::Result<Vec<Tensor<f64>>, E> {
    let mut grads = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Tensor::zeros(params[t].shape());
        for i in 0..params[t].numel() {
            let orig = params[t].data()[i];
            params[t].data_mut()[i] = orig + eps;
            let up = f(params)?;
            params[t].data_mut()[i] = orig - eps;
            let down = f(params)?;
            params[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Builds `f` over fresh parameter leaves, backpropagates, and compares with
/// finite differences of the same function.
pub fn check_graph_fn(
    inputs: &[Tensor<f64>],
    eps: f64,
    floor: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |xs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = if grad { Graph::new() } else { Graph::no_grad() };
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        g.backward(out)?;
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut params = inputs.to_vec();
    let numeric = finite_difference(&mut params, eps, |xs| eval(xs, false).map(|r| r.0))?;
    Ok(compare_gradients(&analytic, &numeric, floor))
}
