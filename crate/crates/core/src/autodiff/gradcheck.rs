use super::graph::{Graph, OpKind, Var};
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central finite-difference check of one parameter's gradient.
///
/// `build` must construct the same scalar function on a fresh graph each
/// call (any randomness inside it must be reseeded). Returns the maximum
/// over coordinates of `|analytic - numeric| / max(1e-12, |numeric|)`.
pub fn finite_diff_check<T, F>(
    params: &mut ParameterSet<T>,
    name: &str,
    eps: f64,
    fault: Option<OpKind>,
    mut build: F,
) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParameterSet<T>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let len = params
        .get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
        .value
        .len();

    let mut graph = Graph::new().with_forced_param_grads().with_fault(fault);
    let out = build(&mut graph, params)?;
    if graph.value(out).len() != 1 {
        return Err(Error::shape(
            "finite_diff_check",
            format!("output must be scalar, got {:?}", graph.value(out).shape()),
        ));
    }
    graph.backward(out)?;
    let analytic: Vec<f64> = graph
        .param_grads()
        .find(|(n, _)| *n == name)
        .map(|(_, g)| g.iter().map(|x| x.as_f64()).collect())
        .unwrap_or_else(|| vec![0.0; len]);

    let mut eval = |params: &ParameterSet<T>| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, params)?;
        Ok(g.value(out).data()[0].as_f64())
    };

    let mut worst = 0.0f64;
    for i in 0..len {
        let original = params.get(name).expect("present").value.data()[i];
        let step = T::of(eps);
        params.get_mut(name).expect("present").value.data_mut()[i] = original + step;
        let plus = eval(params)?;
        params.get_mut(name).expect("present").value.data_mut()[i] = original - step;
        let minus = eval(params)?;
        params.get_mut(name).expect("present").value.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("x", Tensor::vector(vec![0.3, -1.2, 2.5]));
        let err = finite_diff_check(&mut ps, "x", 1e-5, None, |g, p| {
            let x = g.param(p, "x")?;
            g.weighted_sum(x, vec![1.5, -2.0, 0.25])
        })
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let r = finite_diff_check(&mut ps, "x", 1e-5, None, |g, p| {
            let x = g.param(p, "x")?;
            Ok(g.relu(x))
        });
        assert!(r.is_err());
    }

    #[test]
    fn step_outside_range_rejected() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("x", Tensor::scalar(1.0));
        assert!(finite_diff_check(&mut ps, "x", 1e-2, None, |g, p| g.param(p, "x")).is_err());
    }
}
