use super::graph::{Graph, OpKind, Var};
use super::tensor::Tensor;

/// Largest relative disagreement between the backward-pass gradient of `f`
/// at `x` and central finite differences with step `eps`.
///
/// `f` builds a scalar from the leaf it is handed; the error per component
/// is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    grad_check_with_fault(f, x, eps, None)
}

/// [`grad_check`] with the backward rule of `fault` deliberately corrupted.
#[doc(hidden)]
pub fn grad_check_with_fault<F>(f: F, x: &Tensor<f64>, eps: f64, fault: Option<OpKind>) -> f64
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let mut graph = Graph::new();
    if let Some(kind) = fault {
        graph.inject_fault(kind);
    }
    let leaf = graph.param(x.clone());
    let loss = f(&mut graph, leaf);
    graph.backward(loss).expect("grad_check needs a scalar function");
    let analytic = graph.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor<f64>| {
        let mut g = Graph::no_grad();
        let v = g.constant(probe);
        let out = f(&mut g, v);
        g.value(out).data()[0]
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(probe.clone());
        probe.data_mut()[i] = orig - eps;
        let down = eval(probe.clone());
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
