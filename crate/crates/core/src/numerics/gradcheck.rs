//! Central finite differences, the independent oracle for `Graph::backward`.

use super::{Graph, NumericsError, Tensor, Var};

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad: step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖∞ / (‖b‖∞ + 1e-12)`, with `b` the reference.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    diff / (scale + 1e-12)
}

/// Compares autodiff against finite differences for a scalar function of
/// several tensors built on a fresh graph.
pub struct GradCheck<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    build: F,
    pub step: f64,
}

impl<F> GradCheck<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    pub fn new(build: F) -> Self {
        GradCheck { build, step: 1e-4 }
    }

    pub fn eval(&self, inputs: &[Tensor]) -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        Ok(g.value(out).item())
    }

    /// Autodiff gradients, one per input.
    pub fn analytic(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        g.backward(out)?;
        Ok(vars
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect())
    }

    /// Largest relative error over the inputs.
    pub fn max_error(&self, inputs: &[Tensor]) -> Result<f64, NumericsError> {
        Ok(self.errors(inputs)?.into_iter().fold(0.0, f64::max))
    }

    /// Relative error for each input.
    pub fn errors(&self, inputs: &[Tensor]) -> Result<Vec<f64>, NumericsError> {
        let analytic = self.analytic(inputs)?;
        let mut errs = Vec::with_capacity(inputs.len());
        for (k, a) in analytic.iter().enumerate() {
            let mut probe = inputs.to_vec();
            let fd = finite_diff_grad(
                |x| {
                    probe[k] = x.clone();
                    self.eval(&probe).expect("forward succeeded once")
                },
                &inputs[k],
                self.step,
            );
            errs.push(max_rel_error(a.data(), fd.data()));
        }
        Ok(errs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::from_fn(&[2, 3], |k| k as f64);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-4);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }
}
