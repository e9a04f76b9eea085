//! Central finite-difference verification of analytic gradients.

use super::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued graph construction checked by [`grad_check`]: given a
/// graph and one variable per input tensor, builds and returns the output.
pub type ScalarFn<T> = dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>;

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all input elements.
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at the worst element.
    pub worst_pair: (f64, f64),
    /// Total number of elements compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Worst relative error between paired gradient tensors.
pub fn max_relative_error<T: Element>(
    analytic: &[Tensor<T>],
    numeric: &[Tensor<T>],
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data().iter()).enumerate() {
            let (av, nv) = (av.to_f64(), nv.to_f64());
            let e = relative_error(av, nv);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (i, j);
                report.worst_pair = (av, nv);
            }
        }
    }
    report
}

fn eval_scalar<T: Element>(
    f: &ScalarFn<T>,
    inputs: &[Tensor<T>],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item()?.to_f64())
}

/// Analytic gradients of a scalar-valued graph function w.r.t. each input.
pub fn analytic_gradients<T: Element>(
    f: &ScalarFn<T>,
    inputs: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::InvalidArg("grad_check target must be scalar".into()));
    }
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Central finite-difference gradients, one forward pair per element.
pub fn numeric_gradients<T: Element>(
    f: &ScalarFn<T>,
    inputs: &[Tensor<T>],
    epsilon: f64,
) -> Result<Vec<Tensor<T>>> {
    let eps = T::from_f64(epsilon);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval_scalar(f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval_scalar(f, &work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = T::from_f64((plus - minus) / (2.0 * epsilon));
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Compare the analytic gradient of a scalar graph function against central
/// finite differences at every element of every input.
pub fn grad_check<T: Element>(
    f: &ScalarFn<T>,
    inputs: &[Tensor<T>],
    epsilon: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(f, inputs)?;
    let numeric = numeric_gradients(f, inputs, epsilon)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_has_zero_error() {
        // dyadic values and a power-of-two step keep the central difference
        // exact, so the error is zero rather than merely tiny
        let f = |g: &mut Graph<f64>, v: &[Var]| Ok(g.sum(v[0]));
        let input = Tensor::from_vec(&[4], vec![0.25, -1.25, 2.0, 0.75]).unwrap();
        let report = grad_check(&f, &[input], 0.000244140625).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn sigmoid_sum_passes_tightly() {
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.sigmoid(v[0]);
            Ok(g.sum(s))
        };
        let input = Tensor::from_vec(&[5], vec![0.5, -0.25, 1.5, -2.0, 0.05]).unwrap();
        let report = grad_check(&f, &[input], 1e-4).unwrap();
        assert!(report.max_rel_err < 1e-6, "err = {}", report.max_rel_err);
    }

    #[test]
    fn doubled_analytic_gradient_is_flagged_near_one_third() {
        // a = 2n gives |a-n|/(|a|+|n|) = 1/3
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.sigmoid(v[0]);
            Ok(g.sum(s))
        };
        let input = Tensor::from_vec(&[3], vec![0.4, -0.9, 1.1]).unwrap();
        let mut analytic = analytic_gradients(&f, std::slice::from_ref(&input)).unwrap();
        for v in analytic[0].data_mut() {
            *v *= 2.0;
        }
        let numeric = numeric_gradients(&f, &[input], 1e-4).unwrap();
        let report = max_relative_error(&analytic, &numeric);
        assert!(
            (report.max_rel_err - 1.0 / 3.0).abs() < 1e-3,
            "err = {}",
            report.max_rel_err
        );
    }
}
