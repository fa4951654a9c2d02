//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively; central differences in f64 carry up to ~1e-9 of rounding
/// noise on losses of order 10.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare the reverse-mode gradient of scalar `f` at `inputs` against
/// central finite differences with step `epsilon`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.as_ref().map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Same check over every trainable parameter of a store. `f` receives the
/// graph and the bound parameters.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let bound = g.bind(s);
        let out = f(&mut g, &bound)?;
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::inference();
    let bound = g.bind(store);
    let out = f(&mut g, &bound)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Option<Vec<f64>>> = grads
        .for_params(&bound)
        .into_iter()
        .map(|g| g.map(<[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = store.clone();
    let names: Vec<(String, bool, usize)> = store
        .iter()
        .map(|p| (p.name.clone(), p.trainable, p.tensor.len()))
        .collect();
    for (i, (name, trainable, len)) in names.iter().enumerate() {
        if !trainable {
            continue;
        }
        for j in 0..*len {
            let param = probe.by_name_mut(name).expect("cloned store");
            let orig = param.tensor.data()[j];
            param.tensor.data_mut()[j] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.by_name_mut(name).expect("cloned store").tensor.data_mut()[j] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.by_name_mut(name).expect("cloned store").tensor.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let report = grad_check(|g, v| g.mul(v[0], v[0]), &[x], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert!(relative_error(1.0, 1.1) > 0.05);
        assert!(relative_error(0.0, 1e-12) < 1e-5);
        assert_eq!(relative_error(2.0, 2.0), 0.0);
    }
}
