use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::array::NdArray;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: BTreeMap<String, f64>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences of `f`.
///
/// `f` is re-evaluated with each scalar of each parameter perturbed by
/// ±`epsilon`; relative error per scalar is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    f: F,
    params: &BTreeMap<String, NdArray>,
    analytic: &BTreeMap<String, NdArray>,
    epsilon: f64,
) -> Result<GradReport>
where
    F: Fn(&BTreeMap<String, NdArray>) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut work = params.clone();
    let mut per = BTreeMap::new();
    let mut max_err: f64 = 0.0;
    for (name, value) in params {
        let zero = NdArray::zeros(value.shape());
        let agrad = analytic.get(name).unwrap_or(&zero);
        if !agrad.same_shape(value) {
            return Err(Error::ShapeMismatch(format!(
                "analytic gradient shape for {name}"
            )));
        }
        let mut worst = 0.0_f64;
        for i in 0..value.numel() {
            let orig = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + epsilon;
            let fp = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - epsilon;
            let fm = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("f under perturbation of {name}")));
            }
            let numeric = (fp - fm) / (2.0 * epsilon);
            worst = worst.max(relative_error(agrad.data()[i], numeric));
        }
        max_err = max_err.max(worst);
        per.insert(name.clone(), worst);
    }
    Ok(GradReport {
        max_relative_error: max_err,
        per_parameter_errors: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(x: NdArray) -> BTreeMap<String, NdArray> {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), x);
        m
    }

    #[test]
    fn linear_function_gradient_is_ones() {
        let params = named(NdArray::from_vec(&[3], vec![0.4, -1.2, 7.0]).unwrap());
        let analytic = named(NdArray::filled(&[3], 1.0));
        let rep = finite_diff_check(
            |p| Ok(p["x"].data().iter().sum()),
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_relative_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn quadratic_gradient_matches_analytic() {
        // f(x) = sum(x^2) at x = [1, 2] has gradient [2, 4].
        let params = named(NdArray::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let analytic = named(NdArray::from_vec(&[2], vec![2.0, 4.0]).unwrap());
        let rep = finite_diff_check(
            |p| Ok(p["x"].data().iter().map(|v| v * v).sum()),
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_relative_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn constant_function_passes() {
        let params = named(NdArray::from_vec(&[2], vec![3.0, -1.0]).unwrap());
        let analytic = named(NdArray::zeros(&[2]));
        let rep = finite_diff_check(|_| Ok(42.0), &params, &analytic, 1e-5).unwrap();
        assert!(rep.max_relative_error < 1e-12);
    }

    #[test]
    fn nonpositive_epsilon_rejected() {
        let params = named(NdArray::zeros(&[1]));
        assert!(finite_diff_check(|_| Ok(0.0), &params, &params.clone(), 0.0).is_err());
    }
}
