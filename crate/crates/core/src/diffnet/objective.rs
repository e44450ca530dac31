use super::params::ParamVector;
use crate::error::{Error, Result};

/// A differentiable scalar function of a parameter vector.
pub trait ScalarObjective {
    fn value(&self, at: &ParamVector) -> Result<f64>;
    fn gradient(&self, at: &ParamVector) -> Result<ParamVector>;
}

/// Adapter turning a (value, gradient) closure pair into a [`ScalarObjective`].
pub struct FnObjective<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> ScalarObjective for FnObjective<F, G>
where
    F: Fn(&ParamVector) -> f64,
    G: Fn(&ParamVector) -> ParamVector,
{
    fn value(&self, at: &ParamVector) -> Result<f64> {
        Ok((self.value)(at))
    }

    fn gradient(&self, at: &ParamVector) -> Result<ParamVector> {
        Ok((self.gradient)(at))
    }
}

/// Gradient of `f` at `at`, rejecting non-finite entries.
pub fn grad_scalar<F: ScalarObjective + ?Sized>(f: &F, at: &ParamVector) -> Result<ParamVector> {
    let g = f.gradient(at)?;
    if let Some(i) = g.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("gradient entry {i}")));
    }
    Ok(g)
}

/// Hessian-vector product `[grad^2 g(at)] v`, computed as the central
/// difference of exact gradients along `v` with step `1e-4 / |v|`.
pub fn hvp<F: ScalarObjective + ?Sized>(g: &F, at: &ParamVector, v: &[f64]) -> Result<ParamVector> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateDirection);
    }
    let eps = 1e-4 / norm;
    let up = grad_scalar(g, &at.add_scaled(eps, v))?;
    let down = grad_scalar(g, &at.add_scaled(-eps, v))?;
    let values = up
        .values()
        .iter()
        .zip(down.values())
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect();
    Ok(at.with_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Layout;

    fn pv(values: Vec<f64>) -> ParamVector {
        let mut l = Layout::new();
        l.push("x", vec![values.len()]);
        ParamVector::new(l, values).unwrap()
    }

    fn half_sq() -> FnObjective<impl Fn(&ParamVector) -> f64, impl Fn(&ParamVector) -> ParamVector> {
        FnObjective {
            value: |p: &ParamVector| 0.5 * p.dot(p),
            gradient: |p: &ParamVector| p.clone(),
        }
    }

    #[test]
    fn quadratic_gradient() {
        let g = grad_scalar(&half_sq(), &pv(vec![1.0, 2.0])).unwrap();
        assert_eq!(g.values(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let f = FnObjective {
            value: |_: &ParamVector| 3.0,
            gradient: |p: &ParamVector| ParamVector::zeros(p.layout().clone()),
        };
        let g = grad_scalar(&f, &pv(vec![0.3, -2.0, 5.0])).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_gradient_is_error() {
        let f = FnObjective {
            value: |_: &ParamVector| 0.0,
            gradient: |p: &ParamVector| p.with_values(vec![f64::NAN; p.len()]),
        };
        assert!(matches!(grad_scalar(&f, &pv(vec![1.0])), Err(Error::Numeric(_))));
    }

    #[test]
    fn identity_hessian() {
        let h = hvp(&half_sq(), &pv(vec![0.4, -1.0]), &[0.3, 0.7]).unwrap();
        assert!((h.values()[0] - 0.3).abs() < 1e-10);
        assert!((h.values()[1] - 0.7).abs() < 1e-10);
    }

    #[test]
    fn diagonal_quadratic() {
        let f = FnObjective {
            value: |p: &ParamVector| 0.5 * (2.0 * p.values()[0].powi(2) + 4.0 * p.values()[1].powi(2)),
            gradient: |p: &ParamVector| p.with_values(vec![2.0 * p.values()[0], 4.0 * p.values()[1]]),
        };
        let h = hvp(&f, &pv(vec![0.0, 0.0]), &[1.0, 1.0]).unwrap();
        assert!((h.values()[0] - 2.0).abs() < 1e-10);
        assert!((h.values()[1] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn zero_direction_rejected() {
        assert!(matches!(
            hvp(&half_sq(), &pv(vec![1.0, 1.0]), &[0.0, 0.0]),
            Err(Error::DegenerateDirection)
        ));
    }
}
