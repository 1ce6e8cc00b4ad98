//! Named parameter collections and derivative probes built on top of them.
//!
//! A [`ParamSet`] is an ordered list of named tensors with a stable
//! flatten/unflatten round-trip; optimizers work on the flat view, graph
//! builders on the named one. Hessian-vector products are computed by central
//! finite differences of the gradient, which keeps second-order information
//! available without a second tape sweep.

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Callback that evaluates the gradient of some scalar objective at a flat
/// parameter vector. All curvature probes are expressed against this.
pub type GradFn<'a> = dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Appends a named tensor. Names must be unique; order is significant and
    /// defines the flat layout.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidArg {
                ctx: "param_set",
                msg: format!("duplicate parameter name {name:?}"),
            });
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn dim(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.shape().len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Concatenates all tensors in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a set with this set's names and shapes from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.dim() {
            return Err(Error::InvalidArg {
                ctx: "param_set",
                msg: format!("flat length {} != dim {}", flat.len(), self.dim()),
            });
        }
        let mut out = ParamSet::new();
        let mut off = 0;
        for (name, t) in &self.entries {
            let n = t.shape().len();
            let mut copy = t.clone();
            copy.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            out.entries.push((name.clone(), copy));
        }
        Ok(out)
    }

    /// Overwrites values in place from a flat vector (no reallocation).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.dim() {
            return Err(Error::InvalidArg {
                ctx: "param_set",
                msg: format!("flat length {} != dim {}", flat.len(), self.dim()),
            });
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.shape().len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Central-difference gradient of a scalar function; the reference oracle the
/// tape is checked against. `h` is the absolute step per coordinate.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> Result<f64>, p: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; p.len()];
    let mut work = p.to_vec();
    for i in 0..p.len() {
        work[i] = p[i] + h;
        let fp = f(&work)?;
        work[i] = p[i] - h;
        let fm = f(&work)?;
        work[i] = p[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Hessian-vector product by central finite differences of the gradient:
/// `(g(p + eps v) - g(p - eps v)) / (2 eps)` with a scale-aware step
/// `eps = 1e-4 * (1 + max|p|)`. Exact for quadratics up to rounding.
pub fn hvp(grad_fn: &mut GradFn, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if p.len() != v.len() {
        return Err(Error::InvalidArg {
            ctx: "hvp",
            msg: format!("p has {} coords, v has {}", p.len(), v.len()),
        });
    }
    let pmax = p.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let eps = 1e-4 * (1.0 + pmax);

    let shifted = |sign: f64| -> Vec<f64> {
        p.iter().zip(v).map(|(pi, vi)| pi + sign * eps * vi).collect()
    };
    let gp = grad_fn(&shifted(1.0))?;
    let gm = grad_fn(&shifted(-1.0))?;
    if gp.len() != p.len() || gm.len() != p.len() {
        return Err(Error::InvalidArg {
            ctx: "hvp",
            msg: format!("grad_fn returned {} coords, expected {}", gp.len(), p.len()),
        });
    }
    if !gp.iter().chain(gm.iter()).all(|x| x.is_finite()) {
        return Err(Error::NonFiniteHvp { eps });
    }
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Shape;

    fn demo_set() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        p.push("b", Tensor::vector(vec![-1.0, 0.5])).unwrap();
        p.push("s", Tensor::scalar(7.0)).unwrap();
        p
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let p = demo_set();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.dim());
        let q = p.unflatten(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let p = demo_set();
        assert!(p.unflatten(&[0.0; 3]).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(0.0)).unwrap();
        assert!(p.push("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn hvp_on_quadratic_matches_matrix_product() {
        // L(x) = 0.5 x^T A x with symmetric A => H v = A v exactly.
        let a = [
            [2.0, 0.5, 0.0],
            [0.5, 3.0, -1.0],
            [0.0, -1.0, 1.5],
        ];
        let mut grad_fn = |x: &[f64]| -> Result<Vec<f64>> {
            Ok((0..3)
                .map(|i| (0..3).map(|j| a[i][j] * x[j]).sum())
                .collect())
        };
        let p = [0.3, -1.2, 0.7];
        let v = [1.0, 2.0, -0.5];
        let hv = hvp(&mut grad_fn, &p, &v).unwrap();
        for i in 0..3 {
            let want: f64 = (0..3).map(|j| a[i][j] * v[j]).sum();
            assert!((hv[i] - want).abs() < 1e-8, "{} vs {}", hv[i], want);
        }
    }

    #[test]
    fn hvp_is_linear_in_v() {
        let mut grad_fn = |x: &[f64]| -> Result<Vec<f64>> {
            // Gradient of sum(exp(x)); Hessian = diag(exp(x)).
            Ok(x.iter().map(|v| v.exp()).collect())
        };
        let p = [0.1, -0.4, 0.9];
        let v1 = [1.0, 0.0, 2.0];
        let v2 = [-0.5, 1.5, 0.25];
        let vsum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let h1 = hvp(&mut grad_fn, &p, &v1).unwrap();
        let h2 = hvp(&mut grad_fn, &p, &v2).unwrap();
        let hs = hvp(&mut grad_fn, &p, &vsum).unwrap();
        for i in 0..3 {
            assert!((hs[i] - (h1[i] + h2[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn hvp_reports_the_offending_eps_on_non_finite_gradients() {
        let mut grad_fn = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![f64::NAN]) };
        match hvp(&mut grad_fn, &[1.0], &[1.0]) {
            Err(Error::NonFiniteHvp { eps }) => {
                assert!((eps - 1e-4 * 2.0).abs() < 1e-18);
            }
            other => panic!("expected NonFiniteHvp, got {other:?}"),
        }
    }

    #[test]
    fn fd_grad_matches_analytic_on_smooth_function() {
        let mut f = |x: &[f64]| -> Result<f64> { Ok(x[0].sin() + x[0] * x[1]) };
        let p = [0.8, -0.3];
        let g = fd_grad(&mut f, &p, 1e-5).unwrap();
        assert!((g[0] - (p[0].cos() + p[1])).abs() < 1e-9);
        assert!((g[1] - p[0]).abs() < 1e-9);
    }

    #[test]
    fn param_shapes_survive_round_trip() {
        let p = demo_set();
        let q = p.unflatten(&vec![0.0; p.dim()]).unwrap();
        assert_eq!(q.get("w").unwrap().shape(), Shape::Matrix(2, 2));
        assert_eq!(q.get("b").unwrap().shape(), Shape::Vector(2));
        assert_eq!(q.get("s").unwrap().shape(), Shape::Scalar);
    }
}
