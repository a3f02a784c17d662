//! Central finite-difference checks of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates sitting on a kink (a max-type tie whose one-sided slopes
    /// disagree). They are reported but excluded from `max_rel_error`.
    pub flagged: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function evaluated to {v}")));
    }
    Ok(v)
}

/// Check the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// Check the gradient of a scalar function of several tensors, over every coordinate.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, inputs, h, &coords)
}

/// Check only the listed `(input, coordinate)` pairs; used for large parameter sets.
pub fn grad_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::Numeric(format!("function evaluated to {base}")));
    }
    let kinked = g.tie_count() > 0;
    let grads = g.backward(out)?;
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        flagged: Vec::new(),
    };
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let analytic = grads.get(vars[i]).expect("leaf gradient").data()[j];
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if kinked {
            let right = (plus - base) / h;
            let left = (base - minus) / h;
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
                report.flagged.push((i, j));
                continue;
            }
        }
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let r = grad_check(|g, x| Ok(g.sum_all(x)), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn softmax_cross_entropy() {
        let x = Tensor::from_vec(vec![0.2, -0.7, 1.5, 0.1]);
        let r = grad_check(
            |g, x| {
                let ls = g.log_softmax(x, 0)?;
                let pick = g.narrow(ls, 0, 2, 1)?;
                let s = g.sum_all(pick);
                Ok(g.neg(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn tie_point_is_flagged_not_failed() {
        let x = Tensor::from_vec(vec![2.0, 2.0, 1.0]);
        let r = grad_check(|g, x| g.max(x, 0), &x, 1e-5).unwrap();
        assert_eq!(r.flagged, vec![(0, 0), (0, 1)]);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let x = Tensor::from_vec(vec![0.0]);
        let err = grad_check(|g, x| {
            let l = g.log(x);
            Ok(g.sum_all(l))
        }, &x, 1e-5);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }
}
