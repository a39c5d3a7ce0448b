use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub pass: bool,
}

/// Compares tape gradients of a scalar function against central finite
/// differences. The relative error of each coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::contract("grad_check: h must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    probe_value(&tape, root)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let eval_at = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut p = p.clone();
                if i == which {
                    p.data_mut()[coord] += delta;
                }
                tape.constant(p)
            })
            .collect();
        let root = f(&mut tape, &vars)?;
        probe_value(&tape, root)
    };

    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0;
    for (which, grads) in analytic.iter().enumerate() {
        for (coord, &a) in grads.iter().enumerate() {
            let plus = eval_at(which, coord, h)?;
            let minus = eval_at(which, coord, -h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((which, coord));
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coordinates,
        pass: max_rel_error < tol,
    })
}

fn probe_value(tape: &Tape, root: Var) -> Result<f64> {
    let v = tape
        .value(root)
        .item()
        .ok_or_else(|| Error::contract("grad_check: function must return a scalar"))?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("grad_check: f evaluated to {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
        let c = Tensor::vector(vec![3.0, 1.0, -2.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let c = tape.constant(c.clone());
                let p = tape.mul(vars[0], c)?;
                Ok(tape.sum(p))
            },
            &[w],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let x = Tensor::vector(vec![0.3, -0.7]).unwrap();
        let report = grad_check(
            |tape, vars| {
                // square with a VJP that is twice the true derivative
                let sq = tape.custom_unary(
                    vars[0],
                    |x| x.iter().map(|v| v * v).collect(),
                    Box::new(|x, _, g| x.iter().zip(g).map(|(x, g)| 2.0 * 2.0 * x * g).collect()),
                )?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_probe_is_a_numeric_error() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        let err = grad_check(
            |tape, vars| {
                let y = tape.custom_unary(
                    vars[0],
                    |x| x.iter().map(|v| 1.0 / v).collect(),
                    Box::new(|_, _, g| g.to_vec()),
                )?;
                Ok(tape.sum(y))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
