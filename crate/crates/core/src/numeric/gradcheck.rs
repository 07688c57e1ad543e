use super::{BoundParams, NumericError, ParamStore, Tape, Tensor, Var};

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Parameter name and flat index for each checked coordinate.
    pub coordinates: Vec<(String, usize)>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, Option<usize>) {
    let mut worst = (0.0, None);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if worst.1.is_none() || e > worst.0 {
            worst = (e, Some(i));
        }
    }
    worst
}

/// Gradient check of a scalar function of `params`.
pub fn grad_check<F, E>(f: F, params: &ParamStore, step: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&Tape, &BoundParams) -> Result<Var, E>,
    E: From<NumericError>,
{
    grad_check_pinned(|t, p| f(t, p).map(|v| (v, Vec::new())), params, step)
}

/// Gradient check for functions with discrete internal decisions.
///
/// `f` returns the loss plus a pattern of discrete choices (for example the
/// halting step counts). The pattern at every perturbed point must equal the
/// pattern at the base point, otherwise the finite difference straddles a
/// discontinuity and the check fails with [`NumericError::PatternFlip`].
pub fn grad_check_pinned<F, E>(f: F, params: &ParamStore, step: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&Tape, &BoundParams) -> Result<(Var, Vec<usize>), E>,
    E: From<NumericError>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(NumericError::BadStep(step).into());
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (loss, pattern) = f(&tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic_store = bound.gradients(&grads)?;

    let eval = |store: &ParamStore, name: &str, index: usize| -> Result<f64, E> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (loss, p) = f(&tape, &bound)?;
        if p != pattern {
            return Err(NumericError::PatternFlip {
                name: name.to_string(),
                index,
            }
            .into());
        }
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(NumericError::NonFiniteAt {
                name: name.to_string(),
                index,
            }
            .into());
        }
        Ok(v)
    };

    let mut coordinates = Vec::new();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, tensor) in params.iter() {
        let ga = analytic_store.get(name).expect("bound parameter");
        for i in 0..tensor.len() {
            let shifted = |delta: f64| -> ParamStore {
                let mut data = tensor.to_vec();
                data[i] += delta;
                let mut s = params.clone();
                s.insert(name, Tensor::from_parts(tensor.shape().to_vec(), data));
                s
            };
            let plus = eval(&shifted(step), name, i)?;
            let minus = eval(&shifted(-step), name, i)?;
            coordinates.push((name.to_string(), i));
            analytic.push(ga.data()[i]);
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    let (max_rel_error, worst) = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        worst: worst.map(|i| coordinates[i].clone()),
        coordinates,
        analytic,
        numeric,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(values));
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let params = store(&[0.3, -1.2, 2.0]);
        let report = grad_check(
            |t: &Tape, p: &BoundParams| -> Result<Var, NumericError> {
                let x = p.get("x")?;
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = store(&[1.0, 2.0]);
        let report = grad_check(
            |t: &Tape, _p: &BoundParams| -> Result<Var, NumericError> {
                Ok(t.constant(Tensor::scalar(4.0)))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report
            .analytic
            .iter()
            .chain(&report.numeric)
            .all(|&v| v == 0.0));
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let params = store(&[1.0]);
        let r = grad_check(
            |t: &Tape, p: &BoundParams| -> Result<Var, NumericError> { t.sum(p.get("x")?) },
            &params,
            1e-2,
        );
        assert!(matches!(r, Err(NumericError::BadStep(_))));
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let params = store(&[1e-6, 1.0]);
        let r = grad_check(
            |t: &Tape, p: &BoundParams| -> Result<Var, NumericError> {
                let x = p.get("x")?;
                let first = t.pick(x, 0)?;
                // 1 / x^k overflows quickly near zero
                let l = t.log(first)?;
                let e = t.scale(l, 1e300)?;
                let e = t.mul(e, e)?;
                t.sum(e)
            },
            &params,
            1e-5,
        );
        match r {
            Err(NumericError::NonFiniteAt { name, index }) => {
                assert_eq!(name, "x");
                assert_eq!(index, 0);
            }
            Err(NumericError::Domain { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
