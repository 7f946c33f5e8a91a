use super::{HasParams, Tape, Var};
use crate::{Error, Result};

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, analytic.abs() + numeric.abs())
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many entries per parameter, evenly strided.
    /// `None` checks everything.
    pub max_entries_per_param: Option<usize>,
    /// Skip frozen parameters.
    pub trainable_only: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_entries_per_param: None,
            trainable_only: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum was reached.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares tape gradients of `f` against central finite differences over
/// every parameter of `model`.
///
/// `f` must rebuild its computation on the tape it is handed, binding
/// parameters through [`Tape::param`]. Values are perturbed in place and
/// restored bit-exactly afterwards.
pub fn gradient_check<M, F>(model: &mut M, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: HasParams,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::Invalid(format!(
            "step must be positive, got {}",
            opts.step
        )));
    }
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(m, &mut tape)?;
        let v = tape.value(loss)?;
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let first = eval(model)?;
    let second = eval(model)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    model.params_mut().zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(model, &mut tape)?;
        tape.backward(loss, model.params_mut())?;
    }
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad().data().to_vec())
        .collect();
    model.params_mut().zero_grad();

    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for pi in 0..model.params().len() {
        let id = super::ParamId(pi);
        let (len, frozen, name) = {
            let p = model.params().get(id);
            (p.len(), p.frozen, p.name().to_string())
        };
        if opts.trainable_only && frozen {
            continue;
        }
        let stride = match opts.max_entries_per_param {
            Some(cap) if cap > 0 && len > cap => len.div_ceil(cap),
            _ => 1,
        };
        for k in (0..len).step_by(stride) {
            let orig = model.params().get(id).value().data()[k];
            model.params_mut().get_mut(id).value_mut()[k] = orig + h;
            let plus = eval(model);
            model.params_mut().get_mut(id).value_mut()[k] = orig - h;
            let minus = eval(model);
            model.params_mut().get_mut(id).value_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = relative_error(analytic[pi][k], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((name.clone(), k));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Parameter, Tensor};

    fn store_with(name: &str, values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add(Parameter::new(name, Tensor::new(vec![n], values).unwrap()))
            .unwrap();
        s
    }

    #[test]
    fn exact_quadratic() {
        let mut s = store_with("x", vec![3.0]);
        let r = gradient_check(
            &mut s,
            |m, t| {
                let x = t.param(m, crate::tensor::ParamId(0));
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn tanh_chain() {
        let mut s = store_with("x", vec![0.5]);
        let r = gradient_check(
            &mut s,
            |m, t| {
                let x = t.param(m, crate::tensor::ParamId(0));
                let a = t.tanh(x)?;
                let b = t.scale(a, 2.0)?;
                let c = t.tanh(b)?;
                t.sum(c)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let mut s = store_with("x", vec![1.0]);
        let counter = Cell::new(0.0);
        let err = gradient_check(
            &mut s,
            |m, t| {
                counter.set(counter.get() + 1.0);
                let x = t.param(m, crate::tensor::ParamId(0));
                let c = t.constant(Tensor::scalar(counter.get()));
                let y = t.mul(x, c)?;
                t.sum(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn values_restored_after_check() {
        let mut s = store_with("x", vec![0.1, -0.2, 0.3]);
        let before = s.get(crate::tensor::ParamId(0)).value().clone();
        gradient_check(
            &mut s,
            |m, t| {
                let x = t.param(m, crate::tensor::ParamId(0));
                let y = t.tanh(x)?;
                t.sum(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(s.get(crate::tensor::ParamId(0)).value().bit_eq(&before));
    }
}
