use crate::error::{Error, Result};

use super::{Param, Tape, Val};

/// Per-group worst relative errors from [`grad_check_named`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<(String, f64)>,
    pub max_error: f64,
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` must deterministically rebuild the forward pass on the given tape,
/// leasing each of `params` itself (directly or through a model). Returns
/// the maximum over all coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Param], h: f64) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Val>,
{
    let named: Vec<(String, Param)> = params
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("p{i}"), p.clone()))
        .collect();
    grad_check_named(f, &named, h).map(|r| r.max_error)
}

/// [`grad_check`] with parameters grouped by name for reporting.
pub fn grad_check_named<F>(f: F, params: &[(String, Param)], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape) -> Result<Val>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Contract(format!("grad_check: h = {h} outside (0, 1e-3]")));
    }

    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Contract("grad_check: f must return a scalar".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(name, p)| {
            p.grad_vec().ok_or_else(|| {
                Error::Contract(format!("grad_check: parameter {name} not leased by f"))
            })
        })
        .collect::<Result<_>>()?;

    let eval = |params_to_reset: &[(String, Param)]| -> Result<f64> {
        for (_, p) in params_to_reset {
            p.zero_grad();
        }
        let tape = Tape::new();
        let loss = f(&tape)?;
        let v = tape.value_scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: f evaluated to {v}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport { groups: Vec::new(), max_error: 0.0 };
    for (gi, (name, p)) in params.iter().enumerate() {
        let mut worst = 0.0_f64;
        for j in 0..p.numel() {
            let orig = p.borrow().data()[j];
            p.borrow_mut().data_mut()[j] = orig + h;
            let plus = eval(params)?;
            p.borrow_mut().data_mut()[j] = orig - h;
            let minus = eval(params)?;
            p.borrow_mut().data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[gi][j];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        report.groups.push((name.clone(), worst));
        report.max_error = report.max_error.max(worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(data: Vec<f64>) -> Param {
        let n = data.len();
        Param::new(Tensor::new(vec![n], data).unwrap())
    }

    #[test]
    fn quadratic_matches_central_difference() {
        let p = param(vec![1.0, 2.0, 3.0]);
        let f = {
            let p = p.clone();
            move |t: &Tape| -> Result<Val> {
                let v = t.param(&p);
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            }
        };
        let err = grad_check(f, std::slice::from_ref(&p), 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn linear_is_near_exact() {
        let p = param(vec![0.4, -0.8]);
        let f = {
            let p = p.clone();
            move |t: &Tape| -> Result<Val> {
                let v = t.param(&p);
                Ok(t.sum(v))
            }
        };
        let err = grad_check(f, std::slice::from_ref(&p), 1e-5).unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn step_size_contract_is_enforced() {
        let p = param(vec![1.0]);
        let f = {
            let p = p.clone();
            move |t: &Tape| -> Result<Val> {
                let v = t.param(&p);
                Ok(t.sum(v))
            }
        };
        assert!(grad_check(&f, std::slice::from_ref(&p), 0.0).is_err());
        assert!(grad_check(&f, std::slice::from_ref(&p), 1e-2).is_err());
    }

    #[test]
    fn every_registered_op_passes_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);

        // One scalar-valued composition per op, on small random tensors.
        type Builder = fn(&Tape, Val) -> Result<Val>;
        let cases: Vec<(&str, Builder)> = vec![
            ("matmul", |t, v| {
                let m = t.reshape(v, vec![2, 2])?;
                let prod = t.matmul(m, m)?;
                Ok(t.sum(prod))
            }),
            ("transpose", |t, v| {
                let m = t.reshape(v, vec![2, 2])?;
                let mt = t.transpose(m)?;
                let prod = t.matmul(m, mt)?;
                Ok(t.sum(prod))
            }),
            ("add", |t, v| {
                let e = t.exp(v);
                let s = t.add(v, e)?;
                Ok(t.sum(s))
            }),
            ("add_bias", |t, v| {
                let m = t.reshape(v, vec![2, 2])?;
                let b = t.gather(v, &[0, 3])?;
                let out = t.add_bias(m, b)?;
                let sq = t.mul(out, out)?;
                Ok(t.sum(sq))
            }),
            ("mul", |t, v| {
                let e = t.exp(v);
                let m = t.mul(v, e)?;
                Ok(t.sum(m))
            }),
            ("mul_scalar", |t, v| {
                let s = t.gather(v, &[1])?;
                let out = t.mul_scalar(v, s)?;
                Ok(t.sum(out))
            }),
            ("add_scalar", |t, v| {
                let s = t.gather(v, &[2])?;
                let out = t.add_scalar(v, s)?;
                let sq = t.mul(out, out)?;
                Ok(t.sum(sq))
            }),
            ("scale", |t, v| {
                let out = t.scale(v, -1.7);
                let sq = t.mul(out, out)?;
                Ok(t.sum(sq))
            }),
            ("pow_const", |t, v| {
                let pos = t.exp(v);
                let shifted = t.add_const(pos, 1.0);
                let out = t.pow_const(shifted, 1.8)?;
                Ok(t.sum(out))
            }),
            ("relu", |t, v| {
                let out = t.relu(v);
                let sq = t.mul(out, out)?;
                Ok(t.sum(sq))
            }),
            ("leaky_relu", |t, v| {
                let out = t.leaky_relu(v, 0.2);
                let sq = t.mul(out, out)?;
                Ok(t.sum(sq))
            }),
            ("exp_log", |t, v| {
                let e = t.exp(v);
                let l = t.log(e)?;
                let sq = t.mul(l, l)?;
                Ok(t.sum(sq))
            }),
            ("mean", |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.mean(sq))
            }),
            ("softmax", |t, v| {
                let s = t.softmax(v, 0)?;
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            }),
            ("log_softmax", |t, v| {
                let s = t.log_softmax(v, 0)?;
                let picked = t.gather(s, &[0, 2])?;
                Ok(t.sum(picked))
            }),
            ("concat_rows", |t, v| {
                let m = t.reshape(v, vec![2, 2])?;
                let mt = t.transpose(m)?;
                let c = t.concat(&[m, mt], 0)?;
                let sq = t.mul(c, c)?;
                Ok(t.sum(sq))
            }),
            ("concat_cols", |t, v| {
                let m = t.reshape(v, vec![2, 2])?;
                let mt = t.transpose(m)?;
                let c = t.concat(&[m, mt], 1)?;
                let sq = t.mul(c, c)?;
                Ok(t.sum(sq))
            }),
            ("gather_rows", |t, v| {
                let m = t.reshape(v, vec![2, 2])?;
                let g = t.gather_rows(m, &[1, 0, 1])?;
                let sq = t.mul(g, g)?;
                Ok(t.sum(sq))
            }),
        ];

        for (name, build) in cases {
            for _ in 0..4 {
                let data: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let p = Param::new(Tensor::new(vec![4], data).unwrap());
                let f = {
                    let p = p.clone();
                    move |t: &Tape| -> Result<Val> {
                        let v = t.param(&p);
                        build(t, v)
                    }
                };
                let err = grad_check(f, std::slice::from_ref(&p), 1e-5).unwrap();
                assert!(err < 1e-6, "op {name}: relative error {err}");
            }
        }
    }
}
