//! Finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub op_name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max_abs={:.3e} max_rel={:.3e} {}",
            self.op_name,
            self.max_abs_err,
            self.max_rel_err,
            if self.passed { "ok" } else { "FAILED" }
        )
    }
}

const FD_STEP: f64 = 1e-4;

/// Compare reverse-mode gradients of `f` against central finite differences
/// (step 1e-4) in 64-bit precision. `f` receives a fresh tape plus one leaf
/// per input and must return a scalar loss node.
pub fn grad_check<F>(
    op_name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    atol: f64,
    rtol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for t in inputs {
        if !t.all_finite() {
            return Err(Error::usage("grad_check inputs must be finite"));
        }
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::usage("grad_check closure must return a scalar loss"));
        }
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;

    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]);
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += FD_STEP;
            let (tp, _, lp) = eval(&plus)?;
            let fp = tp.value(lp).item();

            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let (tm, _, lm) = eval(&minus)?;
            let fm = tm.value(lm).item();

            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.map(|t| t.data()[ei]).unwrap_or(0.0);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
            if abs > max_abs {
                max_abs = abs;
            }
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    let passed = max_abs <= atol || max_rel <= rtol;
    Ok(GradReport { op_name: op_name.to_string(), max_abs_err: max_abs, max_rel_err: max_rel, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_sum_has_exact_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.0, 2.0, -1.5]).unwrap();
        let rep = grad_check("sum", &[x], |tape, vars| Ok(tape.sum_all(vars[0])), 1e-4, 1e-3)
            .unwrap();
        assert!(rep.passed);
        assert!(rep.max_abs_err < 1e-9);
    }

    #[test]
    fn softmax_sum_gradient_is_numerically_zero() {
        let x = Tensor::new(vec![5], vec![0.2, -0.4, 1.3, 0.0, -2.2]).unwrap();
        let rep = grad_check(
            "sum_softmax",
            &[x],
            |tape, vars| {
                let s = tape.softmax(vars[0], 0)?;
                Ok(tape.sum_all(s))
            },
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let r = grad_check("identity", &[x], |_tape, vars| Ok(vars[0]), 1e-4, 1e-3);
        assert!(r.is_err());
    }

    #[test]
    fn elementwise_ops_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.5..1.5));
        let y = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.5..1.5));
        for (name, f) in [
            ("mul", 0usize),
            ("sub", 1),
            ("sigmoid", 2),
            ("elu1", 3),
            ("relu", 4),
        ] {
            let rep = grad_check(
                name,
                &[x.clone(), y.clone()],
                move |tape, vars| {
                    let v = match f {
                        0 => tape.mul(vars[0], vars[1])?,
                        1 => tape.sub(vars[0], vars[1])?,
                        2 => tape.sigmoid(vars[0]),
                        3 => tape.elu1(vars[0]),
                        _ => {
                            // keep away from the relu kink
                            let shifted = tape.add_const(vars[0], 3.0);
                            tape.relu(shifted)
                        }
                    };
                    Ok(tape.sum_all(v))
                },
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(rep.passed, "{rep}");
        }
    }
}
