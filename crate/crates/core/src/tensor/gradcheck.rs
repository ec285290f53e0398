//! Central finite differences, the independent check on every backward rule.

use super::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms scaled by
/// the floor instead of by their own (noise-dominated) size.
pub const GRADIENT_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Estimates `∂f/∂inputs` by perturbing every coordinate by `±step`.
pub fn central_difference<F>(mut f: F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[ti].shape());
        for i in 0..inputs[ti].len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[ti].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[ti].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// `(tensor, coordinate)` of the largest mismatch.
    pub worst: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn compare(analytic: &[Tensor], numeric: &[Tensor]) -> GradCheck {
    let mut report = GradCheck::default();
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(x, y);
            report.coordinates += 1;
            if e > report.max_relative_error || e.is_nan() {
                report.max_relative_error = if e.is_nan() { f64::INFINITY } else { e };
                report.worst = Some((ti, i));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn central_difference_of_quadratic_is_exact() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = central_difference(
            |ts| Ok(ts[0].data().iter().map(|v| v * v).sum()),
            &[x],
            1e-3,
        )
        .unwrap();
        for (got, want) in g[0].data().iter().zip([2.0, -4.0, 1.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    }

    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
    use crate::tensor::Var;

    fn check(build: Build, inputs: &[Tensor]) -> GradCheck {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t).unwrap()).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let analytic = tape.backward_wrt(loss, &vars).unwrap();
        let numeric = central_difference(
            |ts| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = ts.iter().map(|t| tape.param(t).unwrap()).collect();
                let l = build(&mut tape, &vars)?;
                tape.value(l).item()
            },
            inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        compare(&analytic, &numeric)
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    // Each primitive is wrapped in a smooth random projection so every output
    // coordinate contributes a distinct weight to the scalar.
    fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let w = rand_tensor(tape.shape(y), seed);
        let w = tape.constant(&w)?;
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let cases: Vec<(&str, Build, Vec<Tensor>)> = vec![
            ("matmul", |t, v| { let y = t.matmul(v[0], v[1], false)?; project(t, y, 1) },
                vec![rand_tensor(&[3, 4], 1), rand_tensor(&[4, 2], 2)]),
            ("matmul_nt", |t, v| { let y = t.matmul(v[0], v[1], true)?; project(t, y, 2) },
                vec![rand_tensor(&[3, 4], 3), rand_tensor(&[5, 4], 4)]),
            ("conv2d", |t, v| { let y = t.conv2d(v[0], v[1], 1)?; project(t, y, 3) },
                vec![rand_tensor(&[2, 2, 4, 4], 5), rand_tensor(&[3, 2, 3, 3], 6)]),
            ("add", |t, v| { let y = t.add(v[0], v[1])?; project(t, y, 4) },
                vec![rand_tensor(&[2, 3], 7), rand_tensor(&[2, 3], 8)]),
            ("add_scalar", |t, v| { let y = t.add(v[0], v[1])?; project(t, y, 5) },
                vec![rand_tensor(&[2, 3], 9), rand_tensor(&[1], 10)]),
            ("mul", |t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 6) },
                vec![rand_tensor(&[2, 3], 11), rand_tensor(&[2, 3], 12)]),
            ("mul_scalar", |t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 7) },
                vec![rand_tensor(&[2, 3], 13), rand_tensor(&[1], 14)]),
            ("scale_shift", |t, v| { let y = t.scale(v[0], -1.7)?; let y = t.shift(y, 0.3)?; project(t, y, 8) },
                vec![rand_tensor(&[4], 15)]),
            ("relu", |t, v| { let y = t.relu(v[0])?; project(t, y, 9) },
                vec![rand_tensor(&[3, 3], 16)]),
            ("softplus", |t, v| { let y = t.softplus(v[0])?; project(t, y, 10) },
                vec![rand_tensor(&[3, 3], 17)]),
            ("exp_log", |t, v| { let y = t.exp(v[0])?; let y = t.shift(y, 1.0)?; let y = t.log(y)?; project(t, y, 11) },
                vec![rand_tensor(&[5], 18)]),
            ("avg_pool", |t, v| { let y = t.avg_pool(v[0], 2)?; project(t, y, 12) },
                vec![rand_tensor(&[2, 2, 4, 4], 19)]),
            ("flatten", |t, v| { let y = t.flatten(v[0])?; project(t, y, 13) },
                vec![rand_tensor(&[2, 2, 2, 2], 20)]),
            ("softmax", |t, v| { let y = t.softmax(v[0])?; project(t, y, 14) },
                vec![rand_tensor(&[3, 4], 21)]),
            ("sum_last_axis", |t, v| { let y = t.sum_last_axis(v[0])?; project(t, y, 15) },
                vec![rand_tensor(&[2, 3, 4], 22)]),
            ("batch_norm_train", |t, v| { let (y, _) = t.batch_norm(v[0], v[1], v[2], None, 1e-5)?; project(t, y, 16) },
                vec![rand_tensor(&[3, 2, 2, 2], 23), rand_tensor(&[2], 24), rand_tensor(&[2], 25)]),
            ("batch_norm_eval", |t, v| {
                    let (y, _) = t.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.5, 1.5])), 1e-5)?;
                    project(t, y, 17) },
                vec![rand_tensor(&[3, 2, 2, 2], 26), rand_tensor(&[2], 27), rand_tensor(&[2], 28)]),
            ("normalize", |t, v| { let y = t.normalize(v[0], 4, 1e-8)?; project(t, y, 18) },
                vec![rand_tensor(&[2, 3, 2, 2], 29)]),
        ];
        for (name, build, inputs) in cases {
            let r = check(build, &inputs);
            assert!(r.passes(1e-4), "{name}: {r:?}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        crate::tensor::inject_fault(Some(crate::tensor::Fault::ReluSignFlip));
        let r = check(
            |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, 1)
            },
            &[rand_tensor(&[4, 4], 3)],
        );
        crate::tensor::inject_fault(None);
        assert!(!r.passes(1e-4));
    }
}
