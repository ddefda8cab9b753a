//! Central finite-difference gradient checks.

use super::{ApproxError, Architecture, ParamVector};

pub const FD_EPSILON: f64 = 1e-5;

/// Worst relative error between `analytic` and central differences of `loss`.
///
/// Every parameter is perturbed by `+-epsilon`; the relative error of each
/// entry uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn fd_check<F>(params: &ParamVector, analytic: &[f64], mut loss: F, epsilon: f64) -> f64
where
    F: FnMut(&ParamVector) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient shape");
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let original = probe.as_slice()[i];
        probe.as_mut_slice()[i] = original + epsilon;
        let plus = loss(&probe);
        probe.as_mut_slice()[i] = original - epsilon;
        let minus = loss(&probe);
        probe.as_mut_slice()[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = g.abs().max(numeric.abs()).max(1e-8);
        let err = (g - numeric).abs() / denom;
        if err.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

/// Gradient check of a loss that is a function of one network output.
///
/// `loss_fn` returns the loss value and `d loss / d output`.
pub fn fd_check_output<F>(
    arch: &Architecture,
    params: &ParamVector,
    input: &[f64],
    loss_fn: F,
) -> Result<f64, ApproxError>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (out, trace) = arch.forward(params, input)?;
    let (_, dout) = loss_fn(&out);
    let grad = arch.backward(params, &trace, &dout)?;
    Ok(fd_check(
        params,
        &grad.params,
        |p| {
            let (o, _) = arch.forward(p, input).expect("shapes already checked");
            loss_fn(&o).0
        },
        FD_EPSILON,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{LayerSpec, Nonlinearity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sum_of_squares(out: &[f64]) -> (f64, Vec<f64>) {
        (
            out.iter().map(|o| 0.5 * o * o).sum(),
            out.to_vec(),
        )
    }

    #[test]
    fn quadratic_loss_on_linear_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = Architecture::new(vec![LayerSpec::new(4, 2, Nonlinearity::Identity)]).unwrap();
        let params = arch.init_params(&mut rng);
        let err = fd_check_output(&arch, &params, &[0.4, -1.1, 0.8, 0.2], sum_of_squares).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn identically_zero_loss_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = Architecture::mlp(3, &[5], Nonlinearity::Tanh, 1, Nonlinearity::Tanh).unwrap();
        let params = arch.init_params(&mut rng);
        let err =
            fd_check_output(&arch, &params, &[1.0, 2.0, 3.0], |o| (0.0, vec![0.0; o.len()]))
                .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn random_nets_pass_gradient_check() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nl = if seed % 2 == 0 {
                Nonlinearity::Tanh
            } else {
                Nonlinearity::Relu
            };
            let arch = Architecture::mlp(5, &[8, 6], nl, 2, Nonlinearity::Tanh).unwrap();
            let params = arch.init_params(&mut rng);
            let input: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
            // Weighted cubic loss so every output gets a distinct gradient.
            let err = fd_check_output(&arch, &params, &input, |o| {
                let l = o.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v.powi(3)).sum();
                let g = o
                    .iter()
                    .enumerate()
                    .map(|(i, v)| 3.0 * (i + 1) as f64 * v * v)
                    .collect();
                (l, g)
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let arch = Architecture::mlp(2, &[3], Nonlinearity::Tanh, 1, Nonlinearity::Identity)
            .unwrap();
        let params = arch.init_params(&mut rng);
        let wrong = vec![0.1; arch.param_count()];
        let err = fd_check(
            &params,
            &wrong,
            |p| arch.forward(p, &[0.5, 0.5]).unwrap().0[0],
            FD_EPSILON,
        );
        assert!(err > 0.1);
    }
}
