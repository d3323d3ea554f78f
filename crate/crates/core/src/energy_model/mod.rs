//! Energy networks whose input-gradient is the score, direct-score networks,
//! and the time-gated mixture of experts.

pub mod analytic;
mod mixture;
mod mlp;

pub use mixture::{Expert, ExpertMixture, TimeInterval};
pub(crate) use mixture::check_partition;
pub use mlp::{Activation, Forward, Mlp, MlpSpec};

use crate::error::Result;
use crate::nd::Tensor;

/// Width of the time features appended to every input point.
pub const TIME_EMBED_DIM: usize = 4;

/// `[sin(pi t), cos(pi t), sin(2 pi t), cos(2 pi t)]`.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let a = std::f64::consts::PI * t;
    let (s1, c1) = a.sin_cos();
    let (s2, c2) = (2.0 * a).sin_cos();
    [s1, c1, s2, c2]
}

/// Anything that yields `grad_x log p_t(x)` for batches of points.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;

    /// Scores of the rows of `x` (`[n, dim]`), row `i` at time `t[i]`.
    fn score_batch(&self, x: &Tensor, t: &[f64]) -> Result<Tensor>;
}

/// A score field that also exposes the unnormalized log-density whose
/// gradient it is.
pub trait EnergyField: ScoreField {
    fn energy_batch(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>>;

    fn energy_and_score(&self, x: &Tensor, t: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        Ok((self.energy_batch(x, t)?, self.score_batch(x, t)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::{grad_params, ParamVars, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Tensor, Vec<f64>) {
        let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        (Tensor::new(vec![n, dim], x).unwrap(), t)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn score_matches_finite_differences_of_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for act in [Activation::Softplus, Activation::Gelu] {
            for trial in 0..20 {
                let mut spec = MlpSpec::new(2, vec![16, 16], true);
                spec.activation = act;
                let net = Mlp::new(spec, trial);
                let (x, t) = random_points(&mut rng, 5, 2);
                let s = net.score_batch(&x, &t).unwrap();
                for i in 0..5 {
                    let mut fd = [0.0; 2];
                    for j in 0..2 {
                        let h = 1e-5;
                        let mut p = x.row(i).to_vec();
                        let mut m = p.clone();
                        p[j] += h;
                        m[j] -= h;
                        fd[j] = (net.energy(&p, t[i]).unwrap() - net.energy(&m, t[i]).unwrap())
                            / (2.0 * h);
                    }
                    let e = rel_err(s.row(i), &fd);
                    assert!(e < 1e-6, "{act} rel err {e}");
                }
            }
        }
    }

    #[test]
    fn batched_kernels_match_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Softplus, Activation::Gelu] {
            for conservative in [true, false] {
                let mut spec = MlpSpec::new(2, vec![7, 5], conservative);
                spec.activation = act;
                let net = Mlp::new(spec, 3);
                let (x, t) = random_points(&mut rng, 4, 2);
                let cs: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let ce: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let cs_t = Tensor::new(vec![4, 2], cs.clone()).unwrap();
                let fwd = net.forward(&x, &t).unwrap();
                let fast = net
                    .param_grad(&fwd, conservative.then_some(&ce[..]), Some(&cs_t))
                    .unwrap();
                let tape_grad = grad_params(
                    |tape: &Tape, p: &ParamVars| {
                        let mut total = tape.constant(0.0);
                        for i in 0..4 {
                            let xv = tape.vars(x.row(i));
                            let tv = tape.constant(t[i]);
                            let out = net.output_on_tape(p, &xv, tv);
                            let score = if conservative {
                                total = total + out[0] * ce[i];
                                tape.grad(out[0], &xv)
                            } else {
                                out
                            };
                            for j in 0..2 {
                                total = total + score[j] * cs[i * 2 + j];
                            }
                        }
                        total
                    },
                    net.params(),
                )
                .unwrap();
                let e = rel_err(&fast.to_flat(), &tape_grad.to_flat());
                assert!(e < 1e-10, "{act} conservative={conservative}: {e}");
            }
        }
    }

    #[test]
    fn energy_is_continuous_in_time() {
        let net = Mlp::new(MlpSpec::new(2, vec![16, 16], true), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let t = rng.random_range(0.0..0.9);
            let d = net.energy(&x, t).unwrap() - net.energy(&x, t + 1e-9).unwrap();
            assert!(d.abs() < 1e-6);
        }
    }

    #[test]
    fn score_is_bitwise_gradient_path() {
        let net = Mlp::new(MlpSpec::new(2, vec![9], true), 6);
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.2, -1.0, 0.5]).unwrap();
        let t = [0.3, 0.7];
        let (_, s1) = net.energy_and_score(&x, &t).unwrap();
        let s2 = net.score_batch(&x, &t).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(net.score_batch(&x, &t).unwrap(), s2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        // Curl of a conservative score vanishes: d s_x / d y == d s_y / d x.
        #[test]
        fn conservative_score_is_curl_free(
            seed in 0u64..1000,
            x in -2.0f64..2.0,
            y in -2.0f64..2.0,
            t in 0.01f64..0.99,
        ) {
            let net = Mlp::new(MlpSpec::new(2, vec![16, 16], true), seed);
            let h = 1e-4;
            let s = |p: [f64; 2]| net.score(&p, t).unwrap();
            let dsx_dy = (s([x, y + h])[0] - s([x, y - h])[0]) / (2.0 * h);
            let dsy_dx = (s([x + h, y])[1] - s([x - h, y])[1]) / (2.0 * h);
            prop_assert!((dsx_dy - dsy_dx).abs() < 1e-5);
        }
    }
}
