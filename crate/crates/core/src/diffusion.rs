//! Variance-preserving diffusion: noise schedule, perturbation kernel,
//! denoising score matching and the reverse-time sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::energy_model::ScoreField;
use crate::error::{ensure_finite, Error, Result};
use crate::nd::Tensor;
use crate::par::map_indexed;
use crate::samples::SampleSet;
use crate::T_EPS;

/// Linear `beta(t)` schedule of the VP SDE `dx = -beta/2 x dt + sqrt(beta) dw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        Ok(NoiseSchedule { beta_min, beta_max })
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.beta_unchecked(t))
    }

    pub(crate) fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `int_0^t beta(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// `(mean_scale, sigma)` of the perturbation kernel
    /// `N(mean_scale * x0, sigma^2 I)`.
    pub fn marginal(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        Ok(self.marginal_unchecked(t))
    }

    pub(crate) fn marginal_unchecked(&self, t: f64) -> (f64, f64) {
        let int = self.integrated_beta(t);
        let mean_scale = (-0.5 * int).exp();
        let sigma = (-(-int).exp_m1()).sqrt();
        (mean_scale, sigma)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.marginal(t)?.1)
    }

    /// VP drift `f(x, t) = -beta(t) x / 2`.
    pub fn drift(&self, x: &[f64], t: f64) -> Vec<f64> {
        let b = self.beta_unchecked(t);
        x.iter().map(|v| -0.5 * b * v).collect()
    }

    /// `g(t)^2 = beta(t)`.
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        self.beta_unchecked(t)
    }
}

/// Time-dependent loss weight `lambda(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `lambda(t) = sigma(t)^2`.
    #[default]
    SigmaSquared,
    Unit,
}

impl Weighting {
    pub fn weight(&self, schedule: &NoiseSchedule, t: f64) -> f64 {
        match self {
            Weighting::SigmaSquared => schedule.marginal_unchecked(t).1.powi(2),
            Weighting::Unit => 1.0,
        }
    }
}

/// Clean points, times, the noise that was drawn, and the noised points.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedBatch {
    pub x0: Tensor,
    pub t: Vec<f64>,
    pub eps: Tensor,
    pub xt: Tensor,
}

impl PerturbedBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Noises each row of `x0` to its time `t[i]`: `xt = m(t) x0 + sigma(t) eps`.
pub fn perturb<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: &[f64],
    rng: &mut R,
) -> Result<PerturbedBatch> {
    if t.len() != x0.rows() {
        return Err(Error::Shape(format!("{} times for {} points", t.len(), x0.rows())));
    }
    let dim = x0.cols();
    let mut eps = Vec::with_capacity(x0.len());
    let mut xt = Vec::with_capacity(x0.len());
    for (row, &ti) in x0.iter_rows().zip(t) {
        let (m, s) = schedule.marginal(ti)?;
        for &v in row {
            let e: f64 = rng.sample(StandardNormal);
            eps.push(e);
            xt.push(m * v + s * e);
        }
    }
    let shape = vec![x0.rows(), dim];
    Ok(PerturbedBatch {
        x0: x0.clone(),
        t: t.to_vec(),
        eps: Tensor::from_vec_unchecked(shape.clone(), eps),
        xt: Tensor::from_vec_unchecked(shape, xt),
    })
}

/// Like [`perturb`], drawing each time uniformly from `[lo, hi)`.
pub fn perturb_uniform<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<PerturbedBatch> {
    let t: Vec<f64> = (0..x0.rows()).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    perturb(schedule, x0, &t, rng)
}

/// Mean over the batch of `lambda(t) |s(xt, t) + eps / sigma(t)|^2`.
pub fn dsm_loss(
    model: &dyn ScoreField,
    schedule: &NoiseSchedule,
    batch: &PerturbedBatch,
    weighting: Weighting,
) -> Result<f64> {
    let score = model.score_batch(&batch.xt, &batch.t)?;
    Ok(dsm_terms(&score, schedule, batch, weighting, false)?.0)
}

/// DSM loss for precomputed scores, optionally with its cotangent
/// `d loss / d score`.
pub(crate) fn dsm_terms(
    score: &Tensor,
    schedule: &NoiseSchedule,
    batch: &PerturbedBatch,
    weighting: Weighting,
    with_cotangent: bool,
) -> Result<(f64, Option<Tensor>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let dim = batch.xt.cols();
    let mut cot = with_cotangent.then(|| Tensor::zeros(vec![n, dim]));
    let mut total = 0.0;
    for i in 0..n {
        let t = batch.t[i];
        if t < T_EPS {
            return Err(Error::Domain(format!(
                "time {t} below the truncation floor {T_EPS}"
            )));
        }
        let (_, sigma) = schedule.marginal(t)?;
        let w = weighting.weight(schedule, t);
        let s = score.row(i);
        let e = batch.eps.row(i);
        let mut sq = 0.0;
        for j in 0..dim {
            let r = s[j] + e[j] / sigma;
            sq += r * r;
            if let Some(c) = cot.as_mut() {
                c.row_mut(i)[j] = 2.0 * w * r / n as f64;
            }
        }
        total += w * sq;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NumericFault(format!("DSM loss is {loss}")));
    }
    Ok((loss, cot))
}

/// Settings of the reverse-time Euler-Maruyama sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseConfig {
    pub n: usize,
    pub steps: usize,
    pub t_end: f64,
    pub seed: u64,
    /// Points integrated together; each chunk owns RNG stream `chunk index`.
    pub chunk: usize,
    pub threads: usize,
}

impl Default for ReverseConfig {
    fn default() -> Self {
        ReverseConfig {
            n: 100_000,
            steps: 1000,
            t_end: T_EPS,
            seed: 0,
            chunk: 1000,
            threads: 1,
        }
    }
}

/// Integrates `dx = [f(x,t) - g^2(t) s(x,t)] dt + g(t) dw` backwards from
/// `N(0, I)` at `t = 1` to `t_end` on a uniform grid, returning the states at
/// `t_end`.
pub fn sample_reverse(
    model: &dyn ScoreField,
    schedule: &NoiseSchedule,
    cfg: &ReverseConfig,
) -> Result<SampleSet> {
    if cfg.steps == 0 {
        return Err(Error::Config("reverse sampler needs at least one step".into()));
    }
    if !(cfg.t_end > 0.0 && cfg.t_end < 1.0) {
        return Err(Error::Domain(format!("t_end {} outside (0, 1)", cfg.t_end)));
    }
    let dim = model.dim();
    let chunk = cfg.chunk.max(1);
    let n_chunks = cfg.n.div_ceil(chunk);
    let dt = (1.0 - cfg.t_end) / cfg.steps as f64;
    let parts = map_indexed(n_chunks, cfg.threads, |c| {
        let rows = chunk.min(cfg.n - c * chunk);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        let mut x = Tensor::from_vec_unchecked(
            vec![rows, dim],
            (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect(),
        );
        let mut times = vec![0.0; rows];
        for k in 0..cfg.steps {
            let t = 1.0 - k as f64 * dt;
            times.fill(t);
            let s = model.score_batch(&x, &times)?;
            let beta = schedule.beta_unchecked(t);
            let noise = (beta * dt).sqrt();
            for (xv, sv) in x.data_mut().iter_mut().zip(s.data()) {
                let z: f64 = rng.sample(StandardNormal);
                *xv += (0.5 * beta * *xv + beta * sv) * dt + noise * z;
            }
            ensure_finite(x.data(), &format!("reverse sampler chunk {c} step {k}"))?;
        }
        Ok(x.into_data())
    })?;
    SampleSet::from_flat(dim, parts.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy_model::analytic::StandardNormalField;

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = NoiseSchedule::default();
        assert_eq!(s.beta(0.0).unwrap(), 0.1);
        assert_eq!(s.beta(1.0).unwrap(), 20.0);
        assert!((s.beta(0.5).unwrap() - 10.05).abs() < 1e-12);
        assert!(matches!(s.beta(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.beta(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn marginal_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.marginal(0.0).unwrap(), (1.0, 0.0));
        let (m, sig) = s.marginal(1.0).unwrap();
        assert!((m - (-0.5f64 * 10.05).exp()).abs() < 1e-15);
        assert!((m - 0.00657).abs() < 1e-5);
        assert!((sig - 0.99998).abs() < 1e-5);
    }

    #[test]
    fn variance_preservation_and_monotonicity() {
        let s = NoiseSchedule::default();
        let mut prev = -1.0;
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let (m, sig) = s.marginal(t).unwrap();
            assert!((m * m + sig * sig - 1.0).abs() < 1e-12);
            assert!(sig > prev);
            prev = sig;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(0.0, 20.0).is_err());
        assert!(NoiseSchedule::new(5.0, 1.0).is_err());
        assert!(NoiseSchedule::new(0.1, 20.0).is_ok());
    }

    #[test]
    fn perturb_at_zero_time_is_identity_and_reproducible() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(vec![3, 2], vec![1.0, 2.0, -3.0, 0.5, 0.0, 9.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = perturb(&s, &x0, &[0.0; 3], &mut rng).unwrap();
        assert_eq!(b.xt, x0);
        let b1 = perturb(&s, &x0, &[0.3; 3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b2 = perturb(&s, &x0, &[0.3; 3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(b1, b2);
        let (m, sig) = s.marginal(0.3).unwrap();
        for i in 0..6 {
            let want = m * b1.x0.data()[i] + sig * b1.eps.data()[i];
            assert_eq!(b1.xt.data()[i], want);
        }
    }

    #[test]
    fn perturbed_data_at_unit_time_is_standard_normal() {
        let s = NoiseSchedule::default();
        let n = 100_000;
        // Normalized data, as the perturbation kernel expects.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x0 = Tensor::new(vec![n, 1], x0).unwrap();
        let b = perturb(&s, &x0, &vec![1.0; n], &mut rng).unwrap();
        let mean = b.xt.data().iter().sum::<f64>() / n as f64;
        let var = b.xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn dsm_loss_zero_at_exact_conditional_score() {
        struct Oracle(Tensor);
        impl ScoreField for Oracle {
            fn dim(&self) -> usize {
                2
            }
            fn score_batch(&self, _x: &Tensor, t: &[f64]) -> Result<Tensor> {
                let s = NoiseSchedule::default();
                let mut out = self.0.clone();
                for (i, &ti) in t.iter().enumerate() {
                    let sig = s.sigma(ti).unwrap();
                    for v in out.row_mut(i) {
                        *v = -*v / sig;
                    }
                }
                Ok(out)
            }
        }
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(vec![4, 2], vec![0.5; 8]).unwrap();
        let t = vec![0.01, 0.2, 0.5, 0.9];
        let b = perturb(&s, &x0, &t, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let oracle = Oracle(b.eps.clone());
        let loss = dsm_loss(&oracle, &s, &b, Weighting::SigmaSquared).unwrap();
        assert!(loss < 1e-25, "{loss}");
    }

    #[test]
    fn dsm_rejects_times_below_floor() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let b = perturb(&s, &x0, &[1e-7], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = dsm_loss(&StandardNormalField::new(2), &s, &b, Weighting::SigmaSquared);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn sigma_squared_weighting_is_bounded_near_zero() {
        // lambda = sigma^2 turns the summand into |sigma s + eps|^2.
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let b = perturb(&s, &x0, &[T_EPS], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let model = StandardNormalField::new(2);
        let loss = dsm_loss(&model, &s, &b, Weighting::SigmaSquared).unwrap();
        let sig = s.sigma(T_EPS).unwrap();
        let direct: f64 = (0..2)
            .map(|j| (sig * -b.xt.data()[j] + b.eps.data()[j]).powi(2))
            .sum();
        assert!((loss - direct).abs() < 1e-12);
        assert!(loss < 50.0);
    }

    #[test]
    fn single_step_sampler_is_deterministic() {
        let s = NoiseSchedule::default();
        let model = StandardNormalField::new(2);
        let cfg = ReverseConfig {
            n: 1,
            steps: 1,
            t_end: 0.5,
            seed: 11,
            ..ReverseConfig::default()
        };
        let a = sample_reverse(&model, &s, &cfg).unwrap();
        let b = sample_reverse(&model, &s, &cfg).unwrap();
        assert_eq!(a, b);
        // One explicit step from the initial draw.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(0);
        let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let beta = 20.0;
        let dt = 0.5;
        for j in 0..2 {
            let z: f64 = rng.sample(StandardNormal);
            let want = x[j] + (0.5 * beta * x[j] - beta * x[j]) * dt + (beta * dt).sqrt() * z;
            assert!((a.point(0)[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_rejects_bad_arguments() {
        let s = NoiseSchedule::default();
        let model = StandardNormalField::new(2);
        let bad_steps = ReverseConfig {
            steps: 0,
            ..ReverseConfig::default()
        };
        assert!(sample_reverse(&model, &s, &bad_steps).is_err());
        let bad_end = ReverseConfig {
            t_end: 1.0,
            ..ReverseConfig::default()
        };
        assert!(sample_reverse(&model, &s, &bad_end).is_err());
    }
}
