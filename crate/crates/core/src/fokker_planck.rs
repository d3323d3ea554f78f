//! Fokker-Planck residuals of the log-density.
//!
//! For the VP process the log-density obeys `d/dt log p = F(x, t)` with
//!
//! ```text
//! F = 1/2 g^2 [div s + |s|^2] - <f, s> - div f,   f = -beta x / 2,  g^2 = beta
//! ```
//!
//! where `s` is the score. The weak-form estimator replaces `div s` by an
//! antithetic difference of two scores at `x +- v`, `v ~ N(0, sigma^2 I)`, so
//! only first derivatives of the energy are needed. The product of two
//! independent estimates is an unbiased estimate of the squared residual.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{perturb, NoiseSchedule, PerturbedBatch, Weighting};
use crate::energy_model::{EnergyField, ExpertMixture, ScoreField};
use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::samples::SampleSet;

/// Step used for finite-difference divergences in diagnostics.
pub const DIVERGENCE_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FpConfig {
    /// Standard deviation of the weak-form smoothing draw `v`.
    pub sigma_weak: f64,
    /// Backward and forward steps of the time stencil.
    pub h_s: f64,
    pub h_d: f64,
    /// Regularization weight in the training objective.
    pub alpha: f64,
    pub weighting: Weighting,
}

impl Default for FpConfig {
    fn default() -> Self {
        FpConfig {
            sigma_weak: 1e-4,
            h_s: 1e-3,
            h_d: 5e-4,
            alpha: 0.0,
            weighting: Weighting::SigmaSquared,
        }
    }
}

impl FpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_weak > 0.0 && self.h_s > 0.0 && self.h_d > 0.0 && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "need sigma_weak, h_s, h_d > 0 and alpha >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Whether the time stencil around `t` stays inside `(0, 1)`.
    pub fn stencil_valid(&self, t: f64) -> bool {
        t - self.h_s > 0.0 && t + self.h_d < 1.0
    }
}

/// `F(x, t)` from a score value and its divergence at `x`.
pub fn fp_rhs(score: &[f64], divergence: f64, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<f64> {
    let beta = schedule.beta(t)?;
    let d = x.len() as f64;
    let sq: f64 = score.iter().map(|v| v * v).sum();
    let xs: f64 = x.iter().zip(score).map(|(a, b)| a * b).sum();
    // -<f, s> = beta/2 <x, s>;  -div f = beta D / 2
    Ok(0.5 * beta * (divergence + sq) + 0.5 * beta * xs + 0.5 * beta * d)
}

/// `F(x, t)` for a score field, with the divergence supplied by `div`.
pub fn fp_rhs_exact(
    model: &dyn ScoreField,
    div: &dyn Fn(&[f64], f64) -> Result<f64>,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    let s = model.score_batch(&Tensor::new(vec![1, x.len()], x.to_vec())?, &[t])?;
    fp_rhs(s.row(0), div(x, t)?, schedule, x, t)
}

/// Central finite-difference divergence of the score, step `h` per coordinate.
pub fn fd_divergence(model: &dyn ScoreField, x: &[f64], t: f64, h: f64) -> Result<f64> {
    let d = x.len();
    let mut pts = Vec::with_capacity(2 * d * d);
    for j in 0..d {
        for sign in [1.0, -1.0] {
            let mut p = x.to_vec();
            p[j] += sign * h;
            pts.extend(p);
        }
    }
    let s = model.score_batch(&Tensor::new(vec![2 * d, d], pts)?, &vec![t; 2 * d])?;
    Ok((0..d).map(|j| (s.row(2 * j)[j] - s.row(2 * j + 1)[j]) / (2.0 * h)).sum())
}

/// Three-point nonuniform stencil for `d/dt` from values at `t + h_d`, `t`
/// and `t - h_s`. Exact on quadratics.
pub fn stencil_derivative(e_plus: f64, e_mid: f64, e_minus: f64, h_s: f64, h_d: f64) -> f64 {
    (h_s * h_s * e_plus + (h_d * h_d - h_s * h_s) * e_mid - h_d * h_d * e_minus)
        / (h_s * h_d * (h_s + h_d))
}

fn stencil_weights(h_s: f64, h_d: f64) -> [f64; 3] {
    let den = h_s * h_d * (h_s + h_d);
    [h_s * h_s / den, (h_d * h_d - h_s * h_s) / den, -h_d * h_d / den]
}

/// Finite-difference `d/dt log p(x, t)` of an energy field.
pub fn dlogp_dt_fd(model: &dyn EnergyField, x: &[f64], t: f64, h_s: f64, h_d: f64) -> Result<f64> {
    if !(t - h_s > 0.0 && t + h_d < 1.0) {
        return Err(Error::Domain(format!(
            "time stencil [{}, {}] around t = {t} leaves (0, 1)",
            t - h_s,
            t + h_d
        )));
    }
    let d = x.len();
    let pts: Vec<f64> = (0..3).flat_map(|_| x.iter().copied()).collect();
    let e = model.energy_batch(&Tensor::new(vec![3, d], pts)?, &[t + h_d, t, t - h_s])?;
    Ok(stencil_derivative(e[0], e[1], e[2], h_s, h_d))
}

/// Divergence part of the weak estimator,
/// `(v / sigma)^T (s(x + v) - s(x - v)) / (2 sigma)`.
pub fn divergence_estimate(model: &dyn ScoreField, x: &[f64], t: f64, v: &[f64], sigma: f64) -> Result<f64> {
    let d = x.len();
    let pts: Vec<f64> = x
        .iter()
        .zip(v)
        .map(|(a, b)| a + b)
        .chain(x.iter().zip(v).map(|(a, b)| a - b))
        .collect();
    let s = model.score_batch(&Tensor::new(vec![2, d], pts)?, &[t, t])?;
    Ok((0..d)
        .map(|j| v[j] / sigma * (s.row(0)[j] - s.row(1)[j]) / (2.0 * sigma))
        .sum())
}

/// Layout of the points evaluated by the weak estimator for a batch of
/// `n` rows with two independent draws each.
///
/// Block `(draw, k)` holds rows `[(4 draw + k) n, (4 draw + k + 1) n)`:
/// `k = 0` is `x + v` at `t`, `k = 1` is `x - v` at `t`, `k = 2` and `k = 3`
/// are `x + v` at `t + h_d` and `t - h_s`.
pub(crate) struct WeakPlan {
    pub n: usize,
    pub dim: usize,
    pub t: Vec<f64>,
    /// `[2, n, dim]` smoothing draws.
    pub v: Vec<f64>,
    pub points: Tensor,
    pub times: Vec<f64>,
}

pub(crate) const DRAWS: usize = 2;
const BLOCKS: usize = 4;

impl WeakPlan {
    pub fn new<R: Rng + ?Sized>(x: &Tensor, t: &[f64], cfg: &FpConfig, rng: &mut R) -> Result<Self> {
        let n = x.rows();
        let dim = x.cols();
        for &ti in t {
            if !cfg.stencil_valid(ti) {
                return Err(Error::Domain(format!(
                    "time stencil around t = {ti} leaves (0, 1)"
                )));
            }
        }
        let v: Vec<f64> = (0..DRAWS * n * dim)
            .map(|_| cfg.sigma_weak * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::with_draws(x, t, v, cfg)
    }

    pub fn with_draws(x: &Tensor, t: &[f64], v: Vec<f64>, cfg: &FpConfig) -> Result<Self> {
        let n = x.rows();
        let dim = x.cols();
        if v.len() != DRAWS * n * dim || t.len() != n {
            return Err(Error::Shape("weak residual draws".into()));
        }
        let total = DRAWS * BLOCKS * n;
        let mut pts = Vec::with_capacity(total * dim);
        let mut times = Vec::with_capacity(total);
        for d in 0..DRAWS {
            for k in 0..BLOCKS {
                for i in 0..n {
                    let vi = &v[(d * n + i) * dim..(d * n + i + 1) * dim];
                    let sign = if k == 1 { -1.0 } else { 1.0 };
                    pts.extend(x.row(i).iter().zip(vi).map(|(a, b)| a + sign * b));
                    times.push(match k {
                        2 => t[i] + cfg.h_d,
                        3 => t[i] - cfg.h_s,
                        _ => t[i],
                    });
                }
            }
        }
        Ok(WeakPlan {
            n,
            dim,
            t: t.to_vec(),
            v,
            points: Tensor::from_vec_unchecked(vec![total, dim], pts),
            times,
        })
    }

    fn row(&self, d: usize, k: usize, i: usize) -> usize {
        (d * BLOCKS + k) * self.n + i
    }

    /// Weak residual estimates `R[d][i]` from energies and scores at `points`.
    pub fn residuals(
        &self,
        schedule: &NoiseSchedule,
        cfg: &FpConfig,
        energy: &[f64],
        score: &Tensor,
    ) -> Result<[Vec<f64>; DRAWS]> {
        let dim = self.dim;
        let [wp, wm, wn] = stencil_weights(cfg.h_s, cfg.h_d);
        let sig = cfg.sigma_weak;
        let mut out = [vec![0.0; self.n], vec![0.0; self.n]];
        for (d, res) in out.iter_mut().enumerate() {
            for i in 0..self.n {
                let beta = schedule.beta(self.t[i])?;
                let y = self.points.row(self.row(d, 0, i));
                let vi = &self.v[(d * self.n + i) * dim..(d * self.n + i + 1) * dim];
                let s0 = score.row(self.row(d, 0, i));
                let s1 = score.row(self.row(d, 1, i));
                let mut div = 0.0;
                let mut sq = 0.0;
                let mut ys = 0.0;
                for j in 0..dim {
                    div += vi[j] / sig * (s0[j] - s1[j]) / (2.0 * sig);
                    sq += s0[j] * s0[j];
                    ys += y[j] * s0[j];
                }
                let dt = wp * energy[self.row(d, 2, i)]
                    + wm * energy[self.row(d, 0, i)]
                    + wn * energy[self.row(d, 3, i)];
                res[i] = 0.5 * beta * (div + sq) + 0.5 * beta * ys + 0.5 * beta * dim as f64 - dt;
            }
        }
        Ok(out)
    }

    /// Loss `mean_i lambda(t_i) D^-2 R[0][i] R[1][i]` and, if requested, its
    /// cotangents with respect to the energies and scores at `points`.
    pub fn loss(
        &self,
        schedule: &NoiseSchedule,
        cfg: &FpConfig,
        energy: &[f64],
        score: &Tensor,
        with_cotangents: bool,
    ) -> Result<(f64, Option<(Vec<f64>, Tensor)>)> {
        let r = self.residuals(schedule, cfg, energy, score)?;
        let n = self.n;
        let dim = self.dim;
        let dsq = (dim * dim) as f64;
        let w: Vec<f64> = self.t.iter().map(|&t| cfg.weighting.weight(schedule, t) / dsq).collect();
        let loss = (0..n).map(|i| w[i] * r[0][i] * r[1][i]).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::NumericFault(format!("Fokker-Planck loss is {loss}")));
        }
        if !with_cotangents {
            return Ok((loss, None));
        }
        let [wp, wm, wn] = stencil_weights(cfg.h_s, cfg.h_d);
        let sig2 = cfg.sigma_weak * cfg.sigma_weak;
        let total = self.points.rows();
        let mut ce = vec![0.0; total];
        let mut cs = Tensor::zeros(vec![total, dim]);
        for d in 0..DRAWS {
            for i in 0..n {
                let c = w[i] * r[1 - d][i] / n as f64;
                let half_beta = 0.5 * schedule.beta(self.t[i])?;
                let vi = &self.v[(d * n + i) * dim..(d * n + i + 1) * dim];
                let r0 = self.row(d, 0, i);
                let r1 = self.row(d, 1, i);
                for j in 0..dim {
                    let s0 = score.row(r0)[j];
                    let y = self.points.row(r0)[j];
                    let anti = vi[j] / (2.0 * sig2);
                    cs.row_mut(r0)[j] += c * half_beta * (anti + 2.0 * s0 + y);
                    cs.row_mut(r1)[j] -= c * half_beta * anti;
                }
                ce[self.row(d, 2, i)] -= c * wp;
                ce[r0] -= c * wm;
                ce[self.row(d, 3, i)] -= c * wn;
            }
        }
        Ok((loss, Some((ce, cs))))
    }
}

/// One draw of the weak residual estimator at `(x, t)` with smoothing `v`.
pub fn weak_residual_sample(
    model: &dyn EnergyField,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    v: &[f64],
    cfg: &FpConfig,
) -> Result<f64> {
    let d = x.len();
    let beta = schedule.beta(t)?;
    let sig = cfg.sigma_weak;
    let y: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + b).collect();
    let ym: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - b).collect();
    let s = model.score_batch(&Tensor::new(vec![2, d], [y.clone(), ym].concat())?, &[t, t])?;
    let (sp, sm) = (s.row(0), s.row(1));
    let div: f64 = (0..d).map(|j| v[j] / sig * (sp[j] - sm[j]) / (2.0 * sig)).sum();
    let sq: f64 = sp.iter().map(|a| a * a).sum();
    let ys: f64 = y.iter().zip(sp).map(|(a, b)| a * b).sum();
    let dt = dlogp_dt_fd(model, &y, t, cfg.h_s, cfg.h_d)?;
    Ok(0.5 * beta * (div + sq) + 0.5 * beta * ys + 0.5 * beta * d as f64 - dt)
}

/// `mean_i lambda(t_i) D^-2 R(x_i, t_i; v) R(x_i, t_i; v')` over the noised
/// points of `batch`.
pub fn fp_loss<R: Rng + ?Sized>(
    model: &dyn EnergyField,
    schedule: &NoiseSchedule,
    batch: &PerturbedBatch,
    cfg: &FpConfig,
    rng: &mut R,
) -> Result<f64> {
    let plan = WeakPlan::new(&batch.xt, &batch.t, cfg, rng)?;
    let (e, s) = model.energy_and_score(&plan.points, &plan.times)?;
    Ok(plan.loss(schedule, cfg, &e, &s, false)?.0)
}

/// Mean absolute Fokker-Planck residual per diffusion time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FpErrorCurve {
    pub points: Vec<(f64, f64)>,
    /// Grid times served by experts without an energy.
    pub skipped: Vec<f64>,
}

impl FpErrorCurve {
    /// Two-column text, one `t error` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# t mean_abs_residual\n");
        for (t, e) in &self.points {
            s.push_str(&format!("{t:.9e} {e:.9e}\n"));
        }
        s
    }
}

/// `|F(x, t) - d/dt log p(x, t)|` at one point using a finite-difference
/// divergence. Below `h_s` the time derivative switches to a one-sided
/// second-order stencil so that small times remain measurable.
pub fn exact_residual(
    model: &dyn EnergyField,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    cfg: &FpConfig,
) -> Result<f64> {
    let div = fd_divergence(model, x, t, DIVERGENCE_STEP)?;
    let f = fp_rhs_exact(model, &|_, _| Ok(div), schedule, x, t)?;
    let dt = if cfg.stencil_valid(t) {
        dlogp_dt_fd(model, x, t, cfg.h_s, cfg.h_d)?
    } else {
        let h = cfg.h_s;
        let d = x.len();
        let pts: Vec<f64> = (0..3).flat_map(|_| x.iter().copied()).collect();
        let e = model.energy_batch(&Tensor::new(vec![3, d], pts)?, &[t, t + h, t + 2.0 * h])?;
        (-3.0 * e[0] + 4.0 * e[1] - e[2]) / (2.0 * h)
    };
    Ok(f - dt)
}

/// Per-time mean of `|F - d/dt log p|` over data noised to each grid time.
/// `data` must be in the model's (normalized) coordinates.
pub fn fp_error_curve(
    model: &ExpertMixture,
    schedule: &NoiseSchedule,
    data: &SampleSet,
    t_grid: &[f64],
    cfg: &FpConfig,
    n_eval: usize,
    seed: u64,
) -> Result<FpErrorCurve> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_eval.min(data.len()).max(1);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
    let x0 = data.select(&idx).into_points();
    let mut curve = FpErrorCurve::default();
    for &t in t_grid {
        let expert = model.expert_at(t)?;
        if !expert.is_conservative() {
            curve.skipped.push(t);
            continue;
        }
        let batch = perturb(schedule, &x0, &vec![t; n], &mut rng)?;
        let mut total = 0.0;
        for row in batch.xt.iter_rows() {
            total += exact_residual(expert, schedule, row, t, cfg)?.abs();
        }
        curve.points.push((t, total / n as f64));
    }
    Ok(curve)
}
