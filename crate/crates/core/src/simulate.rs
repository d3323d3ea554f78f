//! Underdamped Langevin dynamics driven by analytic forces or by a learned
//! score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::energy_model::ScoreField;
use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::samples::{SampleSet, Trajectory};
use crate::systems::DIVERGENCE_BOUND;
use crate::trainer::{Checkpoint, NormStats};
use crate::T_EPS;

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub kbt: f64,
    pub mass: f64,
    pub gamma: f64,
    pub save_every: usize,
    /// Diffusion time at which a learned score is evaluated.
    pub t_eval: f64,
    pub n_chains: usize,
    pub seed: u64,
    /// Abort when any coordinate exceeds this magnitude.
    pub bound: f64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            dt: 0.005,
            n_steps: 50_000,
            kbt: 23.0,
            mass: 0.5,
            gamma: 1.0,
            save_every: 50,
            t_eval: T_EPS,
            n_chains: 100,
            seed: 0,
            bound: DIVERGENCE_BOUND,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.dt, self.kbt, self.mass, self.gamma, self.bound];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "dt, kbt, mass, gamma and bound must be positive, got {self:?}"
            )));
        }
        if self.save_every == 0 || self.n_steps == 0 || self.n_chains == 0 {
            return Err(Error::Config("n_steps, save_every and n_chains must be positive".into()));
        }
        if !(self.t_eval > 0.0 && self.t_eval < 1.0) {
            return Err(Error::Domain(format!("t_eval {} outside (0, 1)", self.t_eval)));
        }
        Ok(())
    }
}

/// Integrates `M dv = F dt - gamma M v dt + sqrt(2 gamma M kBT) dW`,
/// `dx = v dt` for every row of `x0`, updating the velocity first and moving
/// the position with the new velocity. Velocities start from the
/// Maxwell-Boltzmann distribution. Every `save_every`-th position is stored.
///
/// `force` receives all chain positions `[chains, dim]` and writes forces of
/// the same shape. Chain `c` draws from stream `c` of a generator seeded with
/// `cfg.seed`, so a chain's path does not depend on how many chains run.
pub fn langevin<F>(mut force: F, cfg: &LangevinConfig, x0: &Tensor) -> Result<Trajectory>
where
    F: FnMut(&Tensor, &mut Tensor) -> Result<()>,
{
    cfg.validate()?;
    x0.check_finite("initial positions")?;
    let chains = x0.rows();
    let dim = x0.cols();
    let mut rngs: Vec<ChaCha8Rng> = (0..chains)
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(c as u64);
            r
        })
        .collect();
    let v_std = (cfg.kbt / cfg.mass).sqrt();
    let mut v: Vec<f64> = Vec::with_capacity(chains * dim);
    for r in rngs.iter_mut() {
        for _ in 0..dim {
            v.push(v_std * r.sample::<f64, _>(StandardNormal));
        }
    }
    let mut x = x0.clone();
    let mut f = Tensor::zeros(vec![chains, dim]);
    let n_saved = cfg.n_steps / cfg.save_every;
    let mut stored: Vec<Vec<f64>> = vec![Vec::with_capacity(n_saved * dim); chains];
    let damp = cfg.gamma * cfg.dt;
    let kick = cfg.dt / cfg.mass;
    let noise = (2.0 * cfg.gamma * cfg.kbt * cfg.dt / cfg.mass).sqrt();
    for step in 1..=cfg.n_steps {
        force(&x, &mut f)?;
        let xs = x.data_mut();
        for c in 0..chains {
            let rng = &mut rngs[c];
            for j in c * dim..(c + 1) * dim {
                let z: f64 = rng.sample(StandardNormal);
                v[j] += kick * f.data()[j] - damp * v[j] + noise * z;
                xs[j] += cfg.dt * v[j];
                if !(xs[j].abs() <= cfg.bound) {
                    return Err(Error::NumericFault(format!(
                        "chain {c} diverged at step {step}: coordinate {} exceeds bound {}",
                        xs[j], cfg.bound
                    )));
                }
            }
        }
        if step % cfg.save_every == 0 {
            for (c, s) in stored.iter_mut().enumerate() {
                s.extend_from_slice(&xs[c * dim..(c + 1) * dim]);
            }
        }
    }
    let chain = (0..chains as u32).flat_map(|c| std::iter::repeat_n(c, n_saved)).collect();
    Ok(Trajectory {
        samples: SampleSet::from_flat(dim, stored.concat())?,
        chain,
    })
}

/// Physical force from a score in normalized coordinates,
/// `F_i = kBT s_i / std_i`.
pub fn score_to_force(score: &[f64], kbt: f64, stats: &NormStats) -> Vec<f64> {
    score.iter().zip(&stats.std).map(|(s, sd)| kbt * s / sd).collect()
}

/// Forces from `model` evaluated at diffusion time `t_eval` on the
/// normalized positions.
pub fn model_force<'a>(
    model: &'a dyn ScoreField,
    stats: &'a NormStats,
    kbt: f64,
    t_eval: f64,
) -> impl FnMut(&Tensor, &mut Tensor) -> Result<()> + 'a {
    let mut times = Vec::new();
    move |x: &Tensor, f: &mut Tensor| {
        let z = stats.normalize_points(x)?;
        times.resize(x.rows(), t_eval);
        let s = model.score_batch(&z, &times)?;
        let dim = x.cols();
        for (r, out) in f.data_mut().chunks_exact_mut(dim).enumerate() {
            let row = s.row(r);
            for j in 0..dim {
                out[j] = kbt * row[j] / stats.std[j];
            }
        }
        Ok(())
    }
}

/// `n_chains` starting points drawn uniformly from `reference`.
pub fn start_points(reference: &SampleSet, n_chains: usize, seed: u64) -> Result<Tensor> {
    if reference.is_empty() {
        return Err(Error::Config("no reference points to start from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n_chains).map(|_| rng.random_range(0..reference.len())).collect();
    Ok(reference.select(&idx).into_points())
}

/// Langevin simulation in physical coordinates driven by the checkpoint's
/// score at `cfg.t_eval`.
pub fn simulate_model(ckpt: &Checkpoint, cfg: &LangevinConfig, x0: &Tensor) -> Result<Trajectory> {
    cfg.validate()?;
    if !ckpt.model.conservative_at(cfg.t_eval)? {
        return Err(Error::Contract(format!(
            "expert serving t = {} is not conservative; its score is not a force",
            cfg.t_eval
        )));
    }
    let force = model_force(&ckpt.model, &ckpt.norm, cfg.kbt, cfg.t_eval);
    langevin(force, cfg, x0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic(x: &Tensor, f: &mut Tensor) -> Result<()> {
        for (o, i) in f.data_mut().iter_mut().zip(x.data()) {
            *o = -i;
        }
        Ok(())
    }

    #[test]
    fn stores_every_save_every_th_position() {
        let cfg = LangevinConfig {
            n_steps: 100,
            save_every: 10,
            kbt: 1.0,
            mass: 1.0,
            n_chains: 3,
            ..LangevinConfig::default()
        };
        let x0 = Tensor::zeros(vec![3, 2]);
        let t = langevin(harmonic, &cfg, &x0).unwrap();
        assert_eq!(t.samples.len(), 30);
        assert_eq!(t.n_chains(), 3);
        assert_eq!(&t.chain[..11], &[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn chain_paths_do_not_depend_on_chain_count() {
        let cfg = LangevinConfig {
            n_steps: 200,
            save_every: 20,
            kbt: 1.0,
            ..LangevinConfig::default()
        };
        let one = langevin(harmonic, &cfg, &Tensor::zeros(vec![1, 2])).unwrap();
        let four = langevin(harmonic, &cfg, &Tensor::zeros(vec![4, 2])).unwrap();
        assert_eq!(one.chain_samples(0), four.chain_samples(0));
        assert_ne!(four.chain_samples(0), four.chain_samples(1));
        let again = langevin(harmonic, &cfg, &Tensor::zeros(vec![4, 2])).unwrap();
        assert_eq!(four, again);
    }

    #[test]
    fn divergence_guard_names_chain_and_step() {
        let cfg = LangevinConfig {
            n_steps: 1000,
            save_every: 1,
            kbt: 1.0,
            ..LangevinConfig::default()
        };
        let push = |x: &Tensor, f: &mut Tensor| {
            for (o, i) in f.data_mut().iter_mut().zip(x.data()) {
                *o = 1e4 * (1.0 + i.abs());
            }
            Ok(())
        };
        let err = langevin(push, &cfg, &Tensor::zeros(vec![2, 2])).unwrap_err();
        match err {
            Error::NumericFault(m) => assert!(m.contains("chain 0") && m.contains("step")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn free_diffusion_is_linear_in_time() {
        // Strong friction: MSD per dimension approaches 2 (kBT / (M gamma)) t.
        let (gamma, kbt, mass, dt) = (50.0, 1.0, 1.0, 0.002);
        let cfg = LangevinConfig {
            dt,
            n_steps: 2000,
            save_every: 500,
            kbt,
            mass,
            gamma,
            n_chains: 2000,
            ..LangevinConfig::default()
        };
        let zero = |_: &Tensor, f: &mut Tensor| {
            f.data_mut().fill(0.0);
            Ok(())
        };
        let traj = langevin(zero, &cfg, &Tensor::zeros(vec![2000, 1])).unwrap();
        let d = kbt / (mass * gamma);
        for k in 0..4 {
            let t = (k + 1) as f64 * 500.0 * dt;
            let vals: Vec<f64> = (0..2000).map(|c| traj.samples.point(c * 4 + k)[0]).collect();
            let msd = vals.iter().map(|v| v * v).sum::<f64>() / 2000.0;
            // Ballistic start adds -(1 - e^{-gamma t}) / gamma^2 per unit D.
            let want = 2.0 * d * (t - (1.0 - (-gamma * t).exp()) / gamma);
            let se = want * (2.0f64 / 2000.0).sqrt();
            assert!((msd - want).abs() < 3.0 * se, "t={t} msd={msd} want={want}");
        }
    }

    #[test]
    fn unit_normalization_scales_score_by_kbt() {
        let stats = NormStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 2.0],
        };
        assert_eq!(score_to_force(&[1.0, 1.0], 23.0, &stats), vec![23.0, 11.5]);
    }

    #[test]
    fn bad_configs_rejected() {
        let x0 = Tensor::zeros(vec![1, 2]);
        for cfg in [
            LangevinConfig { dt: 0.0, ..LangevinConfig::default() },
            LangevinConfig { save_every: 0, ..LangevinConfig::default() },
            LangevinConfig { t_eval: 1.5, ..LangevinConfig::default() },
        ] {
            assert!(langevin(harmonic, &cfg, &x0).is_err());
        }
    }
}
