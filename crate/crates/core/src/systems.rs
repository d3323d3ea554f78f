//! Analytic benchmark potentials and reference Boltzmann data.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::samples::SampleSet;
use crate::simulate::{langevin, LangevinConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToySystem {
    MuellerBrown,
    /// Two isotropic Gaussians at (-1, 0) and (+1, 0), std 0.2, weights 2/3 and 1/3.
    GaussianMixture2,
}

/// (prefactor, a, b, c, x0, y0) of `A exp(a (x-x0)^2 + b (x-x0)(y-y0) + c (y-y0)^2)`.
const MUELLER_BROWN_TERMS: [[f64; 6]; 4] = [
    [-200.0, -1.0, 0.0, -10.0, 1.0, 0.0],
    [-100.0, -1.0, 0.0, -10.0, 0.0, 0.5],
    [-170.0, -6.5, 11.0, -6.5, -0.5, 1.5],
    [15.0, 0.7, 0.6, 0.7, -1.0, 1.0],
];

pub const MIXTURE_MEANS: [[f64; 2]; 2] = [[-1.0, 0.0], [1.0, 0.0]];
pub const MIXTURE_STD: f64 = 0.2;
pub const MIXTURE_WEIGHTS: [f64; 2] = [2.0 / 3.0, 1.0 / 3.0];

/// Bound on `|x|_inf` beyond which a trajectory counts as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e3;

impl ToySystem {
    pub fn dim(&self) -> usize {
        2
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToySystem::MuellerBrown => "mueller-brown",
            ToySystem::GaussianMixture2 => "gaussian-mixture-2",
        }
    }

    /// Potential energy. For the Gaussian mixture this is `-ln p(x)`.
    pub fn potential(&self, x: &[f64]) -> f64 {
        match self {
            ToySystem::MuellerBrown => MUELLER_BROWN_TERMS
                .iter()
                .map(|&[amp, a, b, c, x0, y0]| {
                    let dx = x[0] - x0;
                    let dy = x[1] - y0;
                    amp * (a * dx * dx + b * dx * dy + c * dy * dy).exp()
                })
                .sum(),
            ToySystem::GaussianMixture2 => -mixture_density(x).ln(),
        }
    }

    /// Exact gradient of [`ToySystem::potential`].
    pub fn gradient(&self, x: &[f64]) -> [f64; 2] {
        match self {
            ToySystem::MuellerBrown => {
                let mut g = [0.0; 2];
                for &[amp, a, b, c, x0, y0] in &MUELLER_BROWN_TERMS {
                    let dx = x[0] - x0;
                    let dy = x[1] - y0;
                    let e = amp * (a * dx * dx + b * dx * dy + c * dy * dy).exp();
                    g[0] += e * (2.0 * a * dx + b * dy);
                    g[1] += e * (b * dx + 2.0 * c * dy);
                }
                g
            }
            ToySystem::GaussianMixture2 => {
                let var = MIXTURE_STD * MIXTURE_STD;
                let mut num = [0.0; 2];
                let mut den = 0.0;
                for (m, w) in MIXTURE_MEANS.iter().zip(MIXTURE_WEIGHTS) {
                    let d = [x[0] - m[0], x[1] - m[1]];
                    let p = w * (-(d[0] * d[0] + d[1] * d[1]) / (2.0 * var)).exp();
                    num[0] += p * d[0] / var;
                    num[1] += p * d[1] / var;
                    den += p;
                }
                [num[0] / den, num[1] / den]
            }
        }
    }

    /// Deepest basin, used as the starting point of reference runs.
    pub fn start_point(&self) -> [f64; 2] {
        match self {
            ToySystem::MuellerBrown => [-0.558, 1.442],
            ToySystem::GaussianMixture2 => MIXTURE_MEANS[0],
        }
    }

    /// Draws `n` i.i.d. points from the Gaussian mixture.
    pub fn sample_direct(&self, n: usize, seed: u64) -> Result<SampleSet> {
        if *self != ToySystem::GaussianMixture2 {
            return Err(Error::Contract(format!(
                "{} has no direct sampler; use generate_reference",
                self.name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let k = usize::from(rng.random::<f64>() >= MIXTURE_WEIGHTS[0]);
            for m in MIXTURE_MEANS[k] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + MIXTURE_STD * z);
            }
        }
        SampleSet::from_points(Tensor::new(vec![n, 2], data)?)
    }
}

fn mixture_density(x: &[f64]) -> f64 {
    let var = MIXTURE_STD * MIXTURE_STD;
    MIXTURE_MEANS
        .iter()
        .zip(MIXTURE_WEIGHTS)
        .map(|(m, w)| {
            let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
            w * (-d2 / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var)
        })
        .sum()
}

impl fmt::Display for ToySystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToySystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mueller-brown" | "mueller_brown" | "muller-brown" => Ok(ToySystem::MuellerBrown),
            "gaussian-mixture-2" | "gaussian_mixture_2" => Ok(ToySystem::GaussianMixture2),
            other => Err(Error::Config(format!("unknown system {other:?}"))),
        }
    }
}

/// Settings of a reference Langevin run on the true potential.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub n_steps: usize,
    pub save_every: usize,
    pub kbt: f64,
    pub dt: f64,
    pub mass: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    /// Five million steps at kBT = 23, dt = 0.005, mass 0.5, keeping every
    /// 50th position (100k samples).
    fn default() -> Self {
        ReferenceConfig {
            n_steps: 5_000_000,
            save_every: 50,
            kbt: 23.0,
            dt: 0.005,
            mass: 0.5,
            gamma: 1.0,
            seed: 0,
        }
    }
}

/// Runs Langevin dynamics on `-grad U` from the system's start point and
/// returns the `n_steps / save_every` stored positions.
pub fn generate_reference(system: ToySystem, cfg: &ReferenceConfig) -> Result<SampleSet> {
    if cfg.save_every == 0 || cfg.n_steps < cfg.save_every {
        return Err(Error::Config(format!(
            "need n_steps >= save_every >= 1, got {} and {}",
            cfg.n_steps, cfg.save_every
        )));
    }
    let lcfg = LangevinConfig {
        dt: cfg.dt,
        n_steps: cfg.n_steps,
        kbt: cfg.kbt,
        mass: cfg.mass,
        gamma: cfg.gamma,
        save_every: cfg.save_every,
        n_chains: 1,
        seed: cfg.seed,
        ..LangevinConfig::default()
    };
    let start = system.start_point();
    let x0 = Tensor::new(vec![1, 2], start.to_vec())?;
    let traj = langevin(
        |x: &Tensor, f: &mut Tensor| {
            for (xi, fi) in x.iter_rows().zip(f.data_mut().chunks_exact_mut(2)) {
                let g = system.gradient(xi);
                fi[0] = -g[0];
                fi[1] = -g[1];
            }
            Ok(())
        },
        &lcfg,
        &x0,
    )?;
    Ok(traj.samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mueller_brown_value_at_one_zero() {
        // Terms: -200, -100 e^{-3.5}, ~0, 15 e^{2.3}.
        let expected = -200.0 - 100.0 * (-3.5f64).exp() + 15.0 * 2.3f64.exp()
            - 170.0 * (-54.0f64).exp();
        let u = ToySystem::MuellerBrown.potential(&[1.0, 0.0]);
        assert!((u - expected).abs() < 1e-12);
        assert!((u - (-53.41)).abs() < 5e-3, "{u}");
    }

    #[test]
    fn mueller_brown_grows_along_positive_x() {
        let sys = ToySystem::MuellerBrown;
        assert!(sys.potential(&[5.0, 0.0]) > 1e3);
        assert!(sys.potential(&[10.0, 0.0]) > sys.potential(&[5.0, 0.0]));
    }

    fn fd_gradient(sys: ToySystem, x: [f64; 2], h: f64) -> [f64; 2] {
        let mut g = [0.0; 2];
        for j in 0..2 {
            let mut p = x;
            let mut m = x;
            p[j] += h;
            m[j] -= h;
            g[j] = (sys.potential(&p) - sys.potential(&m)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradients_match_finite_differences() {
        for sys in [ToySystem::MuellerBrown, ToySystem::GaussianMixture2] {
            for x in [[0.0, 0.0], [-0.5, 1.4], [0.6, 0.03], [-0.9, 0.1]] {
                let g = sys.gradient(&x);
                let fd = fd_gradient(sys, x, 1e-6);
                let norm = g[0].hypot(g[1]).max(1e-12);
                let err = (g[0] - fd[0]).hypot(g[1] - fd[1]) / norm;
                assert!(err < 1e-8, "{sys} at {x:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn mixture_weights_within_three_standard_errors() {
        let n = 20_000;
        let s = ToySystem::GaussianMixture2.sample_direct(n, 5).unwrap();
        let left = s.points().iter_rows().filter(|r| r[0] < 0.0).count() as f64 / n as f64;
        let w = MIXTURE_WEIGHTS[0];
        let se = (w * (1.0 - w) / n as f64).sqrt();
        assert!((left - w).abs() < 3.0 * se, "left fraction {left}");
    }

    #[test]
    fn reference_counts_and_reproducibility() {
        let cfg = ReferenceConfig {
            n_steps: 50,
            save_every: 50,
            seed: 3,
            ..ReferenceConfig::default()
        };
        let s = generate_reference(ToySystem::MuellerBrown, &cfg).unwrap();
        assert_eq!(s.len(), 1);
        let cfg = ReferenceConfig {
            n_steps: 20_000,
            ..cfg
        };
        let a = generate_reference(ToySystem::MuellerBrown, &cfg).unwrap();
        let b = generate_reference(ToySystem::MuellerBrown, &cfg).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a, b);
        assert!(generate_reference(
            ToySystem::MuellerBrown,
            &ReferenceConfig {
                n_steps: 10,
                save_every: 50,
                ..cfg
            }
        )
        .is_err());
    }
}
