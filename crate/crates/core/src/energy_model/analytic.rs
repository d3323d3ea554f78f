//! Closed-form score and energy fields used as oracles.

use super::{EnergyField, ScoreField};
use crate::error::{Error, Result};
use crate::nd::Tensor;

/// `E(x) = -|x|^2 / 2`, the stationary density of the VP process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardNormalField {
    dim: usize,
}

impl StandardNormalField {
    pub fn new(dim: usize) -> Self {
        StandardNormalField { dim }
    }
}

impl ScoreField for StandardNormalField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, x: &Tensor, _t: &[f64]) -> Result<Tensor> {
        let data = x.data().iter().map(|v| -v).collect();
        Ok(Tensor::from_vec_unchecked(x.shape().to_vec(), data))
    }
}

impl EnergyField for StandardNormalField {
    fn energy_batch(&self, x: &Tensor, _t: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter_rows().map(|r| -0.5 * r.iter().map(|v| v * v).sum::<f64>()).collect())
    }
}

/// `E(x, t) = -x^T A(t) x / 2 + c t` with `A(t) = A0 + t A1` symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEnergy {
    dim: usize,
    a0: Vec<f64>,
    a1: Vec<f64>,
    c: f64,
}

impl GaussianEnergy {
    pub fn new(dim: usize, a0: Vec<f64>, a1: Vec<f64>, c: f64) -> Result<Self> {
        for a in [&a0, &a1] {
            if a.len() != dim * dim {
                return Err(Error::Shape("matrix must be dim x dim".into()));
            }
            for i in 0..dim {
                for j in 0..dim {
                    if a[i * dim + j] != a[j * dim + i] {
                        return Err(Error::Config("matrix must be symmetric".into()));
                    }
                }
            }
        }
        Ok(GaussianEnergy { dim, a0, a1, c })
    }

    fn matrix(&self, t: f64) -> Vec<f64> {
        self.a0.iter().zip(&self.a1).map(|(a, b)| a + t * b).collect()
    }

    pub fn energy(&self, x: &[f64], t: f64) -> f64 {
        let a = self.matrix(t);
        -0.5 * quad(&a, x, self.dim) + self.c * t
    }

    pub fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let a = self.matrix(t);
        (0..self.dim)
            .map(|i| -(0..self.dim).map(|j| a[i * self.dim + j] * x[j]).sum::<f64>())
            .collect()
    }

    /// Exact divergence of the score, `-tr A(t)`.
    pub fn divergence(&self, t: f64) -> f64 {
        let a = self.matrix(t);
        -(0..self.dim).map(|i| a[i * self.dim + i]).sum::<f64>()
    }

    /// Exact `d E / d t`.
    pub fn time_derivative(&self, x: &[f64]) -> f64 {
        -0.5 * quad(&self.a1, x, self.dim) + self.c
    }
}

fn quad(a: &[f64], x: &[f64], dim: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            s += x[i] * a[i * dim + j] * x[j];
        }
    }
    s
}

impl ScoreField for GaussianEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let data = x.iter_rows().zip(t).flat_map(|(r, &ti)| self.score(r, ti)).collect();
        Ok(Tensor::from_vec_unchecked(x.shape().to_vec(), data))
    }
}

impl EnergyField for GaussianEnergy {
    fn energy_batch(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter_rows().zip(t).map(|(r, &ti)| self.energy(r, ti)).collect())
    }
}

/// `s(x) = A x` for an arbitrary square `A`; not conservative in general.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScore {
    dim: usize,
    a: Vec<f64>,
}

impl LinearScore {
    pub fn new(dim: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != dim * dim {
            return Err(Error::Shape("matrix must be dim x dim".into()));
        }
        Ok(LinearScore { dim, a })
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i * self.dim + i]).sum()
    }
}

impl ScoreField for LinearScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, x: &Tensor, _t: &[f64]) -> Result<Tensor> {
        let d = self.dim;
        let data = x
            .iter_rows()
            .flat_map(|r| (0..d).map(move |i| (0..d).map(|j| self.a[i * d + j] * r[j]).sum::<f64>()))
            .collect();
        Ok(Tensor::from_vec_unchecked(x.shape().to_vec(), data))
    }
}
