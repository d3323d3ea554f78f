use std::fmt;

use super::{EnergyField, Mlp, ScoreField};
use crate::error::{Error, Result};
use crate::nd::Tensor;

/// Diffusion-time interval `[lo, hi)`. The interval ending at 1 also owns
/// `t = 1`, where reverse sampling starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeInterval {
    pub lo: f64,
    pub hi: f64,
}

impl TimeInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("invalid time interval [{lo}, {hi})")));
        }
        Ok(TimeInterval { lo, hi })
    }

    pub fn full() -> Self {
        TimeInterval { lo: 0.0, hi: 1.0 }
    }

    pub fn contains(&self, t: f64) -> bool {
        t > 0.0 && t >= self.lo && (t < self.hi || (self.hi == 1.0 && t == 1.0))
    }
}

impl fmt::Display for TimeInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == 0.0 {
            write!(f, "({}, {})", self.lo, self.hi)
        } else {
            write!(f, "[{}, {})", self.lo, self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub interval: TimeInterval,
    pub net: Mlp,
}

/// Experts on disjoint time intervals covering `(0, 1]`; exactly one is
/// active at any time.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMixture {
    experts: Vec<Expert>,
}

/// Checks that `intervals` are ordered, contiguous and cover `(0, 1]`.
pub(crate) fn check_partition(intervals: &[TimeInterval]) -> Result<()> {
    let Some(first) = intervals.first() else {
        return Err(Error::Config("at least one interval is required".into()));
    };
    if first.lo != 0.0 {
        return Err(Error::Config(format!("first interval starts at {}, not 0", first.lo)));
    }
    for w in intervals.windows(2) {
        if w[0].hi != w[1].lo {
            return Err(Error::Config(format!(
                "intervals {} and {} overlap or leave a gap",
                w[0], w[1]
            )));
        }
    }
    let last = intervals[intervals.len() - 1];
    if last.hi != 1.0 {
        return Err(Error::Config(format!("last interval ends at {}, not 1", last.hi)));
    }
    Ok(())
}

impl ExpertMixture {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        let intervals: Vec<_> = experts.iter().map(|e| e.interval).collect();
        check_partition(&intervals)?;
        let dim = experts[0].net.spec().dim;
        if experts.iter().any(|e| e.net.spec().dim != dim) {
            return Err(Error::Config("experts disagree on dimension".into()));
        }
        Ok(ExpertMixture { experts })
    }

    /// A single network on `(0, 1]`.
    pub fn single(net: Mlp) -> Self {
        ExpertMixture {
            experts: vec![Expert {
                interval: TimeInterval::full(),
                net,
            }],
        }
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn into_experts(self) -> Vec<Expert> {
        self.experts
    }

    /// Index of the expert active at `t`.
    pub fn route(&self, t: f64) -> Result<usize> {
        self.experts
            .iter()
            .position(|e| e.interval.contains(t))
            .ok_or_else(|| Error::Domain(format!("time {t} is outside every expert interval")))
    }

    /// One-hot gating weights at `t`.
    pub fn gating(&self, t: f64) -> Result<Vec<f64>> {
        let k = self.route(t)?;
        Ok((0..self.experts.len()).map(|i| f64::from(u8::from(i == k))).collect())
    }

    pub fn expert_at(&self, t: f64) -> Result<&Mlp> {
        Ok(&self.experts[self.route(t)?].net)
    }

    pub fn count_params(&self) -> usize {
        self.experts.iter().map(|e| e.net.count_params()).sum()
    }

    /// True when the expert active at `t` has an energy.
    pub fn conservative_at(&self, t: f64) -> Result<bool> {
        Ok(self.expert_at(t)?.is_conservative())
    }

    /// Applies `f` to each group of rows that share an expert and scatters
    /// the `width`-wide results back into row order.
    fn dispatch<F>(&self, x: &Tensor, t: &[f64], width: usize, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&Mlp, &Tensor, &[f64]) -> Result<Vec<f64>>,
    {
        let routes: Vec<usize> = t.iter().map(|&ti| self.route(ti)).collect::<Result<_>>()?;
        if routes.windows(2).all(|w| w[0] == w[1]) {
            let k = routes.first().copied().unwrap_or(0);
            return f(&self.experts[k].net, x, t);
        }
        let dim = x.cols();
        let mut out = vec![0.0; t.len() * width];
        for k in 0..self.experts.len() {
            let idx: Vec<usize> = (0..t.len()).filter(|&i| routes[i] == k).collect();
            if idx.is_empty() {
                continue;
            }
            let mut sub = Vec::with_capacity(idx.len() * dim);
            for &i in &idx {
                sub.extend_from_slice(x.row(i));
            }
            let sub_t: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            let res = f(
                &self.experts[k].net,
                &Tensor::from_vec_unchecked(vec![idx.len(), dim], sub),
                &sub_t,
            )?;
            for (n, &i) in idx.iter().enumerate() {
                out[i * width..(i + 1) * width].copy_from_slice(&res[n * width..(n + 1) * width]);
            }
        }
        Ok(out)
    }
}

impl ScoreField for ExpertMixture {
    fn dim(&self) -> usize {
        self.experts[0].net.spec().dim
    }

    fn score_batch(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let dim = self.dim();
        let data = self.dispatch(x, t, dim, |net, x, t| Ok(net.score_batch(x, t)?.into_data()))?;
        Ok(Tensor::from_vec_unchecked(vec![t.len(), dim], data))
    }
}

impl EnergyField for ExpertMixture {
    fn energy_batch(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        self.dispatch(x, t, 1, |net, x, t| net.energy_batch(x, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy_model::MlpSpec;

    fn toy_mixture() -> ExpertMixture {
        let bounds = [(0.0, 0.1), (0.1, 0.6), (0.6, 1.0)];
        let experts = bounds
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| Expert {
                interval: TimeInterval::new(lo, hi).unwrap(),
                net: Mlp::new(MlpSpec::new(2, vec![4], i == 0), i as u64),
            })
            .collect();
        ExpertMixture::new(experts).unwrap()
    }

    #[test]
    fn routing_follows_intervals() {
        let m = toy_mixture();
        assert_eq!(m.route(0.05).unwrap(), 0);
        assert_eq!(m.route(0.1).unwrap(), 1);
        assert_eq!(m.route(0.6).unwrap(), 2);
        assert_eq!(m.route(1.0).unwrap(), 2);
        assert!(matches!(m.route(0.0), Err(Error::Domain(_))));
        assert!(matches!(m.route(1.2), Err(Error::Domain(_))));
    }

    #[test]
    fn gating_is_a_partition_of_unity() {
        let m = toy_mixture();
        for i in 1..=10_000 {
            let t = i as f64 / 10_000.0;
            let w = m.gating(t).unwrap();
            assert_eq!(w.iter().sum::<f64>(), 1.0);
            assert_eq!(w.iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    #[test]
    fn mixed_batch_dispatch_matches_per_expert() {
        let m = toy_mixture();
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let t = [0.05, 0.7, 0.3];
        let s = m.score_batch(&x, &t).unwrap();
        for i in 0..3 {
            let direct = m.expert_at(t[i]).unwrap().score(x.row(i), t[i]).unwrap();
            assert_eq!(s.row(i), &direct[..]);
        }
        assert!(matches!(m.energy_batch(&x, &t), Err(Error::Contract(_))));
        assert!(m.energy_batch(&x, &[0.01, 0.02, 0.03]).is_ok());
    }

    #[test]
    fn bad_partitions_rejected() {
        let net = || Mlp::new(MlpSpec::new(2, vec![2], true), 0);
        let gap = vec![
            Expert { interval: TimeInterval::new(0.0, 0.3).unwrap(), net: net() },
            Expert { interval: TimeInterval::new(0.4, 1.0).unwrap(), net: net() },
        ];
        assert!(ExpertMixture::new(gap).is_err());
        let short = vec![Expert { interval: TimeInterval::new(0.0, 0.9).unwrap(), net: net() }];
        assert!(ExpertMixture::new(short).is_err());
        assert!(TimeInterval::new(0.5, 0.5).is_err());
    }

    #[test]
    fn parameter_total_is_sum_over_experts() {
        let m = toy_mixture();
        let sum: usize = m.experts().iter().map(|e| e.net.count_params()).sum();
        assert_eq!(m.count_params(), sum);
    }
}
