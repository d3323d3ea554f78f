//! Training of score models with the combined objective
//! `L_DSM + alpha L_FP`, per-expert interval restriction and presets for the
//! toy benchmark.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{dsm_terms, perturb, sample_reverse, NoiseSchedule, PerturbedBatch, ReverseConfig, Weighting};
use crate::energy_model::{EnergyField, Expert, ExpertMixture, Mlp, MlpSpec, TimeInterval};
use crate::error::{Error, Result};
use crate::fokker_planck::{FpConfig, WeakPlan, DRAWS};
use crate::nd::{ParamVector, Tensor};
use crate::par::map_indexed;
use crate::samples::SampleSet;
use crate::T_EPS;

/// Per-dimension mean and standard deviation of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(data: &SampleSet) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(Error::Config("normalization needs at least two samples".into()));
        }
        let dim = data.dim();
        let mut mean = vec![0.0; dim];
        for p in data.points().iter_rows() {
            for j in 0..dim {
                mean[j] += p[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for p in data.points().iter_rows() {
            for j in 0..dim {
                var[j] += (p[j] - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / (n - 1) as f64).sqrt()).collect();
        if let Some(j) = std.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("dimension {j} has zero variance")));
        }
        Ok(NormStats { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.mean.len() {
            return Err(Error::Shape(format!(
                "{cols} columns, normalization has {}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize_points(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x.cols())?;
        let d = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.mean[k % d]) / self.std[k % d])
            .collect();
        Ok(Tensor::from_vec_unchecked(x.shape().to_vec(), data))
    }

    pub fn denormalize_points(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z.cols())?;
        let d = z.cols();
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v * self.std[k % d] + self.mean[k % d])
            .collect();
        Ok(Tensor::from_vec_unchecked(z.shape().to_vec(), data))
    }
}

/// Standardizes every column to zero mean and unit variance.
pub fn normalize(data: &SampleSet) -> Result<(SampleSet, NormStats)> {
    let stats = NormStats::fit(data)?;
    let z = stats.normalize_points(data.points())?;
    Ok((SampleSet::new(data.columns().to_vec(), z)?, stats))
}

pub fn denormalize(data: &SampleSet, stats: &NormStats) -> Result<SampleSet> {
    SampleSet::new(data.columns().to_vec(), stats.denormalize_points(data.points())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    /// Times are drawn uniformly from this interval, floored at `T_EPS`.
    pub interval: TimeInterval,
    pub seed: u64,
    pub spec: MlpSpec,
    pub weighting: Weighting,
    /// Fraction of each batch that also enters the Fokker-Planck term.
    pub fp_fraction: f64,
    /// Iterations per progress-log line.
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(spec: MlpSpec, interval: TimeInterval, epochs: usize, alpha: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            alpha,
            interval,
            seed,
            spec,
            weighting: Weighting::SigmaSquared,
            fp_fraction: 1.0,
            log_every: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.epochs == 0 || self.log_every == 0 {
            return Err(Error::Config("need batch_size >= 2, epochs >= 1, log_every >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::Config("need learning_rate > 0, weight_decay >= 0, alpha >= 0".into()));
        }
        if !(self.fp_fraction >= 0.25 && self.fp_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fp_fraction {} outside [0.25, 1]",
                self.fp_fraction
            )));
        }
        if self.interval.hi <= T_EPS {
            return Err(Error::Config(format!("interval {} lies below {T_EPS}", self.interval)));
        }
        if self.alpha > 0.0 && !self.spec.conservative {
            return Err(Error::Config(
                "the Fokker-Planck term needs a conservative network".into(),
            ));
        }
        Ok(())
    }

    fn time_range(&self) -> (f64, f64) {
        (self.interval.lo.max(T_EPS), self.interval.hi)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if !params.same_layout(grad) || params.total_count() != self.m.len() {
            return Err(Error::Shape("gradient layout differs from parameters".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let mut k = 0;
        for s in 0..params.segments().len() {
            let g = grad.segment_at(s).data();
            let p = params.segment_at_mut(s).data_mut();
            for (pi, gi) in p.iter_mut().zip(g) {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gi;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gi * gi;
                let mh = self.m[k] / c1;
                let vh = self.v[k] / c2;
                *pi -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *pi);
                k += 1;
            }
        }
        Ok(())
    }
}

/// A perturbed batch plus the rows and smoothing draws used by the
/// Fokker-Planck term.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBatch {
    pub batch: PerturbedBatch,
    pub fp_rows: Vec<usize>,
    /// `[2, fp_rows, dim]` Gaussian draws with standard deviation `sigma_weak`.
    pub fp_draws: Vec<f64>,
}

impl ObjectiveBatch {
    /// Noises `x0` at uniform times in `[lo, hi)` and picks the first
    /// `fraction` of the rows whose time stencil fits in `(0, 1)`.
    pub fn draw<R: Rng + ?Sized>(
        schedule: &NoiseSchedule,
        x0: &Tensor,
        (lo, hi): (f64, f64),
        fp: &FpConfig,
        fraction: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let t: Vec<f64> = (0..x0.rows()).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        let batch = perturb(schedule, x0, &t, rng)?;
        let mut fp_rows = Vec::new();
        let mut fp_draws = Vec::new();
        if fp.alpha > 0.0 {
            let valid: Vec<usize> = (0..t.len()).filter(|&i| fp.stencil_valid(t[i])).collect();
            let keep = ((valid.len() as f64) * fraction).ceil() as usize;
            fp_rows = valid[..keep.min(valid.len())].to_vec();
            let n = DRAWS * fp_rows.len() * x0.cols();
            fp_draws = (0..n)
                .map(|_| fp.sigma_weak * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
        }
        Ok(ObjectiveBatch { batch, fp_rows, fp_draws })
    }
}

/// Loss values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Losses {
    pub dsm: f64,
    pub fp: f64,
}

impl Losses {
    pub fn total(&self, alpha: f64) -> f64 {
        self.dsm + alpha * self.fp
    }
}

/// `L_DSM + alpha L_FP` on one batch and, if requested, its exact parameter
/// gradient. Both terms share one forward pass over the stacked points.
pub fn objective(
    net: &Mlp,
    schedule: &NoiseSchedule,
    ob: &ObjectiveBatch,
    weighting: Weighting,
    fp: &FpConfig,
    with_grad: bool,
) -> Result<(Losses, Option<ParamVector>)> {
    let batch = &ob.batch;
    let n = batch.len();
    let dim = batch.xt.cols();
    let use_fp = fp.alpha > 0.0 && !ob.fp_rows.is_empty();
    if use_fp && !net.is_conservative() {
        return Err(Error::Contract("the Fokker-Planck term needs a conservative network".into()));
    }
    let plan = if use_fp {
        let mut sub = Vec::with_capacity(ob.fp_rows.len() * dim);
        for &i in &ob.fp_rows {
            sub.extend_from_slice(batch.xt.row(i));
        }
        let t: Vec<f64> = ob.fp_rows.iter().map(|&i| batch.t[i]).collect();
        let x = Tensor::from_vec_unchecked(vec![ob.fp_rows.len(), dim], sub);
        Some(WeakPlan::with_draws(&x, &t, ob.fp_draws.clone(), fp)?)
    } else {
        None
    };
    let (points, times) = match &plan {
        Some(p) => {
            let mut pts = batch.xt.data().to_vec();
            pts.extend_from_slice(p.points.data());
            let mut ts = batch.t.clone();
            ts.extend_from_slice(&p.times);
            (Tensor::from_vec_unchecked(vec![ts.len(), dim], pts), ts)
        }
        None => (batch.xt.clone(), batch.t.clone()),
    };
    let fwd = net.forward(&points, &times)?;
    let score = fwd.score(dim);
    let head = Tensor::from_vec_unchecked(vec![n, dim], score.data()[..n * dim].to_vec());
    let (dsm, dsm_cot) = dsm_terms(&head, schedule, batch, weighting, with_grad)?;
    let mut losses = Losses { dsm, fp: 0.0 };
    let mut c_energy = None;
    let mut c_score = dsm_cot;
    if let Some(p) = &plan {
        let rest = Tensor::from_vec_unchecked(vec![p.points.rows(), dim], score.data()[n * dim..].to_vec());
        let (l, cot) = p.loss(schedule, fp, &fwd.output[n..], &rest, with_grad)?;
        losses.fp = l;
        if let (Some((ce, cs)), Some(head_cot)) = (cot, c_score.take()) {
            let mut e = vec![0.0; n];
            e.extend(ce.iter().map(|c| fp.alpha * c));
            let mut s = head_cot.into_data();
            s.extend(cs.data().iter().map(|c| fp.alpha * c));
            c_energy = Some(e);
            c_score = Some(Tensor::from_vec_unchecked(vec![times.len(), dim], s));
        }
    }
    if !with_grad {
        return Ok((losses, None));
    }
    let grad = net.param_grad(&fwd, c_energy.as_deref(), c_score.as_ref())?;
    Ok((losses, Some(grad)))
}

/// One progress-log line: means over the preceding `log_every` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub iteration: usize,
    pub dsm: f64,
    pub fp: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.6e} {:.6e}", self.iteration, self.dsm, self.fp)
    }
}

/// A trained expert with its loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRun {
    pub net: Mlp,
    pub config: TrainConfig,
    pub dsm_history: Vec<f64>,
    pub fp_history: Vec<f64>,
    pub log: Vec<LogLine>,
}

impl ExpertRun {
    /// Mean losses over the last `k` iterations.
    pub fn trailing(&self, k: usize) -> Losses {
        let tail = |h: &[f64]| {
            let s = &h[h.len().saturating_sub(k)..];
            if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 }
        };
        Losses {
            dsm: tail(&self.dsm_history),
            fp: tail(&self.fp_history),
        }
    }

    /// Mean losses over the first `k` iterations.
    pub fn leading(&self, k: usize) -> Losses {
        let head = |h: &[f64]| {
            let s = &h[..k.min(h.len())];
            if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 }
        };
        Losses {
            dsm: head(&self.dsm_history),
            fp: head(&self.fp_history),
        }
    }
}

/// Trains one network on normalized `data` with times restricted to
/// `cfg.interval`. `fp.alpha` is replaced by `cfg.alpha`.
pub fn train_expert(
    data: &SampleSet,
    cfg: &TrainConfig,
    fp: &FpConfig,
    schedule: &NoiseSchedule,
) -> Result<ExpertRun> {
    cfg.validate()?;
    let fp = FpConfig { alpha: cfg.alpha, ..fp.clone() };
    fp.validate()?;
    if data.dim() != cfg.spec.dim {
        return Err(Error::Shape(format!(
            "data has {} columns, model expects {}",
            data.dim(),
            cfg.spec.dim
        )));
    }
    if data.len() < 2 {
        return Err(Error::Config("need at least two training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new(cfg.spec.clone(), rng.random());
    let mut opt = AdamW::new(net.count_params(), cfg.learning_rate, cfg.weight_decay);
    let dim = data.dim();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut dsm_history = Vec::new();
    let mut fp_history = Vec::new();
    let mut log = Vec::new();
    let range = cfg.time_range();
    let mut iteration = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let mut x0 = Vec::with_capacity(idx.len() * dim);
            for &i in idx {
                x0.extend_from_slice(data.point(i));
            }
            let x0 = Tensor::from_vec_unchecked(vec![idx.len(), dim], x0);
            let ob = ObjectiveBatch::draw(schedule, &x0, range, &fp, cfg.fp_fraction, &mut rng)?;
            let (losses, grad) = objective(&net, schedule, &ob, cfg.weighting, &fp, true)
                .map_err(|e| diagnose(e, iteration, &ob.batch))?;
            let grad = grad.expect("gradient requested");
            grad.check_finite("parameter gradient")
                .map_err(|e| diagnose(e, iteration, &ob.batch))?;
            opt.step(net.params_mut(), &grad)?;
            iteration += 1;
            dsm_history.push(losses.dsm);
            fp_history.push(losses.fp);
            if iteration % cfg.log_every == 0 {
                let k = cfg.log_every;
                let mean = |h: &[f64]| h[h.len() - k..].iter().sum::<f64>() / k as f64;
                log.push(LogLine {
                    iteration,
                    dsm: mean(&dsm_history),
                    fp: mean(&fp_history),
                });
            }
        }
    }
    Ok(ExpertRun {
        net,
        config: cfg.clone(),
        dsm_history,
        fp_history,
        log,
    })
}

fn diagnose(e: Error, iteration: usize, batch: &PerturbedBatch) -> Error {
    match e {
        Error::NumericFault(m) => {
            let tmin = batch.t.iter().copied().fold(f64::INFINITY, f64::min);
            let tmax = batch.t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let absmax = batch.xt.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            Error::NumericFault(format!(
                "{m} at iteration {iteration}; batch t in [{tmin:.3e}, {tmax:.3e}], max |x_t| = {absmax:.3e}"
            ))
        }
        other => other,
    }
}

/// A trained model with everything needed to use it on physical data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: NoiseSchedule,
    pub norm: NormStats,
    pub model: ExpertMixture,
    pub configs: Vec<TrainConfig>,
    pub fp: FpConfig,
    /// Trailing-100-iteration losses per expert.
    pub final_losses: Vec<Losses>,
}

impl Checkpoint {
    /// Reverse-SDE samples mapped back to physical coordinates.
    pub fn sample(&self, cfg: &ReverseConfig) -> Result<SampleSet> {
        let z = sample_reverse(&self.model, &self.schedule, cfg)?;
        denormalize(&z, &self.norm)
    }

    /// `-log p_t` at physical `points`, up to an additive constant. Needs a
    /// conservative expert at `t`.
    pub fn free_energy(&self, points: &Tensor, t: f64) -> Result<Vec<f64>> {
        if !self.model.conservative_at(t)? {
            return Err(Error::Contract(format!("expert serving t = {t} has no energy")));
        }
        let z = self.norm.normalize_points(points)?;
        let e = self.model.energy_batch(&z, &vec![t; z.rows()])?;
        Ok(e.into_iter().map(|v| -v).collect())
    }
}

/// Result of a training run: the checkpoint and the per-expert histories.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub runs: Vec<ExpertRun>,
}

/// Trains one network over `(0, 1]` on physical `data`.
pub fn train(data: &SampleSet, cfg: &TrainConfig, fp: &FpConfig) -> Result<TrainOutcome> {
    train_mixture(data, std::slice::from_ref(cfg), fp, 1)
}

/// Normalizes physical `data` and trains one expert per config, up to
/// `threads` at a time. The configs' intervals must partition `(0, 1]`.
pub fn train_mixture(
    data: &SampleSet,
    cfgs: &[TrainConfig],
    fp: &FpConfig,
    threads: usize,
) -> Result<TrainOutcome> {
    let intervals: Vec<TimeInterval> = cfgs.iter().map(|c| c.interval).collect();
    crate::energy_model::check_partition(&intervals)?;
    for c in cfgs {
        c.validate()?;
    }
    let (z, norm) = normalize(data)?;
    let schedule = NoiseSchedule::default();
    let runs = map_indexed(cfgs.len(), threads, |k| train_expert(&z, &cfgs[k], fp, &schedule))?;
    let experts = runs
        .iter()
        .map(|r| Expert {
            interval: r.config.interval,
            net: r.net.clone(),
        })
        .collect();
    let checkpoint = Checkpoint {
        schedule,
        norm,
        model: ExpertMixture::new(experts)?,
        configs: cfgs.to_vec(),
        fp: FpConfig { alpha: 0.0, ..fp.clone() },
        final_losses: runs.iter().map(|r| r.trailing(100)).collect(),
    };
    Ok(TrainOutcome { checkpoint, runs })
}

/// Seed of expert `k` derived from a run seed.
pub fn expert_seed(base: u64, k: usize) -> u64 {
    let mut z = base.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Toy-benchmark model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Diffusion,
    Mixture,
    Fp,
    Both,
}

/// Regularization weight of the Fokker-Planck variants.
pub const PRESET_ALPHA: f64 = 0.0005;

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Diffusion, Variant::Mixture, Variant::Fp, Variant::Both];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Diffusion => "diffusion",
            Variant::Mixture => "mixture",
            Variant::Fp => "fp",
            Variant::Both => "both",
        }
    }

    /// Expert configs of the preset for a 2D system.
    pub fn configs(self, seed: u64) -> Vec<TrainConfig> {
        match self {
            Variant::Diffusion | Variant::Fp => {
                let alpha = if self == Variant::Fp { PRESET_ALPHA } else { 0.0 };
                let spec = MlpSpec::new(2, vec![92, 92, 92], true);
                vec![TrainConfig::new(spec, TimeInterval::full(), 180, alpha, expert_seed(seed, 0))]
            }
            Variant::Mixture | Variant::Both => {
                let alpha = if self == Variant::Both { PRESET_ALPHA } else { 0.0 };
                let parts = [
                    (0.0, 0.1, vec![64, 64, 64], true, 120, alpha),
                    (0.1, 0.6, vec![64, 64], false, 30, 0.0),
                    (0.6, 1.0, vec![54, 54], false, 30, 0.0),
                ];
                parts
                    .into_iter()
                    .enumerate()
                    .map(|(k, (lo, hi, hidden, cons, epochs, a))| {
                        let interval = TimeInterval::new(lo, hi).expect("static interval");
                        TrainConfig::new(MlpSpec::new(2, hidden, cons), interval, epochs, a, expert_seed(seed, k))
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}
