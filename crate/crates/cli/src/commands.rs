use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fpdiff::diffusion::{ReverseConfig, Weighting};
use fpdiff::fokker_planck::{fp_error_curve, FpConfig};
use fpdiff::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, ConfigFile, RunManifest};
use fpdiff::metrics::{coordinate_w1, js_distance, pmf_error, Extent, Histogram2D, Report};
use fpdiff::samples::Trajectory;
use fpdiff::simulate::{simulate_model, start_points, LangevinConfig};
use fpdiff::systems::{generate_reference, ReferenceConfig, ToySystem};
use fpdiff::trainer::{train_mixture, TrainConfig, Variant};
use fpdiff::{Error, SampleSet, Tensor};

use crate::grid::Grid;
use crate::{EnergyGrid, Evaluate, FpError, GenData, Plot, Replay, Sample, Simulate, Train};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    /// 2 usage, 3 numeric fault, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::NumericFault(_)) => 3,
            CliError::Core(e) if e.is_io() => 4,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_file(path: &Path, data: &[u8]) -> Result<()> {
    std::fs::write(path, data).map_err(|source| {
        CliError::Core(Error::Io {
            path: path.into(),
            source,
        })
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| {
        CliError::Core(Error::Io {
            path: path.into(),
            source,
        })
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Collects the settings and outputs of one run for its manifest, written
/// next to the main output as `<out>.manifest`.
struct Run {
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn begin(args: Vec<String>) -> Self {
        Run {
            manifest: RunManifest::new(args),
            start: Instant::now(),
        }
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.manifest.config.set(key, value).expect("static keys are valid");
    }

    fn finish(mut self, outputs: &[&Path]) -> Result<()> {
        for p in outputs {
            self.manifest.add_artifact(p)?;
        }
        self.manifest.wall_clock_seconds = self.start.elapsed().as_secs_f64();
        let path = sibling(outputs[0], ".manifest");
        self.manifest.save(&path)?;
        eprintln!("wrote {} ({:.1} s)", path.display(), self.manifest.wall_clock_seconds);
        Ok(())
    }
}

fn parse_extent(text: &str) -> Result<Option<Extent>> {
    if text == "auto" {
        return Ok(None);
    }
    let v: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse().map_err(|_| usage(format!("bad extent `{text}`"))))
        .collect::<Result<_>>()?;
    if v.len() != 4 {
        return Err(usage(format!("extent `{text}` needs x_min:x_max:y_min:y_max")));
    }
    Ok(Some(Extent::new(v[0], v[1], v[2], v[3])?))
}

/// Positions of a sample set, dropping a trailing chain column.
fn positions(set: SampleSet) -> Result<SampleSet> {
    if set.columns().last().map(String::as_str) == Some("chain") {
        return Ok(Trajectory::from_sample_set(&set)?.samples);
    }
    Ok(set)
}

pub fn gen_data(a: &GenData, args: Vec<String>) -> Result<()> {
    let system: ToySystem = a.system.parse()?;
    let cfg = ReferenceConfig {
        n_steps: a.steps,
        save_every: a.save_every,
        kbt: a.kbt,
        dt: a.dt,
        mass: a.mass,
        gamma: a.gamma,
        seed: a.seed,
    };
    let mut run = Run::begin(args);
    run.set("gen.system", system);
    run.set("gen.steps", cfg.n_steps);
    run.set("gen.save_every", cfg.save_every);
    run.set("gen.kbt", cfg.kbt);
    run.set("gen.dt", cfg.dt);
    run.set("gen.mass", cfg.mass);
    run.set("gen.gamma", cfg.gamma);
    run.manifest.seeds = vec![a.seed];
    let set = generate_reference(system, &cfg)?;
    save_dataset(&a.out, &set)?;
    eprintln!("{} samples of {system} -> {}", set.len(), a.out.display());
    run.finish(&[&a.out])
}

const TRAIN_KEYS: [&str; 13] = [
    "train.variant",
    "train.seed",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.weight_decay",
    "train.alpha",
    "train.fp_fraction",
    "train.log_every",
    "train.weighting",
    "fp.sigma_weak",
    "fp.h_s",
    "fp.h_d",
];

fn parse_weighting(s: &str) -> Result<Weighting> {
    match s {
        "sigma2" => Ok(Weighting::SigmaSquared),
        "unit" => Ok(Weighting::Unit),
        _ => Err(usage(format!("unknown weighting `{s}` (sigma2 or unit)"))),
    }
}

fn weighting_name(w: Weighting) -> &'static str {
    match w {
        Weighting::SigmaSquared => "sigma2",
        Weighting::Unit => "unit",
    }
}

/// Preset expert configs with config-file overrides applied.
fn resolve_training(a: &Train) -> Result<(Variant, u64, Vec<TrainConfig>, FpConfig)> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::new(),
    };
    if let Some((k, _)) = file.entries().iter().find(|(k, _)| !TRAIN_KEYS.contains(&k.as_str())) {
        return Err(usage(format!("unknown config key `{k}`")));
    }
    let get = |k: &str| file.get(k).map(str::to_string);
    let num = |k: &str| -> Result<Option<f64>> {
        file.get_parsed::<f64>(k).map_err(|_| usage(format!("`{k}` must be a number")))
    };
    let int = |k: &str| -> Result<Option<usize>> {
        file.get_parsed::<usize>(k).map_err(|_| usage(format!("`{k}` must be a nonnegative integer")))
    };

    let variant_name = match (&a.variant, get("train.variant")) {
        (Some(f), Some(c)) if *f != c => {
            return Err(usage(format!("--variant {f} conflicts with train.variant = {c}")))
        }
        (Some(f), _) => f.clone(),
        (None, Some(c)) => c,
        (None, None) => return Err(usage("a variant is required (--variant or train.variant)")),
    };
    let variant: Variant = variant_name.parse().map_err(|e: Error| usage(e.to_string()))?;
    let file_seed = file
        .get_parsed::<u64>("train.seed")
        .map_err(|_| usage("`train.seed` must be a nonnegative integer"))?;
    let seed = match (a.seed, file_seed) {
        (Some(f), Some(c)) if f != c => return Err(usage(format!("--seed {f} conflicts with train.seed = {c}"))),
        (Some(f), _) => f,
        (None, Some(c)) => c,
        (None, None) => 0,
    };

    let mut cfgs = variant.configs(seed);
    let alpha = num("train.alpha")?;
    if let Some(al) = alpha {
        if al > 0.0 && !matches!(variant, Variant::Fp | Variant::Both) {
            return Err(usage(format!(
                "variant {variant} has no Fokker-Planck term; train.alpha needs fp or both"
            )));
        }
    }
    let weighting = get("train.weighting").map(|w| parse_weighting(&w)).transpose()?;
    for c in &mut cfgs {
        if let Some(v) = int("train.epochs")? {
            c.epochs = v;
        }
        if let Some(v) = int("train.batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = num("train.learning_rate")? {
            c.learning_rate = v;
        }
        if let Some(v) = num("train.weight_decay")? {
            c.weight_decay = v;
        }
        if let (Some(v), true) = (alpha, c.alpha > 0.0) {
            c.alpha = v;
        }
        if let Some(v) = num("train.fp_fraction")? {
            c.fp_fraction = v;
        }
        if let Some(v) = int("train.log_every")? {
            c.log_every = v;
        }
        if let Some(w) = weighting {
            c.weighting = w;
        }
        c.validate().map_err(|e| usage(e.to_string()))?;
    }
    let defaults = FpConfig::default();
    let fp = FpConfig {
        sigma_weak: num("fp.sigma_weak")?.unwrap_or(defaults.sigma_weak),
        h_s: num("fp.h_s")?.unwrap_or(defaults.h_s),
        h_d: num("fp.h_d")?.unwrap_or(defaults.h_d),
        weighting: weighting.unwrap_or(defaults.weighting),
        ..defaults
    };
    fp.validate().map_err(|e| usage(e.to_string()))?;
    Ok((variant, seed, cfgs, fp))
}

pub fn train(a: &Train, threads: usize, args: Vec<String>) -> Result<()> {
    let (variant, seed, cfgs, fp) = resolve_training(a)?;
    let data = positions(load_dataset(&a.data)?)?;
    let mut run = Run::begin(args);
    run.set("train.variant", variant);
    run.set("train.seed", seed);
    run.set("fp.sigma_weak", fp.sigma_weak);
    run.set("fp.h_s", fp.h_s);
    run.set("fp.h_d", fp.h_d);
    for (k, c) in cfgs.iter().enumerate() {
        let p = format!("expert.{k}");
        run.set(&format!("{p}.interval"), c.interval);
        run.set(&format!("{p}.hidden"), format!("{:?}", c.spec.hidden));
        run.set(&format!("{p}.conservative"), c.spec.conservative);
        run.set(&format!("{p}.epochs"), c.epochs);
        run.set(&format!("{p}.batch_size"), c.batch_size);
        run.set(&format!("{p}.learning_rate"), c.learning_rate);
        run.set(&format!("{p}.weight_decay"), c.weight_decay);
        run.set(&format!("{p}.alpha"), c.alpha);
        run.set(&format!("{p}.fp_fraction"), c.fp_fraction);
        run.set(&format!("{p}.weighting"), weighting_name(c.weighting));
        run.set(&format!("{p}.seed"), c.seed);
    }
    run.manifest.seeds = std::iter::once(seed).chain(cfgs.iter().map(|c| c.seed)).collect();
    eprintln!(
        "training {variant} (seed {seed}): {} expert(s), {} parameters, {} samples",
        cfgs.len(),
        cfgs.iter().map(|c| c.spec.param_count()).sum::<usize>(),
        data.len()
    );
    let outcome = train_mixture(&data, &cfgs, &fp, threads)?;
    save_checkpoint(&a.out, &outcome.checkpoint)?;
    let mut log = String::from("# expert iteration dsm_loss fp_loss\n");
    for (k, r) in outcome.runs.iter().enumerate() {
        for line in &r.log {
            log.push_str(&format!("{k} {line}\n"));
        }
        let end = r.trailing(100);
        eprintln!("expert {k}: final dsm {:.5e} fp {:.5e}", end.dsm, end.fp);
    }
    let log_path = sibling(&a.out, ".log");
    write_file(&log_path, log.as_bytes())?;
    run.finish(&[&a.out, &log_path])
}

pub fn sample(a: &Sample, threads: usize, args: Vec<String>) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let cfg = ReverseConfig {
        n: a.n,
        steps: a.steps,
        t_end: a.t_end,
        seed: a.seed,
        threads,
        ..ReverseConfig::default()
    };
    let mut run = Run::begin(args);
    run.set("sample.n", cfg.n);
    run.set("sample.steps", cfg.steps);
    run.set("sample.t_end", cfg.t_end);
    run.set("sample.chunk", cfg.chunk);
    run.manifest.seeds = vec![a.seed];
    let set = ck.sample(&cfg)?;
    save_dataset(&a.out, &set)?;
    eprintln!("{} samples -> {}", set.len(), a.out.display());
    run.finish(&[&a.out])
}

pub fn simulate(a: &Simulate, args: Vec<String>) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let data = positions(load_dataset(&a.data)?)?;
    let cfg = LangevinConfig {
        dt: a.dt,
        n_steps: a.steps,
        kbt: a.kbt,
        mass: a.mass,
        gamma: a.gamma,
        save_every: a.save_every,
        t_eval: a.t_eval,
        n_chains: a.chains,
        seed: a.seed,
        ..LangevinConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let start_seed = a.seed.wrapping_add(1);
    let mut run = Run::begin(args);
    run.set("simulate.t_eval", cfg.t_eval);
    run.set("simulate.chains", cfg.n_chains);
    run.set("simulate.steps", cfg.n_steps);
    run.set("simulate.save_every", cfg.save_every);
    run.set("simulate.dt", cfg.dt);
    run.set("simulate.kbt", cfg.kbt);
    run.set("simulate.mass", cfg.mass);
    run.set("simulate.gamma", cfg.gamma);
    run.manifest.seeds = vec![a.seed, start_seed];
    let x0: Tensor = start_points(&data, cfg.n_chains, start_seed)?;
    let traj = simulate_model(&ck, &cfg, &x0)?;
    save_dataset(&a.out, &traj.to_sample_set())?;
    eprintln!(
        "{} chains, {} stored positions -> {}",
        traj.n_chains(),
        traj.samples.len(),
        a.out.display()
    );
    run.finish(&[&a.out])
}

pub fn evaluate(a: &Evaluate, args: Vec<String>) -> Result<()> {
    let per_axis = (a.bins as f64).sqrt().round() as usize;
    if per_axis == 0 || per_axis * per_axis != a.bins {
        return Err(usage(format!("--bins {} is not a perfect square", a.bins)));
    }
    let metrics: Vec<&str> = a.metrics.split(',').map(str::trim).collect();
    if let Some(m) = metrics.iter().find(|m| !["js", "pmf", "w1"].contains(m)) {
        return Err(usage(format!("unknown metric `{m}` (js, pmf, w1)")));
    }
    let reference = positions(load_dataset(&a.reference)?)?;
    let samples = positions(load_dataset(&a.samples)?)?;
    if reference.dim() != samples.dim() {
        return Err(Error::Shape(format!(
            "reference has {} columns, samples have {}",
            reference.dim(),
            samples.dim()
        ))
        .into());
    }
    let extent = match parse_extent(&a.extent)? {
        Some(e) => e,
        None => Extent::from_reference(&reference)?,
    };
    let mut run = Run::begin(args);
    run.set("evaluate.bins", a.bins);
    run.set("evaluate.extent", extent);
    run.set("evaluate.metrics", metrics.join(","));
    let mut report = Report::default();
    if metrics.contains(&"js") || metrics.contains(&"pmf") {
        let hr = Histogram2D::from_samples(&reference, extent, per_axis, per_axis)?;
        let hs = Histogram2D::from_samples(&samples, extent, per_axis, per_axis)?;
        if metrics.contains(&"js") {
            report.push("js", js_distance(&hr, &hs)?);
        }
        if metrics.contains(&"pmf") {
            report.push("pmf", pmf_error(&hr, &hs)?);
        }
    }
    if metrics.contains(&"w1") {
        for (name, w) in reference.columns().iter().zip(coordinate_w1(&samples, &reference)?) {
            report.push(format!("w1.{name}"), w);
        }
    }
    print!("{}", report.to_text());
    write_file(&a.out, report.to_text().as_bytes())?;
    let csv = sibling(&a.out, ".csv");
    write_file(&csv, report.to_csv().as_bytes())?;
    run.finish(&[&a.out, &csv])
}

/// `lo:hi:n`, log-spaced from `lo` to `hi` inclusive.
fn parse_t_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || usage(format!("bad --t-grid `{text}`, expected lo:hi:n"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi >= lo && hi < 1.0 && n >= 1) {
        return Err(usage(format!("--t-grid `{text}` needs 0 < lo <= hi < 1 and n >= 1")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut grid: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    grid[0] = lo;
    grid[n - 1] = hi;
    Ok(grid)
}

pub fn fp_error(a: &FpError, args: Vec<String>) -> Result<()> {
    let grid = parse_t_grid(&a.t_grid)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let data = positions(load_dataset(&a.data)?)?;
    let z = SampleSet::new(data.columns().to_vec(), ck.norm.normalize_points(data.points())?)?;
    let mut run = Run::begin(args);
    run.set("fp_error.t_grid", &a.t_grid);
    run.set("fp_error.n_eval", a.n_eval);
    run.manifest.seeds = vec![a.seed];
    let curve = fp_error_curve(&ck.model, &ck.schedule, &z, &grid, &ck.fp, a.n_eval, a.seed)?;
    if !curve.skipped.is_empty() {
        eprintln!(
            "{} grid times are served by experts without an energy and were skipped",
            curve.skipped.len()
        );
    }
    run.set("fp_error.skipped", curve.skipped.len());
    let mut csv = String::from("t,mean_abs_residual\n");
    for (t, e) in &curve.points {
        csv.push_str(&format!("{t:e},{e:e}\n"));
    }
    write_file(&a.out, csv.as_bytes())?;
    run.finish(&[&a.out])
}

pub fn energy_grid(a: &EnergyGrid, args: Vec<String>) -> Result<()> {
    if a.resolution == 0 {
        return Err(usage("--resolution must be positive"));
    }
    let ck = load_checkpoint(&a.ckpt)?;
    if ck.norm.mean.len() != 2 {
        return Err(Error::Shape("energy grids need a 2D model".into()).into());
    }
    let extent = match parse_extent(&a.extent)? {
        Some(e) => e,
        None => {
            let (m, s) = (&ck.norm.mean, &ck.norm.std);
            Extent::new(m[0] - 3.5 * s[0], m[0] + 3.5 * s[0], m[1] - 3.5 * s[1], m[1] + 3.5 * s[1])?
        }
    };
    let mut run = Run::begin(args);
    run.set("energy_grid.t", a.t);
    run.set("energy_grid.extent", extent);
    run.set("energy_grid.resolution", a.resolution);
    let n = a.resolution;
    let mut grid = Grid {
        extent,
        nx: n,
        ny: n,
        values: Vec::new(),
    };
    let mut pts = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (x, y) = grid.center(i, j);
            pts.push(x);
            pts.push(y);
        }
    }
    grid.values = ck.free_energy(&Tensor::new(vec![n * n, 2], pts)?, a.t)?;
    write_file(&a.out, grid.to_text().as_bytes())?;
    run.finish(&[&a.out])
}

pub fn plot(a: &Plot, args: Vec<String>) -> Result<()> {
    let mut run = Run::begin(args);
    let grid = match (&a.input.grid, &a.input.hist) {
        (Some(path), None) => Grid::parse(&read_text(path)?)?,
        (None, Some(path)) => {
            if a.resolution == 0 {
                return Err(usage("--resolution must be positive"));
            }
            let set = positions(load_dataset(path)?)?;
            let extent = Extent::from_reference(&set)?;
            run.set("plot.resolution", a.resolution);
            Grid::free_energy_of(&Histogram2D::from_samples(&set, extent, a.resolution, a.resolution)?)
        }
        _ => return Err(usage("give exactly one of --grid or --hist")),
    };
    let grid = grid.shifted_to_zero();
    write_file(&a.out, &grid.to_ppm())?;
    let text = a.out.with_extension("txt");
    write_file(&text, grid.to_text().as_bytes())?;
    run.finish(&[&a.out, &text])
}

pub fn replay(a: &Replay) -> Result<()> {
    let recorded = RunManifest::load(&a.manifest)?;
    if recorded.command.is_empty() {
        return Err(usage("manifest records no command"));
    }
    eprintln!("replaying: fpdiff {}", recorded.command.join(" "));
    crate::run_args(&recorded.command)?;
    recorded.verify_artifacts()?;
    eprintln!("all {} artifacts reproduced byte for byte", recorded.artifacts.len());
    Ok(())
}
