//! `FPCK1` checkpoints: magic, `u32` header length, UTF-8 `key = value`
//! header, `u32` segment count, segments (`u16` name length, name, `u64`
//! value count, `f64` values), SHA-256.
//!
//! The header carries a digest of every expert's architecture and parameter
//! layout, so a header edited to describe a different model is rejected even
//! when the file digest is recomputed.

use std::path::Path;

use super::bytes::{put_f64s, put_str, put_u32, put_u64, seal, Reader};
use super::config::ConfigFile;
use super::sha256_hex;
use crate::diffusion::{NoiseSchedule, Weighting};
use crate::energy_model::{Activation, Expert, ExpertMixture, Mlp, MlpSpec, TimeInterval};
use crate::error::{Error, Result};
use crate::fokker_planck::FpConfig;
use crate::nd::{ParamVector, Tensor};
use crate::trainer::{Checkpoint, Losses, NormStats, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FPCK1";

fn weighting_name(w: Weighting) -> &'static str {
    match w {
        Weighting::SigmaSquared => "sigma2",
        Weighting::Unit => "unit",
    }
}

fn parse_weighting(s: &str) -> Result<Weighting> {
    match s {
        "sigma2" => Ok(Weighting::SigmaSquared),
        "unit" => Ok(Weighting::Unit),
        _ => Err(Error::Config(format!("unknown weighting `{s}`"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn split<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad {what} entry `{p}`"))))
        .collect()
}

/// Architecture and parameter layout of every expert, hashed.
fn spec_digest(model: &ExpertMixture) -> String {
    let mut text = String::new();
    for (k, e) in model.experts().iter().enumerate() {
        let s = e.net.spec();
        text.push_str(&format!(
            "{k}:{}:{}:{}:{}:{}:{}\n",
            e.interval.lo,
            e.interval.hi,
            s.dim,
            join(&s.hidden),
            s.conservative,
            s.activation
        ));
        for (name, t) in e.net.params().segments() {
            text.push_str(&format!("{name}:{}\n", t.len()));
        }
    }
    sha256_hex(text.as_bytes())
}

fn config_lines(c: &mut ConfigFile, p: &str, cfg: &TrainConfig) -> Result<()> {
    c.set(&format!("{p}.epochs"), cfg.epochs)?;
    c.set(&format!("{p}.batch_size"), cfg.batch_size)?;
    c.set(&format!("{p}.learning_rate"), cfg.learning_rate)?;
    c.set(&format!("{p}.weight_decay"), cfg.weight_decay)?;
    c.set(&format!("{p}.alpha"), cfg.alpha)?;
    c.set(&format!("{p}.seed"), cfg.seed)?;
    c.set(&format!("{p}.weighting"), weighting_name(cfg.weighting))?;
    c.set(&format!("{p}.fp_fraction"), cfg.fp_fraction)?;
    c.set(&format!("{p}.log_every"), cfg.log_every)
}

fn header(ck: &Checkpoint) -> Result<ConfigFile> {
    let mut c = ConfigFile::new();
    c.set("format", 1)?;
    c.set("schedule.beta_min", ck.schedule.beta_min)?;
    c.set("schedule.beta_max", ck.schedule.beta_max)?;
    c.set("norm.mean", join(&ck.norm.mean))?;
    c.set("norm.std", join(&ck.norm.std))?;
    c.set("fp.sigma_weak", ck.fp.sigma_weak)?;
    c.set("fp.h_s", ck.fp.h_s)?;
    c.set("fp.h_d", ck.fp.h_d)?;
    c.set("fp.weighting", weighting_name(ck.fp.weighting))?;
    c.set("experts", ck.model.experts().len())?;
    if ck.configs.len() != ck.model.experts().len() || ck.final_losses.len() != ck.configs.len() {
        return Err(Error::Shape("one config and one loss pair per expert expected".into()));
    }
    let mut train_text = ConfigFile::new();
    for (k, e) in ck.model.experts().iter().enumerate() {
        let p = format!("expert.{k}");
        let s = e.net.spec();
        c.set(&format!("{p}.interval"), format!("{},{}", e.interval.lo, e.interval.hi))?;
        c.set(&format!("{p}.dim"), s.dim)?;
        c.set(&format!("{p}.hidden"), join(&s.hidden))?;
        c.set(&format!("{p}.conservative"), s.conservative)?;
        c.set(&format!("{p}.activation"), s.activation)?;
        config_lines(&mut c, &format!("{p}.train"), &ck.configs[k])?;
        config_lines(&mut train_text, &format!("{k}"), &ck.configs[k])?;
        c.set(&format!("{p}.final.dsm"), ck.final_losses[k].dsm)?;
        c.set(&format!("{p}.final.fp"), ck.final_losses[k].fp)?;
    }
    c.set("config_digest", sha256_hex(train_text.to_text().as_bytes()))?;
    c.set("spec_digest", spec_digest(&ck.model))?;
    Ok(c)
}

pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let head = header(ck)?.to_text();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, head.len() as u32);
    buf.extend_from_slice(head.as_bytes());
    let n_seg: usize = ck.model.experts().iter().map(|e| e.net.params().segments().len()).sum();
    put_u32(&mut buf, n_seg as u32);
    for (k, e) in ck.model.experts().iter().enumerate() {
        for (name, t) in e.net.params().segments() {
            put_str(&mut buf, &format!("expert{k}.{name}"))?;
            put_u64(&mut buf, t.len() as u64);
            put_f64s(&mut buf, t.data());
        }
    }
    Ok(seal(buf))
}

struct Header<'a>(&'a ConfigFile);

impl Header<'_> {
    fn str(&self, k: &str) -> Result<&str> {
        self.0.get(k).ok_or_else(|| Error::Config(format!("header lacks `{k}`")))
    }

    fn num<T: std::str::FromStr>(&self, k: &str) -> Result<T> {
        self.0
            .get_parsed(k)?
            .ok_or_else(|| Error::Config(format!("header lacks `{k}`")))
    }

    fn train(&self, p: &str, spec: MlpSpec, interval: TimeInterval) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.num(&format!("{p}.epochs"))?,
            batch_size: self.num(&format!("{p}.batch_size"))?,
            learning_rate: self.num(&format!("{p}.learning_rate"))?,
            weight_decay: self.num(&format!("{p}.weight_decay"))?,
            alpha: self.num(&format!("{p}.alpha"))?,
            interval,
            seed: self.num(&format!("{p}.seed"))?,
            spec,
            weighting: parse_weighting(self.str(&format!("{p}.weighting"))?)?,
            fp_fraction: self.num(&format!("{p}.fp_fraction"))?,
            log_every: self.num(&format!("{p}.log_every"))?,
        })
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn read_checkpoint(path: &Path, data: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(path, data, CHECKPOINT_MAGIC)?;
    let hlen = r.u32("header length")? as usize;
    let head = r.take(hlen, "header")?;
    let head = std::str::from_utf8(head).map_err(|_| r.malformed("header is not UTF-8"))?;
    let n_seg = r.u32("segment count")? as usize;
    let mut segments = Vec::new();
    for _ in 0..n_seg {
        let name = r.string("segment name")?;
        let count = r.u64("segment length")?;
        segments.push((name, r.f64s(count, "segment values")?));
    }
    r.finish()?;
    Reader::verify_digest(path, data)?;
    build(head, segments).map_err(|e| r.malformed(e.to_string()))
}

fn build(head: &str, segments: Vec<(String, Vec<f64>)>) -> Result<Checkpoint> {
    let cfg = ConfigFile::parse(head)?;
    let h = Header(&cfg);
    if h.str("format")? != "1" {
        return Err(Error::Config("unsupported checkpoint format".into()));
    }
    let schedule = NoiseSchedule::new(h.num("schedule.beta_min")?, h.num("schedule.beta_max")?)?;
    let norm = NormStats {
        mean: split(h.str("norm.mean")?, "mean")?,
        std: split(h.str("norm.std")?, "std")?,
    };
    if norm.mean.len() != norm.std.len() || norm.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Config("invalid normalization statistics".into()));
    }
    let fp = FpConfig {
        sigma_weak: h.num("fp.sigma_weak")?,
        h_s: h.num("fp.h_s")?,
        h_d: h.num("fp.h_d")?,
        alpha: 0.0,
        weighting: parse_weighting(h.str("fp.weighting")?)?,
    };
    let n_exp: usize = h.num("experts")?;
    if n_exp == 0 || n_exp > segments.len() {
        return Err(Error::Config(format!("{n_exp} experts for {} segments", segments.len())));
    }
    let mut seg_iter = segments.into_iter();
    let mut experts = Vec::new();
    let mut configs = Vec::new();
    let mut final_losses = Vec::new();
    for k in 0..n_exp {
        let p = format!("expert.{k}");
        let iv: Vec<f64> = split(h.str(&format!("{p}.interval"))?, "interval")?;
        if iv.len() != 2 {
            return Err(Error::Config("interval needs two bounds".into()));
        }
        let interval = TimeInterval::new(iv[0], iv[1])?;
        let mut spec = MlpSpec::new(
            h.num(&format!("{p}.dim"))?,
            split(h.str(&format!("{p}.hidden"))?, "hidden")?,
            h.num(&format!("{p}.conservative"))?,
        );
        spec.activation = h.str(&format!("{p}.activation"))?.parse::<Activation>()?;
        if spec.dim == 0 || spec.dim != norm.mean.len() {
            return Err(Error::Config("expert dimension disagrees with normalization".into()));
        }
        let layout = checked_layout(&spec)?;
        let mut segs = Vec::new();
        for (name, t) in layout.segments() {
            let (sname, values) = seg_iter
                .next()
                .ok_or_else(|| Error::Config("fewer segments than the header describes".into()))?;
            if sname != format!("expert{k}.{name}") || values.len() != t.len() {
                return Err(Error::Config(format!(
                    "segment `{sname}` ({} values) does not match `expert{k}.{name}` ({})",
                    values.len(),
                    t.len()
                )));
            }
            segs.push((name.clone(), Tensor::new(t.shape().to_vec(), values)?));
        }
        let net = Mlp::from_params(spec.clone(), ParamVector::new(segs)?)?;
        configs.push(h.train(&format!("{p}.train"), spec, interval)?);
        final_losses.push(Losses {
            dsm: h.num(&format!("{p}.final.dsm"))?,
            fp: h.num(&format!("{p}.final.fp"))?,
        });
        experts.push(Expert { interval, net });
    }
    if seg_iter.next().is_some() {
        return Err(Error::Config("more segments than the header describes".into()));
    }
    let model = ExpertMixture::new(experts)?;
    if h.str("spec_digest")? != spec_digest(&model) {
        return Err(Error::Config("architecture digest does not match the parameters".into()));
    }
    let ck = Checkpoint {
        schedule,
        norm,
        model,
        configs,
        fp,
        final_losses,
    };
    if h.str("config_digest")? != header(&ck)?.get("config_digest").unwrap_or_default() {
        return Err(Error::Config("training config digest mismatch".into()));
    }
    Ok(ck)
}

/// Parameter layout of `spec`, refusing sizes that could not come from a
/// real file before allocating.
fn checked_layout(spec: &MlpSpec) -> Result<ParamVector> {
    const MAX_PARAMS: usize = 1 << 28;
    let mut fan_in = spec.dim;
    let mut total = 0usize;
    for &h in spec.hidden.iter().chain(std::iter::once(&spec.output_width())) {
        if h == 0 {
            return Err(Error::Config("zero-width layer".into()));
        }
        total = fan_in
            .checked_add(4)
            .and_then(|f| f.checked_mul(h))
            .and_then(|v| v.checked_add(total))
            .filter(|&v| v <= MAX_PARAMS)
            .ok_or_else(|| Error::Config("architecture too large".into()))?;
        fan_in = h;
    }
    Ok(spec.zero_params())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    super::write_atomic(path, &write_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path, &super::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut spec = MlpSpec::new(2, vec![5, 3], true);
        spec.activation = Activation::Gelu;
        let intervals = [TimeInterval::new(0.0, 0.25).unwrap(), TimeInterval::new(0.25, 1.0).unwrap()];
        let specs = [spec, MlpSpec::new(2, vec![4], false)];
        let experts: Vec<Expert> = (0..2)
            .map(|k| Expert {
                interval: intervals[k],
                net: Mlp::new(specs[k].clone(), k as u64),
            })
            .collect();
        let configs = (0..2)
            .map(|k| TrainConfig::new(specs[k].clone(), intervals[k], 3, 0.1 * k as f64, 7 + k as u64))
            .collect();
        Checkpoint {
            schedule: NoiseSchedule::default(),
            norm: NormStats {
                mean: vec![0.1, -0.3],
                std: vec![1.7, 0.123456789],
            },
            model: ExpertMixture::new(experts).unwrap(),
            configs,
            fp: FpConfig::default(),
            final_losses: vec![Losses { dsm: 0.5, fp: -1e-3 }, Losses { dsm: 0.25, fp: 0.0 }],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = write_checkpoint(&ck).unwrap();
        let back = read_checkpoint(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn header_edit_with_recomputed_digest_is_rejected() {
        let bytes = write_checkpoint(&sample()).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let at = text.find("expert.1.hidden = 4").unwrap();
        let mut edited = bytes[..bytes.len() - 32].to_vec();
        edited[at + "expert.1.hidden = ".len()] = b'5';
        let edited = seal(edited);
        assert!(matches!(read_checkpoint(Path::new("mem"), &edited), Err(Error::Malformed { .. })));
    }

    #[test]
    fn payload_flip_is_a_digest_mismatch() {
        let mut bytes = write_checkpoint(&sample()).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 0x10;
        assert!(matches!(read_checkpoint(Path::new("mem"), &bytes), Err(Error::DigestMismatch { .. })));
    }
}
