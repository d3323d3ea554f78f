//! Run manifests: what was run, with which settings, and what it produced.

use std::path::Path;

use super::config::ConfigFile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    /// Arguments after the program name.
    pub command: Vec<String>,
    pub config: ConfigFile,
    pub seeds: Vec<u64>,
    /// `(path, sha256 hex)` of every output.
    pub artifacts: Vec<(String, String)>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: Vec<String>) -> Self {
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }

    /// Hashes `path` and records it as an output.
    pub fn add_artifact(&mut self, path: &Path) -> Result<()> {
        let hash = super::file_sha256(path)?;
        self.artifacts.push((path.display().to_string(), hash));
        Ok(())
    }

    /// Checks every recorded hash against the file on disk.
    pub fn verify_artifacts(&self) -> Result<()> {
        for (p, h) in &self.artifacts {
            if &super::file_sha256(Path::new(p))? != h {
                return Err(Error::DigestMismatch { path: p.into() });
            }
        }
        Ok(())
    }

    pub fn to_config(&self) -> ConfigFile {
        let mut c = ConfigFile::new();
        let mut set = |k: &str, v: String| c.set(k, v).expect("static keys are valid");
        set("manifest.format", "1".into());
        set("version", self.version.clone());
        set("command.count", self.command.len().to_string());
        for (i, a) in self.command.iter().enumerate() {
            set(&format!("command.{i}"), a.clone());
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        set("seeds", seeds.join(","));
        set("artifact.count", self.artifacts.len().to_string());
        for (i, (p, h)) in self.artifacts.iter().enumerate() {
            set(&format!("artifact.{i}.path"), p.clone());
            set(&format!("artifact.{i}.sha256"), h.clone());
        }
        set("wall_clock_seconds", format!("{}", self.wall_clock_seconds));
        for (k, v) in self.config.entries() {
            set(&format!("config.{k}"), v.clone());
        }
        c
    }

    pub fn from_config(c: &ConfigFile) -> Result<Self> {
        let need = |k: &str| {
            c.get(k)
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("manifest lacks `{k}`")))
        };
        if need("manifest.format")? != "1" {
            return Err(Error::Config("unsupported manifest format".into()));
        }
        let count = |k: &str| -> Result<usize> {
            let n: usize = c
                .get_parsed(k)?
                .ok_or_else(|| Error::Config(format!("manifest lacks `{k}`")))?;
            if n > c.entries().len() {
                return Err(Error::Config(format!("`{k}` exceeds the number of entries")));
            }
            Ok(n)
        };
        let command = (0..count("command.count")?)
            .map(|i| need(&format!("command.{i}")))
            .collect::<Result<_>>()?;
        let seeds_text = need("seeds")?;
        let seeds = if seeds_text.is_empty() {
            Vec::new()
        } else {
            seeds_text
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Config(format!("bad seed `{s}`"))))
                .collect::<Result<_>>()?
        };
        let artifacts = (0..count("artifact.count")?)
            .map(|i| Ok((need(&format!("artifact.{i}.path"))?, need(&format!("artifact.{i}.sha256"))?)))
            .collect::<Result<_>>()?;
        let mut config = ConfigFile::new();
        for (k, v) in c.section("config") {
            config.set(k, v)?;
        }
        Ok(RunManifest {
            command,
            config,
            seeds,
            artifacts,
            wall_clock_seconds: c
                .get_parsed("wall_clock_seconds")?
                .ok_or_else(|| Error::Config("manifest lacks `wall_clock_seconds`".into()))?,
            version: need("version")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_config().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = ConfigFile::load(path)?;
        Self::from_config(&c).map_err(|e| Error::Malformed {
            path: path.into(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut m = RunManifest::new(vec!["gen-data".into(), "--out".into(), "a b.fpds".into()]);
        m.seeds = vec![1, 2];
        m.artifacts.push(("x".into(), "ab".into()));
        m.wall_clock_seconds = 1.25;
        m.config.set("train.alpha", 0.0005).unwrap();
        let back = RunManifest::from_config(&ConfigFile::parse(&m.to_config().to_text()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn records_and_verifies_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        std::fs::write(&p, b"hello").unwrap();
        let mut m = RunManifest::new(vec![]);
        m.add_artifact(&p).unwrap();
        assert_eq!(m.artifacts[0].1, super::super::sha256_hex(b"hello"));
        m.verify_artifacts().unwrap();
        std::fs::write(&p, b"hellO").unwrap();
        assert!(matches!(m.verify_artifacts(), Err(Error::DigestMismatch { .. })));
    }
}
