//! Flat `key = value` experiment files.
//!
//! One experiment per file. `#` starts a comment, blank lines are ignored and
//! keys may appear once. `kind` names the experiment; `seed` and `out_dir`
//! are optional and are not part of the config hash.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    Kinetic,
    Canonical,
    Npt,
    Grand,
    HeatFlow,
    Sweep,
    Oracle,
    Verify,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Kinetic,
        ExperimentKind::Canonical,
        ExperimentKind::Npt,
        ExperimentKind::Grand,
        ExperimentKind::HeatFlow,
        ExperimentKind::Sweep,
        ExperimentKind::Oracle,
        ExperimentKind::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Kinetic => "kinetic",
            ExperimentKind::Canonical => "canonical",
            ExperimentKind::Npt => "npt",
            ExperimentKind::Grand => "grand",
            ExperimentKind::HeatFlow => "heatflow",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Oracle => "oracle",
            ExperimentKind::Verify => "verify",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind '{s}'")))
    }
}

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    entries: BTreeMap<String, String>,
}

impl ExperimentConfig {
    /// An empty config: every parameter takes its default.
    pub fn new(kind: ExperimentKind) -> Self {
        Self { kind, seed: DEFAULT_SEED, out_dir: None, entries: BTreeMap::new() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: bad key '{key}'", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        let kind: ExperimentKind = entries
            .remove("kind")
            .ok_or_else(|| Error::Config("missing 'kind'".into()))?
            .parse()?;
        let seed = match entries.remove("seed") {
            Some(s) => s.parse().map_err(|_| Error::Config(format!("seed '{s}' is not a u64")))?,
            None => DEFAULT_SEED,
        };
        let out_dir = entries.remove("out_dir").map(PathBuf::from);
        Ok(Self { kind, seed, out_dir, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn set(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.entries.insert(key.to_string(), value.to_string());
        self
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Canonical text: `kind` first, then the sorted entries.
    pub fn canonical_text(&self) -> String {
        let mut s = format!("kind={}\n", self.kind);
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key '{k}' for {} experiments", self.kind))),
            None => Ok(()),
        }
    }

    fn parsed<T: FromStr>(&self, key: &str, default: T, what: &str) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| Error::Config(format!("{key} = '{s}' is not {what}"))),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parsed(key, default, "a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Config(format!("{key} must be finite")))
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.parsed(key, default, "a non-negative integer")
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.parsed(key, default, "a non-negative integer")
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        self.parsed(key, default, "true or false")
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.entries.get(key).map(String::as_str).unwrap_or(default)
    }

    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.entries.get(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.trim().parse::<f64>().map_err(|_| Error::Config(format!("{key}: '{x}' is not a number")))
                })
                .collect(),
        }
    }

    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.entries.get(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.trim().parse::<usize>().map_err(|_| Error::Config(format!("{key}: '{x}' is not an integer")))
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_hash() {
        let text = "# demo\nkind = kinetic\nagents = 100 # inline\nsteps=1000\nseed = 7\nout_dir = /tmp/x\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.kind, ExperimentKind::Kinetic);
        assert_eq!(c.seed, 7);
        assert_eq!(c.out_dir.as_deref(), Some(Path::new("/tmp/x")));
        assert_eq!(c.usize_or("agents", 1).unwrap(), 100);
        assert_eq!(c.u64_or("missing", 5).unwrap(), 5);
        assert_eq!(c.canonical_text(), "kind=kinetic\nagents=100\nsteps=1000\n");
        // seed, out_dir, ordering and whitespace do not change the hash
        let d = ExperimentConfig::parse("steps = 1000\nkind=kinetic\nagents=100").unwrap();
        assert_eq!(c.hash(), d.hash());
        assert_eq!(c.hash().len(), 64);
        let e = ExperimentConfig::parse("kind=kinetic\nagents=101\nsteps=1000").unwrap();
        assert_ne!(c.hash(), e.hash());
    }

    #[test]
    fn parse_errors() {
        assert!(ExperimentConfig::parse("agents = 3").is_err());
        assert!(ExperimentConfig::parse("kind = nope").is_err());
        assert!(ExperimentConfig::parse("kind = npt\nkind = npt").is_err());
        assert!(ExperimentConfig::parse("kind = npt\njunk").is_err());
        assert!(ExperimentConfig::parse("kind = npt\nseed = -1").is_err());
        let c = ExperimentConfig::parse("kind = npt\nagents = x\nbogus = 1").unwrap();
        assert!(c.usize_or("agents", 1).is_err());
        assert!(c.check_keys(&["agents"]).is_err());
        assert!(c.check_keys(&["agents", "bogus"]).is_ok());
    }

    #[test]
    fn lists() {
        let c = ExperimentConfig::parse("kind = oracle\ntemperatures = 1, 2.5\nagents = 10,100").unwrap();
        assert_eq!(c.f64_list_or("temperatures", &[]).unwrap(), vec![1.0, 2.5]);
        assert_eq!(c.usize_list_or("agents", &[]).unwrap(), vec![10, 100]);
        assert_eq!(c.f64_list_or("volumes", &[3.0]).unwrap(), vec![3.0]);
    }
}
