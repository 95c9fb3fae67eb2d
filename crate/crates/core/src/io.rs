//! CSV and summary writers.
//!
//! Every file starts with a `#` line carrying the config hash and master
//! seed. Floats are written with 17 significant digits so they read back
//! exactly.
//!
//! Column orders:
//! - trace: `step,E,V,N`
//! - histogram: `bin_left,bin_right,count`
//! - heat flow: `step,T1,T2,T1_stderr,T2_stderr,T1_mean,T2_mean,dQ12,cumulative_dQ12,S1,S2,S_total`
//! - sweep: `volume,pressure,pressure_stderr,temperature,eos_ratio,tau_steps`
//! - oracle: `T,V,N,k0,ln_Z,F0,pressure,mean_energy,var_energy,entropy,relative_fluctuation`
//! - verify: `name,measured,expected,tolerance,status`

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::mc::Trace;
use crate::stats::Histogram;
use crate::thermo::{HeatFlowInterval, SweepReport};

/// Identifies the run that produced a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputMeta {
    pub config_hash: String,
    pub seed: u64,
}

impl OutputMeta {
    pub fn header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trace_csv(meta: &OutputMeta, trace: &Trace) -> String {
    let mut s = meta.header();
    s.push_str("step,E,V,N\n");
    for i in 0..trace.len() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            trace.steps[i],
            fmt_f64(trace.energy[i]),
            fmt_f64(trace.volume[i]),
            trace.agents[i]
        );
    }
    s
}

pub fn histogram_csv(meta: &OutputMeta, hist: &Histogram) -> String {
    let mut s = meta.header();
    let _ = writeln!(s, "# underflow={} overflow={}", hist.underflow(), hist.overflow());
    s.push_str("bin_left,bin_right,count\n");
    for (lo, hi, c) in hist.rows() {
        let _ = writeln!(s, "{},{},{c}", fmt_f64(lo), fmt_f64(hi));
    }
    s
}

pub fn heat_flow_csv(meta: &OutputMeta, intervals: &[HeatFlowInterval]) -> String {
    let mut s = meta.header();
    s.push_str("step,T1,T2,T1_stderr,T2_stderr,T1_mean,T2_mean,dQ12,cumulative_dQ12,S1,S2,S_total\n");
    for iv in intervals {
        let cols = [
            iv.t1,
            iv.t2,
            iv.t1_stderr,
            iv.t2_stderr,
            iv.t1_mean,
            iv.t2_mean,
            iv.dq12,
            iv.cumulative_dq12,
            iv.s1,
            iv.s2,
            iv.s_total,
        ];
        let _ = writeln!(s, "{},{}", iv.step, join(&cols));
    }
    s
}

pub fn sweep_csv(meta: &OutputMeta, report: &SweepReport) -> String {
    let mut s = meta.header();
    s.push_str("volume,pressure,pressure_stderr,temperature,eos_ratio,tau_steps\n");
    for p in &report.points {
        let cols = [p.volume, p.pressure.value, p.pressure.stderr, p.temperature.value, p.eos_ratio, p.tau_steps];
        let _ = writeln!(s, "{}", join(&cols));
    }
    s
}

fn join(cols: &[f64]) -> String {
    cols.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",")
}

/// `key = value` lines under a header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    lines: Vec<(String, String)>,
}

impl Summary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.lines.push((key.to_string(), value.to_string()));
        self
    }

    pub fn num(&mut self, key: &str, value: f64) -> &mut Self {
        self.text(key, fmt_f64(value))
    }

    pub fn opt(&mut self, key: &str, value: Option<f64>) -> &mut Self {
        match value {
            Some(v) => self.num(key, v),
            None => self.text(key, "none"),
        }
    }

    /// `key = measured` plus the expected value and a PASS/FAIL verdict.
    pub fn compare(&mut self, key: &str, measured: f64, expected: f64, pass: bool) -> &mut Self {
        self.num(key, measured);
        self.num(&format!("{key}.expected"), expected);
        self.text(&format!("{key}.check"), if pass { "PASS" } else { "FAIL" })
    }

    pub fn render(&self, meta: &OutputMeta, config_text: &str) -> String {
        let mut s = meta.header();
        for line in config_text.lines() {
            let _ = writeln!(s, "# config: {line}");
        }
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Writes files inside one directory, refusing names that would escape it.
#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(crate::error::Error::Config(format!("bad output file name '{name}'")));
        }
        let path = self.root.join(name);
        fs::write(&path, contents)?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> OutputMeta {
        OutputMeta { config_hash: "abc".into(), seed: 9 }
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 6.02214076e23, -2.5e-300, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn histogram_layout() {
        let mut h = Histogram::uniform(0.0, 2.0, 2).unwrap();
        h.fill(&[0.5, 1.5, 1.7, 3.0]);
        let s = histogram_csv(&meta(), &h);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# config_hash=abc seed=9");
        assert_eq!(lines[1], "# underflow=0 overflow=1");
        assert_eq!(lines[2], "bin_left,bin_right,count");
        assert!(lines[4].ends_with(",2"));
    }

    #[test]
    fn summary_render() {
        let mut s = Summary::new();
        s.num("x", 1.5).compare("E", 1.0, 1.0, true).opt("p", None);
        let r = s.render(&meta(), "kind=npt\n");
        assert!(r.starts_with("# config_hash=abc seed=9\n# config: kind=npt\n"));
        assert!(r.contains("E.check = PASS\n"));
        assert!(r.contains("p = none\n"));
    }

    #[test]
    fn output_dir_stays_inside() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(&dir.path().join("a")).unwrap();
        assert!(out.write("../escape.csv", "x").is_err());
        assert!(out.write("..", "x").is_err());
        let p = out.write("ok.csv", "x").unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "x");
        assert_eq!(out.written().len(), 1);
    }
}
