//! Scan configuration: `section.key = value` lines, `#` starts a comment.
//!
//! Grids accept a comma list (`1, 2, 5`), an inclusive linear range
//! (`480:620:2`) or a log range (`log:0.01:1:9`, nine points).

use qdtscat::channels::Parity;
use qdtscat::system_model::{constants, SystemParams};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {key}: {msg}")]
    At { line: usize, key: String, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Numerov,
    Mqdt,
    Both,
}

impl Pipeline {
    pub fn parse(s: &str) -> Option<Pipeline> {
        match s.trim().to_ascii_lowercase().as_str() {
            "numerov" => Some(Pipeline::Numerov),
            "mqdt" => Some(Pipeline::Mqdt),
            "both" => Some(Pipeline::Both),
            _ => None,
        }
    }

    pub fn numerov(self) -> bool {
        self != Pipeline::Mqdt
    }

    pub fn mqdt(self) -> bool {
        self != Pipeline::Numerov
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Numerics {
    pub l_max: u32,
    pub parity: Parity,
    pub m: Vec<i32>,
    pub r_c: f64,
    pub r_join: f64,
    pub points_per_wavelength: f64,
    pub phase_tol: f64,
    /// direct path: relative size of the neglected tail at R_inf
    pub tail_tol: f64,
    pub unitarity_tol: f64,
    pub drift_tol: f64,
    /// fixed MQDT matching radius; the R0 search runs when absent
    pub r0: Option<f64>,
    pub seed_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanBlock {
    pub fields_kvcm: Vec<f64>,
    pub energies_nk: Vec<f64>,
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResonanceBlock {
    /// defaults to the scan field grid
    pub fields_kvcm: Option<Vec<f64>>,
    pub e_probe_nk: f64,
    pub r0: f64,
    /// append a resonance summary to mqdt scans
    pub in_scan: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestBlock {
    pub c3: f64,
    pub energies_nk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneBlock {
    pub c12_lo: f64,
    pub c12_hi: f64,
    pub scan_points: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputBlock {
    // left out of the summary echo so results do not depend on where they land
    #[serde(skip)]
    pub directory: PathBuf,
    pub csv: bool,
    pub json: bool,
    pub gnuplot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanConfig {
    pub system: SystemParams,
    pub c12: f64,
    pub numerics: Numerics,
    pub scan: ScanBlock,
    pub resonance: ResonanceBlock,
    pub selftest: SelftestBlock,
    pub tune: TuneBlock,
    pub output: OutputBlock,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            system: SystemParams::rb85_approx(),
            c12: 5.4e9,
            numerics: Numerics {
                l_max: 2,
                parity: Parity::Even,
                m: vec![0],
                r_c: 27.0,
                r_join: 32.0,
                points_per_wavelength: 40.0,
                phase_tol: 1e-8,
                tail_tol: 1e-6,
                unitarity_tol: 1e-8,
                drift_tol: 1e-3,
                r0: None,
                seed_noise: 1e-3,
            },
            scan: ScanBlock { fields_kvcm: vec![0.0], energies_nk: vec![1.0], pipeline: Pipeline::Both },
            resonance: ResonanceBlock { fields_kvcm: None, e_probe_nk: 0.01, r0: 2000.0, in_scan: true },
            selftest: SelftestBlock {
                c3: 5.5e-4,
                energies_nk: log_grid(0.01, 1e4, 8),
            },
            tune: TuneBlock { c12_lo: 5.0e9, c12_hi: 5.8e9, scan_points: 48, tolerance: 1e-3 },
            output: OutputBlock { directory: PathBuf::from("out"), csv: true, json: true, gnuplot: true },
        }
    }
}

fn log_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let r = (b / a).ln() / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { b } else { a * (r * i as f64).exp() }).collect()
}

/// `a, b, c` | `a:b:step` | `log:a:b:n`
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("not a number: '{}'", t.trim()));
    let s = s.trim();
    if let Some(rest) = s.strip_prefix("log:") {
        let p: Vec<&str> = rest.split(':').collect();
        if p.len() != 3 {
            return Err("log grid needs log:start:stop:count".into());
        }
        let (a, b) = (num(p[0])?, num(p[1])?);
        let n: usize = p[2].trim().parse().map_err(|_| format!("bad point count '{}'", p[2].trim()))?;
        if !(a > 0.0 && b > 0.0) || n == 0 {
            return Err("log grid needs positive ends and at least one point".into());
        }
        return Ok(log_grid(a, b, n));
    }
    if s.contains(':') {
        let p: Vec<&str> = s.split(':').collect();
        if p.len() != 3 {
            return Err("range needs start:stop:step".into());
        }
        let (a, b, h) = (num(p[0])?, num(p[1])?, num(p[2])?);
        if !(h > 0.0) || b < a {
            return Err("range needs step > 0 and stop >= start".into());
        }
        let n = ((b - a) / h + 1e-9).floor() as usize;
        if n > 1_000_000 {
            return Err("range has too many points".into());
        }
        // a + i h, not repeated addition, so grids stay reproducible
        return Ok((0..=n).map(|i| a + i as f64 * h).collect());
    }
    s.split(',').filter(|t| !t.trim().is_empty()).map(num).collect()
}

fn ascending(v: &[f64]) -> bool {
    !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|x| x.is_finite())
}

struct Entry {
    line: usize,
    value: String,
}

impl ScanConfig {
    pub fn from_path(path: &Path) -> Result<ScanConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Other(format!("cannot read {}: {e}", path.display())))?;
        ScanConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ScanConfig, ConfigError> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("expected key = value, got '{body}'") })?;
            let key = k.trim().to_string();
            if !key.contains('.') {
                return Err(ConfigError::Syntax { line, msg: format!("key '{key}' needs a section prefix") });
            }
            if let Some(prev) = entries.get(&key) {
                return Err(ConfigError::At { line, key, msg: format!("already set on line {}", prev.line) });
            }
            entries.insert(key, Entry { line, value: v.trim().to_string() });
        }
        let mut cfg = ScanConfig::default();
        let mut mass_amu: Option<(f64, usize)> = None;
        let mut mu: Option<(f64, usize)> = None;
        let mut lines: BTreeMap<&'static str, usize> = BTreeMap::new();
        for (key, e) in &entries {
            let at = |msg: String| ConfigError::At { line: e.line, key: key.clone(), msg };
            let f = || e.value.parse::<f64>().map_err(|_| at(format!("not a number: '{}'", e.value)));
            let grid = || parse_grid(&e.value).map_err(at);
            let flag = || match e.value.as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                v => Err(at(format!("expected true/false, got '{v}'"))),
            };
            let int = || e.value.parse::<u64>().map_err(|_| at(format!("not a non-negative integer: '{}'", e.value)));
            let name: &'static str = match key.as_str() {
                "system.mass_amu" => {
                    mass_amu = Some((f()?, e.line));
                    "system.mass_amu"
                }
                "system.mu" => {
                    mu = Some((f()?, e.line));
                    "system.mu"
                }
                "system.c6" => {
                    cfg.system.c6 = f()?;
                    "system.c6"
                }
                "system.c8" => {
                    cfg.system.c8 = f()?;
                    "system.c8"
                }
                "system.c10" => {
                    cfg.system.c10 = f()?;
                    "system.c10"
                }
                "system.c12" => {
                    cfg.c12 = f()?;
                    "system.c12"
                }
                "system.alpha_a" => {
                    cfg.system.alpha_a = f()?;
                    "system.alpha_a"
                }
                "system.alpha_b" => {
                    cfg.system.alpha_b = f()?;
                    "system.alpha_b"
                }
                "system.polarizability" => {
                    let a = f()?;
                    cfg.system.alpha_a = a;
                    cfg.system.alpha_b = a;
                    "system.polarizability"
                }
                "system.target_a_sc" => {
                    cfg.system.target_a_sc = f()?;
                    "system.target_a_sc"
                }
                "system.label" => {
                    cfg.system.label = e.value.clone();
                    "system.label"
                }
                "numerics.l_max" => {
                    cfg.numerics.l_max = int()? as u32;
                    "numerics.l_max"
                }
                "numerics.parity" => {
                    cfg.numerics.parity = e.value.parse().map_err(|_| at(format!("expected even/odd, got '{}'", e.value)))?;
                    "numerics.parity"
                }
                "numerics.m" => {
                    let v = grid()?;
                    if v.iter().any(|x| x.fract() != 0.0) {
                        return Err(at("m values must be integers".into()));
                    }
                    cfg.numerics.m = v.iter().map(|&x| x as i32).collect();
                    "numerics.m"
                }
                "numerics.r_c" => {
                    cfg.numerics.r_c = f()?;
                    "numerics.r_c"
                }
                "numerics.r_join" => {
                    cfg.numerics.r_join = f()?;
                    "numerics.r_join"
                }
                "numerics.points_per_wavelength" => {
                    cfg.numerics.points_per_wavelength = f()?;
                    "numerics.points_per_wavelength"
                }
                "numerics.phase_tol" => {
                    cfg.numerics.phase_tol = f()?;
                    "numerics.phase_tol"
                }
                "numerics.tail_tol" => {
                    cfg.numerics.tail_tol = f()?;
                    "numerics.tail_tol"
                }
                "numerics.unitarity_tol" => {
                    cfg.numerics.unitarity_tol = f()?;
                    "numerics.unitarity_tol"
                }
                "numerics.drift_tol" => {
                    cfg.numerics.drift_tol = f()?;
                    "numerics.drift_tol"
                }
                "numerics.r0" => {
                    cfg.numerics.r0 = Some(f()?);
                    "numerics.r0"
                }
                "numerics.seed_noise" => {
                    cfg.numerics.seed_noise = f()?;
                    "numerics.seed_noise"
                }
                "scan.fields" => {
                    cfg.scan.fields_kvcm = grid()?;
                    "scan.fields"
                }
                "scan.energies" => {
                    cfg.scan.energies_nk = grid()?;
                    "scan.energies"
                }
                "scan.pipeline" => {
                    cfg.scan.pipeline =
                        Pipeline::parse(&e.value).ok_or_else(|| at(format!("expected numerov|mqdt|both, got '{}'", e.value)))?;
                    "scan.pipeline"
                }
                "resonance.fields" => {
                    cfg.resonance.fields_kvcm = Some(grid()?);
                    "resonance.fields"
                }
                "resonance.e_probe" => {
                    cfg.resonance.e_probe_nk = f()?;
                    "resonance.e_probe"
                }
                "resonance.r0" => {
                    cfg.resonance.r0 = f()?;
                    "resonance.r0"
                }
                "resonance.in_scan" => {
                    cfg.resonance.in_scan = flag()?;
                    "resonance.in_scan"
                }
                "selftest.c3" => {
                    cfg.selftest.c3 = f()?;
                    "selftest.c3"
                }
                "selftest.energies" => {
                    cfg.selftest.energies_nk = grid()?;
                    "selftest.energies"
                }
                "tune.c12_lo" => {
                    cfg.tune.c12_lo = f()?;
                    "tune.c12_lo"
                }
                "tune.c12_hi" => {
                    cfg.tune.c12_hi = f()?;
                    "tune.c12_hi"
                }
                "tune.scan_points" => {
                    cfg.tune.scan_points = int()? as usize;
                    "tune.scan_points"
                }
                "tune.tolerance" => {
                    cfg.tune.tolerance = f()?;
                    "tune.tolerance"
                }
                "output.directory" => {
                    cfg.output.directory = PathBuf::from(&e.value);
                    "output.directory"
                }
                "output.formats" => {
                    let (mut c, mut j, mut g) = (false, false, false);
                    for t in e.value.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                        match t {
                            "csv" => c = true,
                            "json" => j = true,
                            "gnuplot" => g = true,
                            _ => return Err(at(format!("unknown format '{t}' (csv, json, gnuplot)"))),
                        }
                    }
                    cfg.output.csv = c;
                    cfg.output.json = j;
                    cfg.output.gnuplot = g;
                    "output.formats"
                }
                _ => return Err(at("unknown key".into())),
            };
            lines.insert(name, e.line);
        }
        match (mass_amu, mu) {
            (Some((_, l1)), Some((_, l2))) => {
                return Err(ConfigError::At {
                    line: l1.max(l2),
                    key: "system.mu".into(),
                    msg: "give either system.mass_amu or system.mu, not both".into(),
                })
            }
            (Some((m, _)), None) => cfg.system.mu = m * constants().electron_mass_per_amu / 2.0,
            (None, Some((m, _))) => cfg.system.mu = m,
            (None, None) => {}
        }
        cfg.validate(&lines)?;
        Ok(cfg)
    }

    fn validate(&self, lines: &BTreeMap<&'static str, usize>) -> Result<(), ConfigError> {
        let fail = |key: &'static str, msg: &str| {
            let msg = msg.to_string();
            match lines.get(key) {
                Some(&line) => ConfigError::At { line, key: key.into(), msg },
                None => ConfigError::Other(format!("{key}: {msg}")),
            }
        };
        let pos = |key: &'static str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(fail(key, "must be positive")) };
        let mass_key = if lines.contains_key("system.mu") { "system.mu" } else { "system.mass_amu" };
        pos(mass_key, self.system.mu)?;
        pos("system.c6", self.system.c6)?;
        pos("system.c12", self.c12)?;
        if self.system.c8 < 0.0 {
            return Err(fail("system.c8", "must be non-negative"));
        }
        if self.system.c10 < 0.0 {
            return Err(fail("system.c10", "must be non-negative"));
        }
        let alpha_key = if lines.contains_key("system.polarizability") { "system.polarizability" } else { "system.alpha_a" };
        pos(alpha_key, self.system.alpha_a)?;
        pos(if alpha_key == "system.alpha_a" { "system.alpha_b" } else { alpha_key }, self.system.alpha_b)?;
        if !(self.numerics.r_c >= 5.0) {
            return Err(fail("numerics.r_c", "must be >= 5 a0"));
        }
        pos("numerics.r_join", self.numerics.r_join)?;
        pos("numerics.points_per_wavelength", self.numerics.points_per_wavelength)?;
        pos("numerics.phase_tol", self.numerics.phase_tol)?;
        pos("numerics.tail_tol", self.numerics.tail_tol)?;
        pos("numerics.unitarity_tol", self.numerics.unitarity_tol)?;
        pos("numerics.drift_tol", self.numerics.drift_tol)?;
        if let Some(r0) = self.numerics.r0 {
            pos("numerics.r0", r0)?;
        }
        if !(self.numerics.seed_noise >= 0.0 && self.numerics.seed_noise < 0.5) {
            return Err(fail("numerics.seed_noise", "must lie in [0, 0.5)"));
        }
        if self.numerics.m.is_empty() {
            return Err(fail("numerics.m", "needs at least one value"));
        }
        for &m in &self.numerics.m {
            let lowest = m.unsigned_abs().max(self.numerics.parity.lowest_l());
            let has = (m.unsigned_abs()..=self.numerics.l_max).any(|l| Parity::of(l) == self.numerics.parity);
            if !has {
                return Err(fail("numerics.l_max", &format!("no {} channel with l >= {lowest} for m = {m}", self.numerics.parity)));
            }
        }
        if !ascending(&self.scan.fields_kvcm) || self.scan.fields_kvcm[0] < 0.0 {
            return Err(fail("scan.fields", "must be non-empty, ascending and >= 0"));
        }
        if !ascending(&self.scan.energies_nk) || self.scan.energies_nk[0] <= 0.0 {
            return Err(fail("scan.energies", "must be non-empty, ascending and positive"));
        }
        if let Some(f) = &self.resonance.fields_kvcm {
            if !ascending(f) || f[0] < 0.0 {
                return Err(fail("resonance.fields", "must be non-empty, ascending and >= 0"));
            }
        }
        pos("resonance.e_probe", self.resonance.e_probe_nk)?;
        pos("resonance.r0", self.resonance.r0)?;
        pos("selftest.c3", self.selftest.c3)?;
        if !ascending(&self.selftest.energies_nk) || self.selftest.energies_nk[0] <= 0.0 {
            return Err(fail("selftest.energies", "must be non-empty, ascending and positive"));
        }
        pos("tune.c12_lo", self.tune.c12_lo)?;
        if !(self.tune.c12_hi > self.tune.c12_lo) {
            return Err(fail("tune.c12_hi", "must exceed tune.c12_lo"));
        }
        if self.tune.scan_points < 2 {
            return Err(fail("tune.scan_points", "needs at least 2 points"));
        }
        pos("tune.tolerance", self.tune.tolerance)?;
        Ok(())
    }

    pub fn resonance_fields(&self) -> &[f64] {
        self.resonance.fields_kvcm.as_deref().unwrap_or(&self.scan.fields_kvcm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("1, 2,5").unwrap(), vec![1.0, 2.0, 5.0]);
        assert_eq!(parse_grid("480:486:2").unwrap(), vec![480.0, 482.0, 484.0, 486.0]);
        let g = parse_grid("log:0.01:1:3").unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[1] - 0.1).abs() < 1e-15 && g[2] == 1.0);
        assert!(parse_grid("1:0:1").is_err());
        assert!(parse_grid("log:0:1:3").is_err());
        assert!(parse_grid("a,b").is_err());
    }

    #[test]
    fn defaults_and_overrides() {
        let c = ScanConfig::parse(
            "# comment\nsystem.c12 = 5.3368e9   # tuned\nscan.fields = 0:10:5\nscan.pipeline = mqdt\nnumerics.m = 0, 1\n",
        )
        .unwrap();
        assert_eq!(c.c12, 5.3368e9);
        assert_eq!(c.scan.fields_kvcm, vec![0.0, 5.0, 10.0]);
        assert_eq!(c.scan.pipeline, Pipeline::Mqdt);
        assert_eq!(c.numerics.m, vec![0, 1]);
        assert_eq!(c.system.c6, 4698.0);
    }

    #[test]
    fn errors_carry_line_and_key() {
        let e = ScanConfig::parse("\n\nscan.energies = 1, 0.5\n").unwrap_err();
        assert_eq!(
            e,
            ConfigError::At { line: 3, key: "scan.energies".into(), msg: "must be non-empty, ascending and positive".into() }
        );
        let e = ScanConfig::parse("system.c6 = x").unwrap_err();
        assert!(matches!(e, ConfigError::At { line: 1, ref key, .. } if key == "system.c6"));
        let e = ScanConfig::parse("system.bogus = 1").unwrap_err();
        assert!(e.to_string().contains("unknown key"));
        let e = ScanConfig::parse("c6 = 1").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 1, .. }));
        let e = ScanConfig::parse("system.c6 = 1\nsystem.c6 = 2").unwrap_err();
        assert!(e.to_string().contains("already set on line 1"));
        let e = ScanConfig::parse("system.mu = 1\nsystem.mass_amu = 85").unwrap_err();
        assert!(matches!(e, ConfigError::At { line: 2, .. }));
        let e = ScanConfig::parse("numerics.parity = odd\nnumerics.l_max = 0").unwrap_err();
        assert!(matches!(e, ConfigError::At { line: 2, ref key, .. } if key == "numerics.l_max"));
    }

    #[test]
    fn mass_sets_reduced_mass() {
        let c = ScanConfig::parse("system.mass_amu = 2").unwrap();
        assert!((c.system.mu - constants().electron_mass_per_amu).abs() < 1e-9);
    }
}
