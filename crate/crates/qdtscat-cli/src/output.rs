//! Result rows and the files written from them.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One (field, energy, pipeline) point. Failed points keep their place with
/// NaN values and the error text in `status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResultRow {
    pub field_kvcm: f64,
    pub energy_nk: f64,
    pub energy_au: f64,
    pub pipeline: String,
    pub sigma_a0sq: f64,
    pub t00_abs: f64,
    /// largest |T_ij| and where it sits
    pub t_max_abs: f64,
    pub t_max_i: Option<usize>,
    pub t_max_j: Option<usize>,
    #[serde(serialize_with = "join_f64", deserialize_with = "split_f64")]
    pub eigenphases: Vec<f64>,
    /// "r_inf" (numerov) or "r0" (mqdt)
    pub radius_kind: String,
    pub radius_a0: f64,
    pub unitarity_defect: f64,
    pub k_asymmetry: f64,
    /// relative change of K0 over [R0, 1.5 R0]; NaN on the direct path
    pub k0_drift: f64,
    /// same for the diagonal of the physical K (the R0 plateau test);
    /// NaN on the direct path and for a fixed R0
    pub k_drift: f64,
    /// quality metrics over tolerance, `;`-separated; empty when clean
    pub flags: String,
    pub status: String,
}

impl ScanResultRow {
    pub fn failed(field_kvcm: f64, energy_nk: f64, energy_au: f64, pipeline: &str, msg: &str) -> Self {
        ScanResultRow {
            field_kvcm,
            energy_nk,
            energy_au,
            pipeline: pipeline.into(),
            sigma_a0sq: f64::NAN,
            t00_abs: f64::NAN,
            t_max_abs: f64::NAN,
            t_max_i: None,
            t_max_j: None,
            eigenphases: Vec::new(),
            radius_kind: String::new(),
            radius_a0: f64::NAN,
            unitarity_defect: f64::NAN,
            k_asymmetry: f64::NAN,
            k0_drift: f64::NAN,
            k_drift: f64::NAN,
            flags: String::new(),
            status: format!("error: {msg}"),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn join_f64<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
    s.serialize_str(&parts.join(";"))
}

fn split_f64<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let s = String::deserialize(d)?;
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|t| t.parse::<f64>().map_err(serde::de::Error::custom)).collect()
}

pub fn rows_to_csv(rows: &[ScanResultRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ScanResultRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

/// Fail early if `dir` cannot take files.
pub fn preflight(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let probe = dir.join(format!(".write-probe-{}", std::process::id()));
    std::fs::File::create(&probe)?.write_all(b"ok")?;
    std::fs::remove_file(&probe)
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> std::io::Result<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, text)?;
    Ok(p)
}

/// gnuplot-style data: `#` header line, then whitespace-separated columns.
pub fn two_column(header: &str, data: &[(f64, f64)]) -> String {
    let mut s = format!("# {header}\n");
    for (x, y) in data {
        s.push_str(&format!("{x:e} {y:e}\n"));
    }
    s
}

/// Compact float for file names: 0.01 -> "0.01", 1000 -> "1000".
pub fn tag(x: f64) -> String {
    format!("{x}").replace('-', "m")
}
