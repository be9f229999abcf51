//! On-disk store of short-range K0 matrices keyed by a hash of everything
//! that determines them.
//!
//! Record layout (little endian): magic `QDK0`, version u32, rows u64,
//! cols u64, seven f64 (r0, energy, field, stability, drift, asymmetry,
//! physical-K drift), the matrix row-major, then the SHA-256 of all
//! preceding bytes.

use nalgebra::DMatrix;
use qdtscat::mqdt_engine::{R0Options, ShortRangeK};
use qdtscat::numerov_propagator::GridOptions;
use qdtscat::potential::PotentialMatrixEvaluator;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

const MAGIC: &[u8; 4] = b"QDK0";
const VERSION: u32 = 2;
const HEADER: usize = 4 + 4 + 8 + 8 + 7 * 8;

#[derive(Serialize)]
struct KeyMaterial<'a> {
    version: u32,
    params: &'a qdtscat::system_model::SystemParams,
    short_range: &'a qdtscat::potential::ShortRangeModel,
    cutoff: &'a qdtscat::potential::CutoffSpec,
    basis: &'a qdtscat::channels::ChannelBasis,
    field_bits: u64,
    energy_bits: u64,
    r0_fixed_bits: Option<u64>,
    r0_search: Option<&'a R0Options>,
    grid: &'a GridOptions,
}

/// Hex key for K0 of `ev` at `e_au`, either at a fixed radius or from the R0 search.
pub fn k0_key(ev: &PotentialMatrixEvaluator, e_au: f64, r0_fixed: Option<f64>, search: &R0Options, grid: &GridOptions) -> String {
    let km = KeyMaterial {
        version: VERSION,
        params: &ev.params,
        short_range: &ev.short_range,
        cutoff: &ev.cutoff,
        basis: &ev.basis,
        field_bits: ev.field.strength_kvcm.to_bits(),
        energy_bits: e_au.to_bits(),
        r0_fixed_bits: r0_fixed.map(f64::to_bits),
        r0_search: if r0_fixed.is_none() { Some(search) } else { None },
        grid,
    };
    let bytes = serde_json::to_vec(&km).expect("key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// K0 plus the plateau drift of the physical K found by the R0 search
/// (NaN when R0 was fixed).
#[derive(Debug, Clone, PartialEq)]
pub struct CachedK0 {
    pub k0: ShortRangeK,
    pub k_drift: f64,
}

pub fn encode(rec: &CachedK0) -> Vec<u8> {
    let k = &rec.k0;
    let (r, c) = k.k0.shape();
    let mut out = Vec::with_capacity(HEADER + 8 * r * c + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(r as u64).to_le_bytes());
    out.extend_from_slice(&(c as u64).to_le_bytes());
    for v in [k.r0, k.energy, k.field_kvcm, k.stability, k.drift, k.asymmetry, rec.k_drift] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..r {
        for j in 0..c {
            out.extend_from_slice(&k.k0[(i, j)].to_le_bytes());
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

pub fn decode(bytes: &[u8]) -> Result<CachedK0, String> {
    if bytes.len() < HEADER + 32 {
        return Err(format!("record too short ({} bytes)", bytes.len()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err("checksum mismatch".into());
    }
    if &body[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(format!("unsupported record version {}", u32_at(4)));
    }
    let (r, c) = (u64_at(8) as usize, u64_at(16) as usize);
    if body.len() != HEADER + 8 * r.saturating_mul(c) {
        return Err("matrix size does not match header".into());
    }
    let h: Vec<f64> = (0..7).map(|i| f64_at(24 + 8 * i)).collect();
    let k0 = DMatrix::from_fn(r, c, |i, j| f64_at(HEADER + 8 * (i * c + j)));
    let k0 = ShortRangeK { k0, r0: h[0], energy: h[1], field_kvcm: h[2], stability: h[3], drift: h[4], asymmetry: h[5] };
    Ok(CachedK0 { k0, k_drift: h[6] })
}

#[derive(Debug, Clone)]
pub struct K0Cache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl K0Cache {
    pub fn open(dir: &Path) -> std::io::Result<K0Cache> {
        std::fs::create_dir_all(dir)?;
        Ok(K0Cache { dir: dir.to_path_buf() })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.k0"))
    }

    /// A missing record is a plain miss; an unreadable one is a miss with a warning.
    pub fn lookup(&self, key: &str) -> Option<CachedK0> {
        let p = self.path(key);
        let bytes = match std::fs::read(&p) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache record {} unreadable: {e}", p.display());
                return None;
            }
        };
        match decode(&bytes) {
            Ok(k) => Some(k),
            Err(e) => {
                log::warn!("cache record {} ignored: {e}", p.display());
                None
            }
        }
    }

    /// Write to a private temp file, then rename over the final name.
    pub fn store(&self, key: &str, k: &CachedK0) -> std::io::Result<()> {
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{key}.{}.{n}.tmp", std::process::id()));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&encode(k))?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, self.path(key)).inspect_err(|_| {
            let _ = std::fs::remove_file(&tmp);
        })
    }
}
