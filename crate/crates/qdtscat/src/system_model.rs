//! Physical inputs, unit conversions and derived interaction strengths.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Bundled conversion table, see `data/constants.toml`.
#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq)]
pub struct Constants {
    pub version: u32,
    pub boltzmann_au_per_kelvin: f64,
    pub field_au_per_kvcm: f64,
    pub bohr_radius_m: f64,
    pub electron_mass_per_amu: f64,
}

pub const CONSTANTS_TOML: &str = include_str!("../data/constants.toml");

pub fn constants() -> &'static Constants {
    static C: OnceLock<Constants> = OnceLock::new();
    C.get_or_init(|| toml::from_str(CONSTANTS_TOML).expect("bundled constants table is valid"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub mu: f64,
    pub c6: f64,
    pub c8: f64,
    pub c10: f64,
    pub alpha_a: f64,
    pub alpha_b: f64,
    pub target_a_sc: f64,
    pub label: String,
}

impl SystemParams {
    pub fn new(
        mu: f64,
        c6: f64,
        c8: f64,
        c10: f64,
        alpha_a: f64,
        alpha_b: f64,
        target_a_sc: f64,
        label: impl Into<String>,
    ) -> Result<Self> {
        let p = SystemParams { mu, c6, c8, c10, alpha_a, alpha_b, target_a_sc, label: label.into() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::domain(format!("reduced mass must be positive, got {}", self.mu)));
        }
        if !(self.c6 > 0.0) {
            return Err(Error::domain(format!("c6 must be positive, got {}", self.c6)));
        }
        if self.c8 < 0.0 || self.c10 < 0.0 {
            return Err(Error::domain("c8 and c10 must be non-negative"));
        }
        if !(self.alpha_a > 0.0 && self.alpha_b > 0.0) {
            return Err(Error::domain("polarizabilities must be positive"));
        }
        Ok(())
    }

    /// Approximate literature values for two ground-state 85Rb atoms.
    /// Mass 84.9117897 u; C6, C8, C10 from published ab initio/semi-empirical
    /// sets; static polarizability 319.2 a.u. None of these are tuned.
    pub fn rb85_approx() -> Self {
        let m = 84.911_789_738 * constants().electron_mass_per_amu;
        SystemParams {
            mu: m / 2.0,
            c6: 4698.0,
            c8: 5.77e5,
            c10: 7.665e7,
            alpha_a: 319.2,
            alpha_b: 319.2,
            target_a_sc: -369.0,
            label: "85Rb+85Rb (approximate)".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub strength_kvcm: f64,
    pub strength_au: f64,
    pub c_e: f64,
}

impl FieldSpec {
    pub fn new(strength_kvcm: f64, params: &SystemParams) -> Result<Self> {
        let strength_au = field_to_au(strength_kvcm)?;
        let c_e = 2.0 * strength_au * strength_au * params.alpha_a * params.alpha_b;
        Ok(FieldSpec { strength_kvcm, strength_au, c_e })
    }

    pub fn zero() -> Self {
        FieldSpec { strength_kvcm: 0.0, strength_au: 0.0, c_e: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySpec {
    pub temperature_nk: f64,
    pub e_au: f64,
    pub k: f64,
}

impl EnergySpec {
    pub fn from_nk(t_nk: f64, mu: f64) -> Result<Self> {
        let e_au = temperature_to_energy(t_nk)?;
        Ok(EnergySpec { temperature_nk: t_nk, e_au, k: (2.0 * mu * e_au).sqrt() })
    }

    pub fn from_au(e_au: f64, mu: f64) -> Result<Self> {
        if !(e_au > 0.0) {
            return Err(Error::domain(format!("scattering energy must be positive, got {e_au}")));
        }
        Ok(EnergySpec { temperature_nk: energy_to_temperature(e_au), e_au, k: (2.0 * mu * e_au).sqrt() })
    }
}

pub fn field_to_au(strength_kvcm: f64) -> Result<f64> {
    if !(strength_kvcm >= 0.0) {
        return Err(Error::domain(format!("field strength must be >= 0, got {strength_kvcm}")));
    }
    Ok(strength_kvcm * constants().field_au_per_kvcm)
}

/// C_E = 2 E^2 alpha_A alpha_B for a field already in atomic units.
pub fn induced_dipole_coefficient(field: &FieldSpec, params: &SystemParams) -> f64 {
    2.0 * field.strength_au * field.strength_au * params.alpha_a * params.alpha_b
}

pub fn temperature_to_energy(t_nk: f64) -> Result<f64> {
    if !(t_nk > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {t_nk} nK")));
    }
    Ok(t_nk * 1e-9 * constants().boltzmann_au_per_kelvin)
}

pub fn energy_to_temperature(e_au: f64) -> f64 {
    e_au / (1e-9 * constants().boltzmann_au_per_kelvin)
}

/// beta_n = (2 mu C_n)^(1/(n-2)).
pub fn characteristic_length(n: u32, c_n: f64, mu: f64) -> Result<f64> {
    if !(c_n > 0.0) {
        return Err(Error::domain(format!("C_{n} must be positive, got {c_n}")));
    }
    match n {
        3 => Ok(2.0 * mu * c_n),
        6 => Ok((2.0 * mu * c_n).powf(0.25)),
        _ => Err(Error::domain(format!("unsupported power n = {n}"))),
    }
}
