//! Channel potential matrix: short-range wall, dispersion tail and the
//! field-induced anisotropic dipole term, with smooth cut-offs.

use crate::channels::{coupling_phase, p2_matrix_element, ChannelBasis};
use crate::error::{Error, Result};
use crate::system_model::{FieldSpec, SystemParams};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ShortRangeForm {
    /// c12/r^12 - C6/r^6 inside r_join, blended onto the dispersion tail
    #[default]
    Wall12,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShortRangeModel {
    pub form: ShortRangeForm,
    pub c12: f64,
    pub r_join: f64,
}

impl ShortRangeModel {
    pub fn new(c12: f64, r_join: f64) -> Result<Self> {
        if !(c12 > 0.0) {
            return Err(Error::domain(format!("c12 must be positive, got {c12}")));
        }
        if !(r_join > 0.0) {
            return Err(Error::domain(format!("r_join must be positive, got {r_join}")));
        }
        Ok(ShortRangeModel { form: ShortRangeForm::Wall12, c12, r_join })
    }
}

impl Default for ShortRangeModel {
    /// Well minimum near 11.5 a0 and about 1e-3 Eh deep for Rb-like C6.
    fn default() -> Self {
        ShortRangeModel { form: ShortRangeForm::Wall12, c12: 5.4e9, r_join: 32.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub r_c: f64,
}

impl CutoffSpec {
    pub fn new(r_c: f64) -> Result<Self> {
        if !(r_c >= 5.0) {
            return Err(Error::domain(format!("dipole cut-off must be >= 5 a0, got {r_c}")));
        }
        Ok(CutoffSpec { r_c })
    }
}

impl Default for CutoffSpec {
    fn default() -> Self {
        CutoffSpec { r_c: 27.0 }
    }
}

/// f_c(r) = 1 beyond r_c, exp[-(r_c/r - 1)^2] inside.
pub fn matching_function(r: f64, r_c: f64) -> Result<f64> {
    if !(r > 0.0) || !(r_c > 0.0) {
        return Err(Error::domain(format!("matching function needs r, r_c > 0 (r = {r}, r_c = {r_c})")));
    }
    Ok(fc(r, r_c))
}

#[inline]
fn fc(r: f64, r_c: f64) -> f64 {
    if r >= r_c {
        1.0
    } else {
        let x = r_c / r - 1.0;
        (-x * x).exp()
    }
}

pub fn dispersion_tail(r: f64, params: &SystemParams) -> f64 {
    let r2 = 1.0 / (r * r);
    let r6 = r2 * r2 * r2;
    -r6 * (params.c6 + r2 * (params.c8 + r2 * params.c10))
}

pub fn isotropic_potential(r: f64, params: &SystemParams, sr: &ShortRangeModel) -> f64 {
    let tail = dispersion_tail(r, params);
    if r >= sr.r_join {
        return tail;
    }
    let r6 = (1.0 / r).powi(6);
    let inner = match sr.form {
        ShortRangeForm::Wall12 => sr.c12 * r6 * r6 - params.c6 * r6,
    };
    let f = fc(r, sr.r_join);
    (1.0 - f) * inner + f * tail
}

/// -(c_e/r^3) f_c(r, r_c); the angular factor comes from the P2 element.
pub fn dipole_radial(r: f64, c_e: f64, cutoff: &CutoffSpec) -> f64 {
    if c_e == 0.0 {
        return 0.0;
    }
    -c_e / (r * r * r) * fc(r, cutoff.r_c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialMatrixEvaluator {
    pub params: SystemParams,
    pub field: FieldSpec,
    pub basis: ChannelBasis,
    pub short_range: ShortRangeModel,
    pub cutoff: CutoffSpec,
    /// phase(l, l') * <l m|P2|l' m'>, fixed per basis
    coupling: DMatrix<f64>,
    centrifugal: Vec<f64>,
}

impl PotentialMatrixEvaluator {
    pub fn new(
        params: SystemParams,
        field: FieldSpec,
        basis: ChannelBasis,
        short_range: ShortRangeModel,
        cutoff: CutoffSpec,
    ) -> Result<Self> {
        params.validate()?;
        if basis.is_empty() {
            return Err(Error::domain("potential needs a non-empty channel basis"));
        }
        let n = basis.len();
        let ch = &basis.channels;
        let coupling = DMatrix::from_fn(n, n, |i, j| {
            let p2 = p2_matrix_element(ch[i].l, ch[i].m, ch[j].l, ch[j].m);
            if p2 == 0.0 { 0.0 } else { coupling_phase(ch[i].l, ch[j].l) * p2 }
        });
        let centrifugal = ch.iter().map(|c| (c.l * (c.l + 1)) as f64 / (2.0 * params.mu)).collect();
        Ok(PotentialMatrixEvaluator { params, field, basis, short_range, cutoff, coupling, centrifugal })
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn mu(&self) -> f64 {
        self.params.mu
    }

    pub fn c_e(&self) -> f64 {
        self.field.c_e
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    pub fn isotropic(&self, r: f64) -> f64 {
        isotropic_potential(r, &self.params, &self.short_range)
    }

    /// Same evaluator with a different field.
    pub fn with_field(&self, field: FieldSpec) -> Self {
        PotentialMatrixEvaluator { field, ..self.clone() }
    }

    /// Fill `m` with the potential matrix at r (no allocation).
    pub fn fill(&self, r: f64, m: &mut DMatrix<f64>) {
        let n = self.len();
        let v = self.isotropic(r);
        let d = dipole_radial(r, self.field.c_e, &self.cutoff);
        let inv_r2 = 1.0 / (r * r);
        for j in 0..n {
            for i in 0..n {
                let c = self.coupling[(i, j)];
                // d * 0 can be -0.0; selection-rule zeros stay bitwise +0
                m[(i, j)] = if c == 0.0 || d == 0.0 { 0.0 } else { d * c };
            }
            m[(j, j)] += v + self.centrifugal[j] * inv_r2;
        }
    }

    pub fn diagonal(&self, r: f64, out: &mut [f64]) {
        let v = self.isotropic(r);
        let d = dipole_radial(r, self.field.c_e, &self.cutoff);
        for (i, o) in out.iter_mut().enumerate() {
            *o = v + self.centrifugal[i] / (r * r) + d * self.coupling[(i, i)];
        }
    }

    /// Per-channel C3 = c_e <l m|P2|l m> of the diagonal tail.
    pub fn diagonal_c3(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.field.c_e * self.coupling[(i, i)]).collect()
    }
}

pub fn potential_matrix(r: f64, ev: &PotentialMatrixEvaluator) -> Result<DMatrix<f64>> {
    if !(r > 0.0) {
        return Err(Error::domain(format!("potential needs r > 0, got {r}")));
    }
    let n = ev.len();
    let mut m = DMatrix::zeros(n, n);
    ev.fill(r, &mut m);
    Ok(m)
}

/// Diagonal potential seen by channel l (the m of the evaluator's basis).
pub fn effective_diagonal(l: u32, r: f64, ev: &PotentialMatrixEvaluator) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::domain(format!("effective potential needs r > 0, got {r}")));
    }
    let m = ev.basis.channels.first().map(|c| c.m).unwrap_or(0);
    if (m.unsigned_abs()) > l {
        return Err(Error::domain(format!("|m| = {} exceeds l = {l}", m.abs())));
    }
    let p2 = p2_matrix_element(l, m, l, m);
    Ok(ev.isotropic(r)
        + (l * (l + 1)) as f64 / (2.0 * ev.mu() * r * r)
        + dipole_radial(r, ev.c_e(), &ev.cutoff) * p2)
}

/// Barrier of 3/(mu r^2) - c_e C22/r^3: position r_m and height delta_v.
pub fn barrier(l2_coupling: f64, c_e: f64, mu: f64) -> Result<(f64, f64)> {
    if !(c_e > 0.0) {
        return Err(Error::domain("no barrier without a field (c_e = 0)"));
    }
    if !(l2_coupling > 0.0) || !(mu > 0.0) {
        return Err(Error::domain("barrier needs a positive coupling and mass"));
    }
    let r_m = mu * c_e * l2_coupling / 2.0;
    Ok((r_m, 1.0 / (mu * r_m * r_m)))
}

/// eta = |V_12/(V_2 - V_0)| for a two-channel evaluator; infinity when the
/// diagonals coincide.
pub fn anisotropy(r: f64, ev: &PotentialMatrixEvaluator) -> Result<f64> {
    if ev.len() != 2 {
        return Err(Error::domain("anisotropy is defined for two-channel evaluators"));
    }
    let m = potential_matrix(r, ev)?;
    let gap = m[(1, 1)] - m[(0, 0)];
    if gap == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((m[(0, 1)] / gap).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    /// relative tolerance on the achieved scattering length
    pub tolerance: f64,
    pub max_iterations: usize,
    /// bracket search: c12 scanned over [c12_lo, c12_hi] in `scan_points` log steps
    pub c12_lo: f64,
    pub c12_hi: f64,
    pub scan_points: usize,
    pub temperature_nk: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            tolerance: 1e-3,
            max_iterations: 200,
            c12_lo: 5.0e9,
            c12_hi: 5.8e9,
            scan_points: 48,
            temperature_nk: 0.01,
        }
    }
}

/// Adjust c12 until the zero-field s-wave scattering length hits the target.
/// Scans c12 for a pole-free bracket, then bisects.
pub fn tune_short_range(
    params: &SystemParams,
    template: &ShortRangeModel,
    target_a_sc: f64,
    opts: &TuneOptions,
) -> Result<ShortRangeModel> {
    let a_of = |c12: f64| -> Result<f64> {
        let sr = ShortRangeModel { c12, ..*template };
        crate::numerov_propagator::s_wave_scattering_length(params, &sr, opts.temperature_nk)
    };
    let mut sweep: Vec<(f64, f64)> = Vec::new();
    let mut iterations = 0usize;
    let n = opts.scan_points.max(2);
    let ratio = (opts.c12_hi / opts.c12_lo).powf(1.0 / (n - 1) as f64);
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..n {
        let c = opts.c12_lo * ratio.powi(i as i32);
        iterations += 1;
        let a = match a_of(c) {
            Ok(a) => a,
            Err(Error::ThresholdNotReached(msg)) => {
                // next to a pole of a(c12); no usable sign information here
                log::debug!("c12 = {c:e}: {msg}");
                sweep.push((c, f64::NAN));
                prev = None;
                continue;
            }
            Err(e) => return Err(e),
        };
        sweep.push((c, a));
        if let Some((c0, a0)) = prev {
            let d0 = a0 - target_a_sc;
            let d1 = a - target_a_sc;
            if d0 * d1 <= 0.0 {
                if let Some(sr) = bisect_bracket(c0, c, d0, &a_of, target_a_sc, opts, &mut iterations, &mut sweep)? {
                    return Ok(ShortRangeModel { c12: sr, ..*template });
                }
            }
        }
        prev = Some((c, a));
        if iterations >= opts.max_iterations {
            break;
        }
    }
    Err(Error::TuningFailed { iterations, sweep })
}

#[allow(clippy::too_many_arguments)]
fn bisect_bracket(
    mut lo: f64,
    mut hi: f64,
    mut d_lo: f64,
    a_of: &dyn Fn(f64) -> Result<f64>,
    target: f64,
    opts: &TuneOptions,
    iterations: &mut usize,
    sweep: &mut Vec<(f64, f64)>,
) -> Result<Option<f64>> {
    while *iterations < opts.max_iterations {
        let mid = 0.5 * (lo + hi);
        *iterations += 1;
        let a = match a_of(mid) {
            Ok(a) => a,
            // the sign change was a pole of a(c12), not a crossing of the target
            Err(Error::ThresholdNotReached(_)) => {
                sweep.push((mid, f64::NAN));
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        sweep.push((mid, a));
        let d = a - target;
        if (d / target).abs() <= opts.tolerance {
            return Ok(Some(mid));
        }
        if (hi - lo) / mid < 1e-14 {
            // collapsed onto a pole of a(c12), not a root
            return Ok(None);
        }
        if d * d_lo <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            d_lo = d;
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{build_basis, Channel, Parity};
    use proptest::prelude::*;

    fn ev(field_kvcm: f64, basis: ChannelBasis) -> PotentialMatrixEvaluator {
        let p = SystemParams::rb85_approx();
        let f = FieldSpec::new(field_kvcm, &p).unwrap();
        PotentialMatrixEvaluator::new(p, f, basis, ShortRangeModel::default(), CutoffSpec::default()).unwrap()
    }

    #[test]
    fn matching_function_examples() {
        assert_eq!(matching_function(27.0, 27.0).unwrap(), 1.0);
        assert_eq!(matching_function(54.0, 27.0).unwrap(), 1.0);
        assert!((matching_function(13.5, 27.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(matching_function(0.0, 27.0).is_err());
        assert!(matching_function(-1.0, 27.0).is_err());
    }

    #[test]
    fn isotropic_shape() {
        let p = SystemParams::rb85_approx();
        let sr = ShortRangeModel::default();
        let r = 1e4;
        let tail = -p.c6 - p.c8 / (r * r) - p.c10 / r.powi(4);
        assert!((isotropic_potential(r, &p, &sr) * r.powi(6) - tail).abs() / p.c6 < 1e-7);
        assert!(isotropic_potential(6.0, &p, &sr) > 0.0);
        let rj = sr.r_join;
        let lo = isotropic_potential(rj * (1.0 - 1e-12), &p, &sr);
        let hi = isotropic_potential(rj, &p, &sr);
        assert!((lo - hi).abs() <= 1e-10 * hi.abs());
        // well depth near 1e-3 Eh at r close to 11.5
        let (mut vmin, mut rmin) = (0.0, 0.0);
        for i in 0..4000 {
            let r = 8.0 + i as f64 * 0.003;
            let v = isotropic_potential(r, &p, &sr);
            if v < vmin {
                vmin = v;
                rmin = r;
            }
        }
        assert!((rmin - 11.5).abs() < 0.3 && vmin < -8e-4 && vmin > -1.5e-3, "{rmin} {vmin}");
    }

    #[test]
    fn smooth_at_join_and_cutoff() {
        let p = SystemParams::rb85_approx();
        let sr = ShortRangeModel::default();
        let d = |f: &dyn Fn(f64) -> f64, r: f64, h: f64| (f(r + h) - f(r - h)) / (2.0 * h);
        let v = |r: f64| isotropic_potential(r, &p, &sr);
        let left = d(&v, sr.r_join - 1e-4, 1e-5);
        let right = d(&v, sr.r_join + 1e-4, 1e-5);
        assert!((left - right).abs() < 1e-4 * right.abs(), "{left} {right}");
        let c = CutoffSpec::default();
        let dp = |r: f64| dipole_radial(r, 1e-3, &c);
        let left = d(&dp, c.r_c - 1e-4, 1e-5);
        let right = d(&dp, c.r_c + 1e-4, 1e-5);
        assert!((left - right).abs() < 1e-4 * right.abs());
    }

    #[test]
    fn dipole_examples() {
        let c = CutoffSpec::default();
        assert_eq!(dipole_radial(5.0, 0.0, &c), 0.0);
        assert_eq!(dipole_radial(30.0, 2e-3, &c), -2e-3 / 27000.0);
        assert!(dipole_radial(0.5, 2e-3, &c).abs() < 1e-100);
        assert!(CutoffSpec::new(4.0).is_err());
    }

    #[test]
    fn zero_field_is_diagonal() {
        let e = ev(0.0, build_basis(Parity::Even, 0, 6).unwrap());
        for r in [8.0, 30.0, 1e3] {
            let m = potential_matrix(r, &e).unwrap();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if i != j {
                        assert_eq!(m[(i, j)].to_bits(), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn selection_rule_zeros_bitwise() {
        let basis = ChannelBasis {
            parity: None,
            l_max: 4,
            channels: vec![
                Channel::new(0, 0).unwrap(),
                Channel::new(1, 0).unwrap(),
                Channel::new(2, 0).unwrap(),
                Channel::new(4, 0).unwrap(),
                Channel::new(2, 1).unwrap(),
            ],
        };
        let e = ev(500.0, basis);
        let m = potential_matrix(40.0, &e).unwrap();
        for (i, j) in [(0, 1), (1, 2), (0, 3), (0, 4), (2, 4), (1, 3)] {
            assert_eq!(m[(i, j)].to_bits(), 0, "({i},{j})");
            assert_eq!(m[(j, i)].to_bits(), 0);
        }
        assert!(m[(0, 2)] != 0.0 && m[(2, 3)] != 0.0);
    }

    #[test]
    fn two_channel_off_diagonal() {
        let e = ev(500.0, build_basis(Parity::Even, 0, 2).unwrap());
        let r = 100.0;
        let m = potential_matrix(r, &e).unwrap();
        let want = e.c_e() / 5f64.sqrt() / r.powi(3);
        assert!((m[(0, 1)].abs() - want).abs() < 1e-14 * want);
        // the folded i^(l'-l) phase makes the (0,2) element positive
        assert!(m[(0, 1)] > 0.0);
        assert_eq!(m[(0, 1)], m[(1, 0)]);
    }

    #[test]
    fn effective_diagonal_limits() {
        let e = ev(500.0, build_basis(Parity::Even, 0, 2).unwrap());
        let r = 5e4;
        let v0 = effective_diagonal(0, r, &e).unwrap();
        assert!((v0 + e.params.c6 / r.powi(6)).abs() < 1e-3 * v0.abs());
        let v2 = effective_diagonal(2, r, &e).unwrap();
        let asym = 6.0 / (2.0 * e.mu() * r * r) - e.c_e() * 2.0 / 7.0 / r.powi(3);
        assert!((v2 - asym).abs() < 1e-6 * asym.abs());
        let z = ev(0.0, build_basis(Parity::Even, 0, 2).unwrap());
        let v = effective_diagonal(2, 200.0, &z).unwrap();
        let want = z.isotropic(200.0) + 3.0 / (z.mu() * 4e4);
        assert!((v - want).abs() < 1e-15 * want.abs());
    }

    fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) > f(d) { b = d } else { a = c }
        }
        0.5 * (a + b)
    }

    #[test]
    fn barrier_matches_numeric_maximum() {
        let e = ev(500.0, build_basis(Parity::Even, 0, 2).unwrap());
        let (rm, dv) = barrier(2.0 / 7.0, e.c_e(), e.mu()).unwrap();
        assert!((dv * e.mu() * rm * rm - 1.0).abs() < 1e-12);
        let bare = |r: f64| 3.0 / (e.mu() * r * r) - e.c_e() * 2.0 / 7.0 / r.powi(3);
        let num = golden_max(bare, rm / 4.0, rm * 4.0);
        assert!((num / rm - 1.0).abs() < 1e-6, "{num} vs {rm}");
        let (rm2, dv2) = barrier(2.0 / 7.0, 4.0 * e.c_e(), e.mu()).unwrap();
        assert!((rm2 / rm - 4.0).abs() < 1e-14 && (dv / dv2 - 16.0).abs() < 1e-12);
        assert!(barrier(2.0 / 7.0, 0.0, e.mu()).is_err());
    }

    #[test]
    fn anisotropy_behaviour() {
        let z = ev(0.0, build_basis(Parity::Even, 0, 2).unwrap());
        assert_eq!(anisotropy(1e3, &z).unwrap(), 0.0);
        let e = ev(500.0, build_basis(Parity::Even, 0, 2).unwrap());
        let a = anisotropy(1e6, &e).unwrap();
        let b = anisotropy(2e6, &e).unwrap();
        assert!((a / b - 2.0).abs() < 1e-3, "{a} {b}");
        let mut last = f64::INFINITY;
        for i in 0..40 {
            let r = 2e3 * 1.2f64.powi(i);
            let x = anisotropy(r, &e).unwrap();
            assert!(x < last);
            last = x;
        }
    }

    proptest! {
        #[test]
        fn matrix_symmetric(log_r in 0.0f64..7.0, field in 0.0f64..2000.0) {
            let e = ev(field, build_basis(Parity::Even, 0, 8).unwrap());
            let m = potential_matrix(10f64.powf(log_r), &e).unwrap();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    prop_assert_eq!(m[(i, j)].to_bits(), m[(j, i)].to_bits());
                }
            }
        }
    }
}
