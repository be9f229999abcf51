//! Near-threshold bound states from det(Q + K0) = 0, the field map of
//! zero-energy states, and a scalar shooting oracle used for cross-checks.

use crate::channels::Parity;
use crate::error::{Error, Result};
use crate::mqdt_engine::{base_solutions, k0_at_radii, mqdt_from_k0, short_range_k, ShortRangeK};
use crate::numerov_propagator::GridOptions;
use crate::potential::{barrier, PotentialMatrixEvaluator};
use crate::system_model::{energy_to_temperature, FieldSpec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Diagonal Q at one energy below threshold, with the W coefficients it
/// came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    pub energy: f64,
    /// W_f-/W_g- per channel; +inf marks a pole (W_g- = 0)
    pub q: Vec<f64>,
    pub w_fminus: Vec<f64>,
    pub w_gminus: Vec<f64>,
    pub kappa: f64,
}

impl QMatrix {
    pub fn has_pole(&self) -> bool {
        self.q.iter().any(|v| v.is_infinite())
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.q))
    }
}

pub fn q_matrix(ev: &PotentialMatrixEvaluator, e_au: f64) -> Result<QMatrix> {
    if !(e_au < 0.0) {
        return Err(Error::domain(format!("Q is defined below threshold, got E = {e_au:e}")));
    }
    let sols = base_solutions(ev, e_au)?;
    let mut q = Vec::with_capacity(sols.len());
    let mut wf = Vec::with_capacity(sols.len());
    let mut wg = Vec::with_capacity(sols.len());
    let mut kappa = 0.0;
    for s in &sols {
        let w = s.w_coefficients()?;
        let ratio = w.w_fminus / w.w_gminus;
        q.push(if w.w_gminus == 0.0 || !ratio.is_finite() { f64::INFINITY } else { ratio });
        wf.push(w.w_fminus);
        wg.push(w.w_gminus);
        kappa = w.kappa;
    }
    Ok(QMatrix { energy: e_au, q, w_fminus: wf, w_gminus: wg, kappa })
}

/// det(Q + K0). Returns +inf when Q has a pole.
pub fn bound_condition(k0: &DMatrix<f64>, q: &QMatrix) -> f64 {
    if q.has_pole() {
        return f64::INFINITY;
    }
    (q.matrix() + k0).determinant()
}

fn scaled_matrix(k0: &DMatrix<f64>, q: &QMatrix) -> DMatrix<f64> {
    let n = k0.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let nrm = q.w_fminus[i].hypot(q.w_gminus[i]);
        let d = if i == j { q.w_fminus[i] } else { 0.0 };
        (d + q.w_gminus[i] * k0[(i, j)]) / nrm
    })
}

/// det(W_f- + W_g- K0) with every row scaled to a unit (W_f-, W_g-) pair.
/// Same roots as [`bound_condition`] but bounded and free of poles.
pub fn scaled_condition(k0: &DMatrix<f64>, q: &QMatrix) -> f64 {
    scaled_matrix(k0, q).determinant()
}

/// Single-channel condition Q_ii + K0_ii, i.e. channel i with its coupling
/// dropped.
pub fn decoupled_condition(k0: &DMatrix<f64>, q: &QMatrix, i: usize) -> f64 {
    q.q[i] + k0[(i, i)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    Bound,
    /// dominated by an l > 0 channel and held behind its barrier
    QuasiBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confidence {
    High,
    Low,
}

impl std::fmt::Display for Confidence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Confidence::High => "high",
            Confidence::Low => "low",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundState {
    pub energy: f64,
    pub energy_uk: f64,
    pub field_kvcm: f64,
    pub channel_weights: Vec<f64>,
    pub kind: BoundKind,
    /// |scaled condition| at the recorded energy
    pub residual: f64,
    pub confidence: Confidence,
    /// null vector M of (Q + K0)
    pub null_vector: Vec<f64>,
    pub k0: DMatrix<f64>,
    pub r0: f64,
}

/// Where K0 comes from during a root search.
#[derive(Debug, Clone, Copy)]
pub enum K0Source<'a> {
    /// computed once above threshold and reused at every trial energy
    Fixed(&'a ShortRangeK),
    /// recomputed at each trial energy by propagating to r0
    AtEnergy { r0: f64, grid: &'a GridOptions },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSearch {
    /// log-spaced scan points over the energy window
    pub points: usize,
    pub rel_tol: f64,
    /// K0 drift above this flags results as low confidence
    pub drift_max: f64,
    /// wavefunction samples for the channel weights
    pub samples: usize,
}

impl Default for BoundSearch {
    fn default() -> Self {
        BoundSearch { points: 200, rel_tol: 1e-10, drift_max: 1e-3, samples: 2000 }
    }
}

fn k0_for(ev: &PotentialMatrixEvaluator, src: &K0Source, e_au: f64) -> Result<(DMatrix<f64>, f64)> {
    match src {
        K0Source::Fixed(k) => Ok((k.k0.clone(), k.r0)),
        K0Source::AtEnergy { r0, grid } => {
            let v = k0_at_radii(ev, e_au, &[*r0], grid)?;
            Ok((v[0].1.clone(), v[0].0))
        }
    }
}

fn condition_at(ev: &PotentialMatrixEvaluator, src: &K0Source, e_au: f64) -> Result<f64> {
    let (k0, _) = k0_for(ev, src, e_au)?;
    Ok(scaled_condition(&k0, &q_matrix(ev, e_au)?))
}

/// Null vector of (Q + K0); fails unless exactly one singular value is small.
pub fn null_vector(k0: &DMatrix<f64>, q: &QMatrix) -> Result<DVector<f64>> {
    let a = scaled_matrix(k0, q);
    let n = a.nrows();
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD without right vectors".into()))?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| svd.singular_values[x].partial_cmp(&svd.singular_values[y]).unwrap());
    let top = svd.singular_values[idx[n - 1]];
    if n > 1 && svd.singular_values[idx[1]] < 1e-6 * top {
        return Err(Error::Degenerate(format!("null space of Q + K0 has dimension > 1 at E = {:e}", q.energy)));
    }
    let mut m = v_t.row(idx[0]).transpose();
    // fix the overall sign: largest component positive
    let big = m.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
    if big < 0.0 {
        m = -m;
    }
    Ok(m)
}

/// All sign-change roots of the bound condition with |E| in [e_min, e_max],
/// refined by bisection.
pub fn find_bound_states(
    ev: &PotentialMatrixEvaluator,
    e_min: f64,
    e_max: f64,
    k0: &K0Source,
    search: &BoundSearch,
) -> Result<Vec<BoundState>> {
    if !(e_min > 0.0 && e_max > e_min) {
        return Err(Error::domain("bound-state window needs 0 < |E|_min < |E|_max"));
    }
    let n = search.points.max(2);
    let ratio = (e_max / e_min).powf(1.0 / (n - 1) as f64);
    let energies: Vec<f64> = (0..n).map(|i| -e_min * ratio.powi(i as i32)).collect();
    let mut values = Vec::with_capacity(n);
    for &e in &energies {
        // beyond the real-root envelope the base pairs do not exist
        values.push(match condition_at(ev, k0, e) {
            Ok(d) => Some(d),
            Err(Error::ComplexRoot { .. }) => None,
            Err(err) => return Err(err),
        });
    }
    if values.iter().all(|v| v.is_none()) {
        return Err(Error::domain("no energy in the bound-state window has real characteristic roots"));
    }
    let mut out = Vec::new();
    for i in 1..n {
        let (Some(d0), Some(d1)) = (values[i - 1], values[i]) else { continue };
        if !(d0 * d1 < 0.0) {
            continue;
        }
        let (mut a, mut b, mut da) = (energies[i - 1], energies[i], d0);
        while (a - b).abs() > search.rel_tol * a.abs().min(b.abs()) {
            let m = 0.5 * (a + b);
            let dm = condition_at(ev, k0, m)?;
            if dm == 0.0 {
                a = m;
                b = m;
                break;
            }
            if dm * da < 0.0 {
                b = m;
            } else {
                a = m;
                da = dm;
            }
        }
        let e = 0.5 * (a + b);
        let residual = condition_at(ev, k0, e)?.abs();
        // a sign flip that does not shrink is a jump, not a root
        if residual > 1e-4 * d0.abs().max(d1.abs()) {
            log::debug!("rejected sign change near E = {e:e} (residual {residual:e})");
            continue;
        }
        let low = match k0 {
            K0Source::Fixed(k) => k.drift > search.drift_max || e.abs() > extrapolation_limit(ev, k.r0),
            K0Source::AtEnergy { .. } => false,
        };
        out.push(state_at(ev, k0, e, residual, low, search.samples)?);
    }
    Ok(out)
}

/// Reusing one K0 below threshold is trusted for |E| < C6/R0^6.
pub fn extrapolation_limit(ev: &PotentialMatrixEvaluator, r0: f64) -> f64 {
    ev.params.c6 / r0.powi(6)
}

fn state_at(ev: &PotentialMatrixEvaluator, src: &K0Source, e: f64, residual: f64, low: bool, samples: usize) -> Result<BoundState> {
    let (k0, r0) = k0_for(ev, src, e)?;
    let q = q_matrix(ev, e)?;
    let m = null_vector(&k0, &q)?;
    let mut st = BoundState {
        energy: e,
        energy_uk: energy_to_temperature(e) * 1e-3,
        field_kvcm: ev.field.strength_kvcm,
        channel_weights: vec![],
        kind: BoundKind::Bound,
        residual,
        confidence: if low { Confidence::Low } else { Confidence::High },
        null_vector: m.iter().cloned().collect(),
        k0,
        r0,
    };
    match bound_wavefunction(ev, &st, samples) {
        Ok(wf) => st.channel_weights = wf.weights,
        Err(err) => {
            log::warn!("no channel weights at E = {e:e}: {err}");
            st.confidence = Confidence::Low;
        }
    }
    st.kind = classify(ev, &st);
    Ok(st)
}

fn classify(ev: &PotentialMatrixEvaluator, st: &BoundState) -> BoundKind {
    let dominant = st
        .channel_weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i);
    let Some(i) = dominant else { return BoundKind::Bound };
    let ch = ev.basis.channels[i];
    if ch.l == 0 {
        return BoundKind::Bound;
    }
    let c = ev.coupling()[(i, i)];
    match barrier(c, ev.c_e(), ev.mu()) {
        Ok((_, dv)) if dv > st.energy.abs() => BoundKind::QuasiBound,
        _ => BoundKind::Bound,
    }
}

/// Outer-region bound-state wavefunction Psi = (F + G K0) M on r >= r0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundWavefunction {
    pub r: Vec<f64>,
    /// one row per radius, one column per channel
    pub psi: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub kappa: f64,
    /// Psi'/Psi of the dominant channel at the last radius
    pub tail_log_derivative: f64,
}

/// Sampled on [r0, r0 + 8/kappa] and normalized to unit summed density over
/// that range. The inner region is not reconstructed.
pub fn bound_wavefunction(ev: &PotentialMatrixEvaluator, state: &BoundState, samples: usize) -> Result<BoundWavefunction> {
    if !(state.energy < 0.0) {
        return Err(Error::domain("bound states have E < 0"));
    }
    let n = ev.len();
    if state.null_vector.len() != n || state.k0.nrows() != n {
        return Err(Error::domain("bound state does not match the channel basis"));
    }
    let sols = base_solutions(ev, state.energy)?;
    let kappa = (-2.0 * ev.mu() * state.energy).sqrt();
    let samples = samples.max(16);
    let r_end = state.r0 + 8.0 / kappa;
    let h = (r_end - state.r0) / (samples - 1) as f64;
    let m = DVector::from_column_slice(&state.null_vector);
    let km = &state.k0 * &m;
    // at the root (K0 M)_i = -q_i M_i, so each channel is its own decaying
    // solution M_i (f_i - q_i g_i); this avoids the cancellation in K0 M
    let q = q_matrix(ev, state.energy)?;
    let g_coef: Vec<f64> = (0..n).map(|i| if q.q[i].is_finite() { -q.q[i] * m[i] } else { km[i] }).collect();
    let mut psi = DMatrix::zeros(samples, n);
    let mut dpsi_last = vec![0.0; n];
    let mut r = Vec::with_capacity(samples);
    for s in 0..samples {
        let x = state.r0 + h * s as f64;
        r.push(x);
        for (i, sol) in sols.iter().enumerate() {
            let bp = sol.base_pair(x)?;
            psi[(s, i)] = bp.f * m[i] + bp.g * g_coef[i];
            if s + 1 == samples {
                dpsi_last[i] = bp.df * m[i] + bp.dg * g_coef[i];
            }
        }
    }
    let mut dens = vec![0.0; n];
    for i in 0..n {
        for s in 1..samples {
            dens[i] += 0.5 * h * (psi[(s - 1, i)].powi(2) + psi[(s, i)].powi(2));
        }
    }
    let total: f64 = dens.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate("bound wavefunction has no norm".into()));
    }
    let scale = total.sqrt().recip();
    psi *= scale;
    let weights: Vec<f64> = dens.iter().map(|d| d / total).collect();
    let dom = (0..n).max_by(|&a, &b| weights[a].partial_cmp(&weights[b]).unwrap()).unwrap();
    let tail = dpsi_last[dom] / (psi[(samples - 1, dom)] / scale);
    Ok(BoundWavefunction { r, psi, weights, kappa, tail_log_derivative: tail })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceOptions {
    /// |E| used on both sides of threshold (a.u.)
    pub e_probe: f64,
    /// fixed matching radius for every field point
    pub r0: f64,
    pub grid: GridOptions,
    /// field bisection stops below this width (kV/cm)
    pub field_tol: f64,
}

impl ResonanceOptions {
    pub fn new(e_probe: f64) -> Self {
        ResonanceOptions { e_probe, r0: 2000.0, grid: GridOptions::default(), field_tol: 1e-3 }
    }
}

/// Scattering and bound-state data at one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonancePoint {
    pub field_kvcm: f64,
    pub sigma: f64,
    /// scaled condition at E = -e_probe
    pub condition: f64,
    pub k0_drift: f64,
}

pub fn resonance_point(ev: &PotentialMatrixEvaluator, field_kvcm: f64, opts: &ResonanceOptions) -> Result<ResonancePoint> {
    let evf = ev.with_field(FieldSpec::new(field_kvcm, &ev.params)?);
    let k0 = short_range_k(&evf, opts.e_probe, opts.r0, &opts.grid)?;
    let sigma = mqdt_from_k0(&evf, &k0, opts.e_probe)?.sigma;
    let q = q_matrix(&evf, -opts.e_probe)?;
    Ok(ResonancePoint { field_kvcm, sigma, condition: scaled_condition(&k0.k0, &q), k0_drift: k0.drift })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceRecord {
    pub field_r: f64,
    pub bound_state: BoundState,
    /// sigma at the nearest scan maximum within one step, if any
    pub sigma_peak: Option<f64>,
    pub peak_field: Option<f64>,
    pub parity: Parity,
    pub confidence: Confidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceScan {
    pub points: Vec<ResonancePoint>,
    pub records: Vec<ResonanceRecord>,
    /// fields of sigma maxima with no zero-energy root within one step
    pub unmatched_peaks: Vec<f64>,
}

/// Interior local maxima of sigma along the scan.
pub fn sigma_peaks(points: &[ResonancePoint]) -> Vec<usize> {
    (1..points.len().saturating_sub(1))
        .filter(|&i| points[i].sigma > points[i - 1].sigma && points[i].sigma >= points[i + 1].sigma)
        .collect()
}

fn condition_at_field(ev: &PotentialMatrixEvaluator, field: f64, opts: &ResonanceOptions) -> Result<(f64, ShortRangeK, PotentialMatrixEvaluator)> {
    let evf = ev.with_field(FieldSpec::new(field, &ev.params)?);
    let v = k0_at_radii(&evf, opts.e_probe, &[opts.r0], &opts.grid)?;
    let (r0, k, asym) = v[0].clone();
    let q = q_matrix(&evf, -opts.e_probe)?;
    let d = scaled_condition(&k, &q);
    let k0 = ShortRangeK { k0: k, r0, energy: opts.e_probe, field_kvcm: field, stability: 0.0, drift: 0.0, asymmetry: asym };
    Ok((d, k0, evf))
}

/// Fields where a bound state crosses E = -e_probe, paired with the sigma
/// maxima of the same scan. `points` must be sorted by field.
pub fn locate_resonances(ev: &PotentialMatrixEvaluator, points: &[ResonancePoint], opts: &ResonanceOptions) -> Result<ResonanceScan> {
    let parity = Parity::of(ev.basis.channels[0].l);
    let step = points.windows(2).map(|w| w[1].field_kvcm - w[0].field_kvcm).fold(0.0f64, f64::max);
    let peaks = sigma_peaks(points);
    let mut records = Vec::new();
    for w in points.windows(2) {
        let (p0, p1) = (&w[0], &w[1]);
        if !(p0.condition * p1.condition < 0.0) {
            continue;
        }
        let (mut a, mut b, mut da) = (p0.field_kvcm, p1.field_kvcm, p0.condition);
        while b - a > opts.field_tol {
            let m = 0.5 * (a + b);
            let (dm, _, _) = condition_at_field(ev, m, opts)?;
            if dm * da < 0.0 {
                b = m;
            } else {
                a = m;
                da = dm;
            }
        }
        let field_r = 0.5 * (a + b);
        let (d, k0, evf) = condition_at_field(ev, field_r, opts)?;
        if d.abs() > 1e-2 * p0.condition.abs().max(p1.condition.abs()) {
            log::debug!("sign change near {field_r} kV/cm is a jump, not a root");
            continue;
        }
        // with a field on K0 drifts with R0 by construction, so confidence
        // here rests on the pairing with a sigma maximum
        let bound_state = state_at(&evf, &K0Source::Fixed(&k0), -opts.e_probe, d.abs(), false, 400)?;
        let peak = peaks
            .iter()
            .map(|&i| &points[i])
            .filter(|p| (p.field_kvcm - field_r).abs() <= step * (1.0 + 1e-9))
            .min_by(|x, y| (x.field_kvcm - field_r).abs().partial_cmp(&(y.field_kvcm - field_r).abs()).unwrap());
        let confidence = if peak.is_some() && bound_state.confidence == Confidence::High { Confidence::High } else { Confidence::Low };
        records.push(ResonanceRecord {
            field_r,
            bound_state,
            sigma_peak: peak.map(|p| p.sigma),
            peak_field: peak.map(|p| p.field_kvcm),
            parity,
            confidence,
        });
    }
    let unmatched_peaks = peaks
        .iter()
        .map(|&i| points[i].field_kvcm)
        .filter(|f| !records.iter().any(|r| (r.field_r - f).abs() <= step * (1.0 + 1e-9)))
        .collect();
    Ok(ResonanceScan { points: points.to_vec(), records, unmatched_peaks })
}

/// Sequential field scan followed by [`locate_resonances`].
pub fn resonance_fields(ev: &PotentialMatrixEvaluator, fields: &[f64], opts: &ResonanceOptions) -> Result<ResonanceScan> {
    let points = fields.iter().map(|&f| resonance_point(ev, f, opts)).collect::<Result<Vec<_>>>()?;
    locate_resonances(ev, &points, opts)
}

/// Dirichlet levels of a single radial equation, -u''/(2 mu) + v u = E u, on a
/// uniform Numerov grid, located by node counting. `v` includes the
/// centrifugal term. The outer wall sits 30/kappa(e_hi) past the outer
/// turning point, so box effects are far below any tolerance of interest.
pub fn shooting_levels(v: &dyn Fn(f64) -> f64, mu: f64, e_lo: f64, e_hi: f64, h: f64) -> Result<Vec<f64>> {
    if !(e_lo < e_hi && e_hi < 0.0 && h > 0.0) {
        return Err(Error::domain("shooting needs e_lo < e_hi < 0 and h > 0"));
    }
    // u = 0 at r_min: the origin, or deep enough in the wall that Numerov
    // is still stable there
    let mut r_min = 0.0;
    while !(2.0 * mu * (v(r_min) - e_lo) * h * h <= 0.5) {
        r_min += h;
        if r_min > 1e4 {
            return Err(Error::domain("no inner wall found"));
        }
    }
    let mut r = r_min.max(h);
    let mut inside = false;
    loop {
        let below = v(r) < e_hi;
        if below {
            inside = true;
        } else if inside {
            break;
        }
        r *= 1.0005;
        if r > 1e7 {
            return Err(Error::domain("no outer turning point"));
        }
    }
    let r_out = r + 30.0 / (-2.0 * mu * e_hi).sqrt();
    let steps = ((r_out - r_min) / h).ceil() as usize;
    let nodes = |e: f64| -> usize {
        let c = 2.0 * mu * h * h / 12.0;
        let w = |x: f64| c * (v(x) - e);
        let (mut u0, mut u1) = (0.0f64, 1e-30f64);
        let (mut w0, mut w1) = (w(r_min), w(r_min + h));
        let mut count = 0usize;
        for i in 2..=steps {
            let x = r_min + h * i as f64;
            let w2 = w(x);
            let u2 = ((2.0 + 10.0 * w1) * u1 - (1.0 - w0) * u0) / (1.0 - w2);
            if u2 == 0.0 || u2.signum() != u1.signum() {
                count += 1;
            }
            let (a, b) = if u2.abs() > 1e200 { (u1 * 1e-200, u2 * 1e-200) } else { (u1, u2) };
            u0 = a;
            u1 = b;
            w0 = w1;
            w1 = w2;
        }
        count
    };
    let (n_lo, n_hi) = (nodes(e_lo), nodes(e_hi));
    let mut levels = Vec::new();
    for n in n_lo..n_hi {
        let (mut a, mut b) = (e_lo, e_hi);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if nodes(m) > n {
                b = m;
            } else {
                a = m;
            }
            if (b - a).abs() <= 1e-13 * m.abs() {
                break;
            }
        }
        levels.push(0.5 * (a + b));
    }
    Ok(levels)
}
