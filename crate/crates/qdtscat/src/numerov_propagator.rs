//! Renormalized matrix Numerov propagation of the coupled radial equations,
//! with step doubling, subspace re-orthogonalization and matching onto free
//! Riccati functions.

use crate::bessel::riccati;
use crate::channels::{build_basis, ChannelBasis, Parity};
use crate::error::{Error, Result};
use crate::potential::{CutoffSpec, PotentialMatrixEvaluator, ShortRangeModel};
use crate::system_model::{FieldSpec, SystemParams};
use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::PI;

/// Anything that can hand the propagator a potential matrix
/// (centrifugal term included) in atomic units.
pub trait ChannelPotential {
    fn channels(&self) -> usize;
    fn mu(&self) -> f64;
    fn l_values(&self) -> Vec<u32>;
    fn fill(&self, r: f64, m: &mut DMatrix<f64>);
}

impl ChannelPotential for PotentialMatrixEvaluator {
    fn channels(&self) -> usize {
        self.len()
    }
    fn mu(&self) -> f64 {
        self.params.mu
    }
    fn l_values(&self) -> Vec<u32> {
        self.basis.channels.iter().map(|c| c.l).collect()
    }
    fn fill(&self, r: f64, m: &mut DMatrix<f64>) {
        PotentialMatrixEvaluator::fill(self, r, m)
    }
}

/// Single-channel potential from a closure; centrifugal term added here.
pub struct FnPotential<F: Fn(f64) -> f64> {
    pub l: u32,
    pub mu: f64,
    pub v: F,
}

impl<F: Fn(f64) -> f64> ChannelPotential for FnPotential<F> {
    fn channels(&self) -> usize {
        1
    }
    fn mu(&self) -> f64 {
        self.mu
    }
    fn l_values(&self) -> Vec<u32> {
        vec![self.l]
    }
    fn fill(&self, r: f64, m: &mut DMatrix<f64>) {
        m[(0, 0)] = (self.v)(r) + (self.l * (self.l + 1)) as f64 / (2.0 * self.mu * r * r);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub points_per_wavelength: f64,
    /// target accumulated Numerov phase error (rad)
    pub phase_tol: f64,
    /// h <= max_step_fraction * r
    pub max_step_fraction: f64,
    /// WKB exponent at the inner start
    pub wkb_suppression: f64,
    pub reorth_every: usize,
    pub gram_cond_max: f64,
    pub seed_noise: f64,
    pub seed: u64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            points_per_wavelength: 40.0,
            phase_tol: 1e-8,
            max_step_fraction: 0.05,
            wkb_suppression: 30.0,
            reorth_every: 2000,
            gram_cond_max: 1e8,
            seed_noise: 1e-3,
            seed: 0x5eed,
        }
    }
}

/// Step profile: at radius r the step may be doubled up to `h_allowed(r)`,
/// which is non-decreasing in r.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    pub r_start: f64,
    pub r_end: f64,
    pub h_start: f64,
    pub points_per_wavelength: f64,
    profile: Vec<(f64, f64)>,
}

fn local_k2(pot: &dyn ChannelPotential, r: f64, e: f64, m: &mut DMatrix<f64>) -> f64 {
    pot.fill(r, m);
    let n = m.nrows();
    let mut best = 0.0f64;
    for i in 0..n {
        let mut s = (e - m[(i, i)]).abs();
        for j in 0..n {
            if j != i {
                s += m[(i, j)].abs();
            }
        }
        best = best.max(s);
    }
    2.0 * pot.mu() * best
}

impl RadialGrid {
    pub fn build(pot: &dyn ChannelPotential, e_au: f64, r_start: f64, r_end: f64, opts: &GridOptions) -> Result<Self> {
        if !(r_start > 0.0) || !(r_end > r_start) {
            return Err(Error::domain(format!("grid needs 0 < r_start < r_end (got {r_start}, {r_end})")));
        }
        let n = pot.channels();
        let mut m = DMatrix::zeros(n, n);
        // fine geometric sampling
        let ratio = 1.0 + 2e-3;
        let mut rs = Vec::new();
        let mut r = r_start;
        while r < r_end * 1.2 {
            rs.push(r);
            r *= ratio;
        }
        rs.push(r);
        let ks: Vec<f64> = rs.iter().map(|&r| local_k2(pot, r, e_au, &mut m).sqrt()).collect();
        let mut phase = 0.0;
        for i in 1..rs.len() {
            phase += 0.5 * (ks[i] + ks[i - 1]) * (rs[i] - rs[i - 1]);
        }
        let ppw = opts
            .points_per_wavelength
            .max(2.0 * PI * (phase.max(1.0) / (480.0 * opts.phase_tol)).powf(0.25));
        let mut h: Vec<f64> = rs
            .iter()
            .zip(&ks)
            .map(|(&r, &k)| {
                let lam = if k > 0.0 { 2.0 * PI / k } else { f64::INFINITY };
                (lam / ppw).min(opts.max_step_fraction * r)
            })
            .collect();
        for i in (0..h.len() - 1).rev() {
            h[i] = h[i].min(h[i + 1]);
        }
        let profile: Vec<(f64, f64)> = rs.into_iter().zip(h).collect();
        Ok(RadialGrid { r_start, r_end, h_start: profile[0].1, points_per_wavelength: ppw, profile })
    }

    /// Uniform grid (used by oracles): fixed step h from r_start.
    pub fn uniform(r_start: f64, r_end: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) || !(r_end > r_start) {
            return Err(Error::domain("uniform grid needs h > 0 and r_end > r_start"));
        }
        Ok(RadialGrid {
            r_start,
            r_end,
            h_start: h,
            points_per_wavelength: 0.0,
            profile: vec![(r_start, h), (f64::INFINITY, h)],
        })
    }

    fn allowed(&self, r: f64, cursor: &mut usize) -> f64 {
        while *cursor + 1 < self.profile.len() && self.profile[*cursor + 1].0 <= r {
            *cursor += 1;
        }
        self.profile[*cursor].1
    }

    pub fn estimated_steps(&self) -> usize {
        let mut n = 0.0;
        for w in self.profile.windows(2) {
            if w[0].0 >= self.r_end {
                break;
            }
            n += (w[1].0.min(self.r_end) - w[0].0) / w[0].1;
        }
        n as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionMatrix {
    pub phi: DMatrix<f64>,
    pub dphi: DMatrix<f64>,
    pub r: f64,
    pub steps: usize,
    pub reorthogonalizations: usize,
    pub rescales: usize,
}

/// Positive-diagonal QR: the returned C = R^{-1} has det C > 0, so the
/// orientation of the solution set is preserved.
fn orthonormalizer(phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = phi.ncols();
    let qr = phi.clone().qr();
    let mut r = qr.r();
    for i in 0..n {
        if r[(i, i)] < 0.0 {
            for j in 0..n {
                r[(i, j)] = -r[(i, j)];
            }
        }
    }
    let scale = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..n {
        if !(r[(i, i)] > 1e-300 * scale.max(1e-300)) || !r[(i, i)].is_finite() {
            return Err(Error::Propagation { r: f64::NAN, reason: "solution columns lost independence".into() });
        }
    }
    r.try_inverse().ok_or_else(|| Error::Propagation { r: f64::NAN, reason: "singular re-orthogonalization".into() })
}

/// Replace the columns of `sol` by an orthonormal set spanning the same
/// space; the same combination is applied to the derivatives.
pub fn reorthogonalize(sol: &SolutionMatrix) -> Result<SolutionMatrix> {
    let c = orthonormalizer(&sol.phi)?;
    Ok(SolutionMatrix {
        phi: &sol.phi * &c,
        dphi: &sol.dphi * &c,
        reorthogonalizations: sol.reorthogonalizations + 1,
        ..sol.clone()
    })
}

fn gram_condition(phi: &DMatrix<f64>) -> f64 {
    let mut p = phi.clone();
    for mut c in p.column_iter_mut() {
        let nrm = c.norm();
        if nrm > 0.0 {
            c /= nrm;
        }
    }
    let sv = p.singular_values();
    let (mx, mn) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, b), &v| (a.max(v), b.min(v)));
    if mn == 0.0 { f64::INFINITY } else { (mx / mn).powi(2) }
}

fn seed_matrix(n: usize, noise: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in i..n {
            let x: f64 = noise * (2.0 * rng.random::<f64>() - 1.0);
            m[(i, j)] += x;
            if i != j {
                m[(j, i)] += x;
            }
        }
    }
    m
}

/// Propagate and return Phi, Phi' at every requested radius (snapped to the
/// first grid point at or beyond it). Radii must lie inside the grid.
pub fn propagate_capture(
    pot: &dyn ChannelPotential,
    grid: &RadialGrid,
    e_au: f64,
    targets: &[f64],
    opts: &GridOptions,
) -> Result<Vec<SolutionMatrix>> {
    let n = pot.channels();
    let mu2 = 2.0 * pot.mu();
    let mut targets: Vec<f64> = targets.to_vec();
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if targets.is_empty() {
        return Ok(vec![]);
    }
    let last = *targets.last().unwrap();
    let mut out = Vec::with_capacity(targets.len());
    let mut next_target = 0usize;

    let eye = DMatrix::<f64>::identity(n, n);
    let mut vm = DMatrix::zeros(n, n);
    let t_of = |r: f64, h: f64, vm: &mut DMatrix<f64>| -> DMatrix<f64> {
        pot.fill(r, vm);
        let mut t = vm.clone();
        for i in 0..n {
            t[(i, i)] -= e_au;
        }
        t * (mu2 * h * h / 12.0)
    };

    let mut h = grid.h_start;
    let mut r = grid.r_start;
    let seed = seed_matrix(n, opts.seed_noise, opts.seed);
    let mut f_prev = DMatrix::<f64>::zeros(n, n);
    let mut f_cur = (&eye - t_of(r, h, &mut vm)) * &seed;
    let mut ring: VecDeque<(f64, DMatrix<f64>)> = VecDeque::with_capacity(8);
    let mut cursor = 0usize;
    let mut since_change = 0usize;
    let (mut steps, mut reorths, mut rescales) = (0usize, 0usize, 0usize);
    let mut since_reorth = 0usize;

    loop {
        let t = t_of(r, h, &mut vm);
        let lu = (&eye - &t).lu();
        let phi = lu
            .solve(&f_cur)
            .ok_or_else(|| Error::Propagation { r, reason: "singular Numerov denominator".into() })?;
        if ring.len() == 7 {
            ring.pop_front();
        }
        ring.push_back((r, phi));
        steps += 1;
        since_change += 1;
        since_reorth += 1;

        // capture when the stencil centre is the first point past a target
        while next_target < targets.len() && ring.len() == 7 {
            let rc = ring[3].0;
            if rc >= targets[next_target] {
                let uniform = ring.iter().zip(ring.iter().skip(1)).all(|(a, b)| ((b.0 - a.0) - h).abs() <= 1e-9 * h);
                if !uniform {
                    return Err(Error::Propagation { r: rc, reason: "non-uniform stencil at capture radius".into() });
                }
                let c = [-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0];
                let mut d = DMatrix::zeros(n, n);
                for (w, (_, p)) in c.iter().zip(ring.iter()) {
                    if *w != 0.0 {
                        d += p * *w;
                    }
                }
                d /= 60.0 * h;
                out.push(SolutionMatrix {
                    phi: ring[3].1.clone(),
                    dphi: d,
                    r: rc,
                    steps,
                    reorthogonalizations: reorths,
                    rescales,
                });
                next_target += 1;
            } else {
                break;
            }
        }
        if next_target >= targets.len() {
            return Ok(out);
        }
        if !r.is_finite() || r > last * 4.0 + 1e9 {
            return Err(Error::Propagation { r, reason: "grid exhausted before the last capture radius".into() });
        }

        // re-orthogonalize / rescale
        let cur = &ring.back().unwrap().1;
        let big = cur.amax();
        let check = since_reorth >= opts.reorth_every
            || (steps % 50 == 0 && gram_condition(cur) > opts.gram_cond_max);
        if check || big > 1e150 || !big.is_finite() {
            if !big.is_finite() {
                return Err(Error::Propagation { r, reason: "overflow in solution matrix".into() });
            }
            let c = if check {
                reorths += 1;
                since_reorth = 0;
                orthonormalizer(cur).map_err(|_| Error::Propagation { r, reason: "rank collapse".into() })?
            } else {
                rescales += 1;
                log::debug!("rescaling solution matrix at r = {r}");
                DMatrix::identity(n, n) / big
            };
            for (_, p) in ring.iter_mut() {
                *p = &*p * &c;
            }
            f_cur = &f_cur * &c;
            f_prev = &f_prev * &c;
        }

        // step doubling
        // six uniform steps since the last change keep the thinned ring uniform
        let h2 = 2.0 * h;
        if since_change >= 6 && h2 <= grid.allowed(r, &mut cursor) {
            let (rb, pb) = ring[ring.len() - 3].clone();
            let pc = ring.back().unwrap().1.clone();
            // keep only points spaced by the new step
            let keep: Vec<(f64, DMatrix<f64>)> = ring
                .iter()
                .rev()
                .step_by(2)
                .cloned()
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect();
            ring = keep.into();
            h = h2;
            f_prev = (&eye - t_of(rb, h, &mut vm)) * pb;
            f_cur = (&eye - t_of(r, h, &mut vm)) * &pc;
            since_change = 0;
        }

        let phi = &ring.back().unwrap().1;
        let f_next = phi * 12.0 - &f_cur * 10.0 - &f_prev;
        f_prev = std::mem::replace(&mut f_cur, f_next);
        r += h;
    }
}

/// Propagate to (the first grid point at or beyond) r_end.
pub fn propagate(pot: &dyn ChannelPotential, grid: &RadialGrid, e_au: f64, opts: &GridOptions) -> Result<SolutionMatrix> {
    let mut v = propagate_capture(pot, grid, e_au, &[grid.r_end], opts)?;
    Ok(v.pop().unwrap())
}

/// Innermost radius where the wall suppresses the least-suppressed channel
/// by e^{-suppression}.
pub fn inner_start(pot: &dyn ChannelPotential, e_au: f64, suppression: f64) -> Result<f64> {
    let n = pot.channels();
    let mut m = DMatrix::zeros(n, n);
    let w = |r: f64, m: &mut DMatrix<f64>| -> f64 {
        pot.fill(r, m);
        let mut lo = f64::INFINITY;
        for i in 0..n {
            lo = lo.min(m[(i, i)] - e_au);
        }
        2.0 * pot.mu() * lo
    };
    // first classically allowed point scanning outward
    let mut r_t = 1.0;
    while w(r_t, &mut m) > 0.0 {
        r_t *= 1.001;
        if r_t > 1e4 {
            return Err(Error::domain("no classically allowed region found for the inner start"));
        }
    }
    let mut s = 0.0;
    let mut r = r_t;
    let dr = 1e-4 * r_t;
    while s < suppression {
        let a = w(r, &mut m).max(0.0).sqrt();
        r -= dr;
        if r <= 0.05 * r_t {
            return Ok(r.max(1e-3));
        }
        let b = w(r, &mut m).max(0.0).sqrt();
        s += 0.5 * (a + b) * dr;
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRadius {
    pub r: f64,
    pub capped: bool,
}

/// Matching radius where the short-range part is negligible against the
/// centrifugal term (l = 2 even, l = 1 odd), past r ~ 1/k where the C6 tail
/// builds the k^4 phase of l >= 2, and, with a field on, where the neglected
/// 1/r^3 tail phase is below `tail_tol` relative.
pub fn asymptotic_radius(
    params: &SystemParams,
    sr: &ShortRangeModel,
    e_au: f64,
    field: &FieldSpec,
    parity: Parity,
    tail_tol: f64,
) -> AsymptoticRadius {
    let cap = 1e8;
    let l = match parity {
        Parity::Even => 2.0,
        Parity::Odd => 1.0,
    };
    let mu = params.mu;
    let mut r = sr.r_join.max(10.0);
    while r < cap {
        let v = crate::potential::isotropic_potential(r, params, sr).abs();
        let cent = l * (l + 1.0) / (2.0 * mu * r * r);
        if v < 1e-6 * (cent - e_au).abs() {
            break;
        }
        r *= 1.01;
    }
    // the dropped C6 tail shifts K by about (beta6/R)^3 relative
    let beta6 = (2.0 * mu * params.c6).powf(0.25);
    r = r.max(100.0 * beta6);
    if e_au > 0.0 {
        let k = (2.0 * mu * e_au).sqrt();
        // C6 tail phase left beyond R is ~(kR)^-5 of the long-range part
        r = r.max(tail_tol.powf(-0.2) / k);
        if field.c_e > 0.0 {
            r = r.max((3.0 / tail_tol).sqrt() / k);
        }
    }
    AsymptoticRadius { r: r.min(cap), capped: r >= cap }
}

/// Per-channel (c1, c2) with phi = c1 sin(kr - l pi/2) + c2 cos(kr - l pi/2),
/// using exact free Riccati functions for value and derivative.
pub fn asymptotic_match(sol: &SolutionMatrix, k: f64, l_values: &[u32]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = sol.phi.nrows();
    if l_values.len() != n {
        return Err(Error::domain("channel count mismatch in asymptotic matching"));
    }
    let x = k * sol.r;
    let mut c1 = DMatrix::zeros(n, n);
    let mut c2 = DMatrix::zeros(n, n);
    for (i, &l) in l_values.iter().enumerate() {
        let (j, jp, nn, np) = riccati(l, x);
        for col in 0..n {
            let f = sol.phi[(i, col)];
            let df = sol.dphi[(i, col)] / k;
            c1[(i, col)] = f * np - nn * df;
            c2[(i, col)] = jp * f - j * df;
        }
    }
    let sv = c1.singular_values();
    let (mx, mn) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, b), &v| (a.max(v), b.min(v)));
    if !(mn > 1e-13 * mx) {
        return Err(Error::Matching(format!("c1 near singular at r = {}", sol.r)));
    }
    Ok((c1, c2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatteringMatrices {
    pub k_matrix: DMatrix<f64>,
    pub s_matrix: DMatrix<Complex<f64>>,
    pub t_matrix: DMatrix<Complex<f64>>,
    pub energy: f64,
    pub field_kvcm: f64,
}

impl ScatteringMatrices {
    pub fn from_k(k: DMatrix<f64>, energy: f64, field_kvcm: f64) -> Result<Self> {
        let n = k.nrows();
        let eye = DMatrix::<Complex<f64>>::identity(n, n);
        let ik = k.map(|v| Complex::new(0.0, v));
        let a = &eye - &ik;
        let b = &eye + &ik;
        let s = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Degenerate("1 - iK is singular".into()))?;
        let t = (&s - &eye) * Complex::new(0.0, -0.5);
        Ok(ScatteringMatrices { k_matrix: k, s_matrix: s, t_matrix: t, energy, field_kvcm })
    }

    pub fn unitarity_defect(&self) -> f64 {
        let n = self.s_matrix.nrows();
        let d = self.s_matrix.adjoint() * &self.s_matrix - DMatrix::<Complex<f64>>::identity(n, n);
        d.iter().fold(0.0f64, |a, v| a.max(v.norm()))
    }

    pub fn k_asymmetry(&self) -> f64 {
        let k = &self.k_matrix;
        let scale = k.amax().max(1.0);
        (k - k.transpose()).amax() / scale
    }
}

/// K = c2 c1^{-1}; S = (1 - iK)^{-1}(1 + iK); T = (S - 1)/(2i).
pub fn k_s_t_from_coefficients(c1: &DMatrix<f64>, c2: &DMatrix<f64>, energy: f64, field_kvcm: f64) -> Result<ScatteringMatrices> {
    let c1t = c1.transpose();
    // K c1 = c2  ->  c1^T K^T = c2^T
    let kt = c1t
        .lu()
        .solve(&c2.transpose())
        .ok_or_else(|| Error::Degenerate("singular c1 in K extraction".into()))?;
    ScatteringMatrices::from_k(kt.transpose(), energy, field_kvcm)
}

/// sigma = 8 pi sum |T_ij / k|^2
pub fn cross_section(t: &ScatteringMatrices, k: f64) -> f64 {
    8.0 * PI * t.t_matrix.iter().map(|v| v.norm_sqr()).sum::<f64>() / (k * k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterOutcome {
    pub matrices: ScatteringMatrices,
    pub sigma: f64,
    pub r_inf: f64,
    pub r_inf_capped: bool,
    pub steps: usize,
}

/// Full direct pipeline for one energy: each (parity, m) block is propagated
/// on its own and the results are assembled block-diagonally.
pub fn scatter(ev: &PotentialMatrixEvaluator, e_au: f64, opts: &GridOptions, tail_tol: f64) -> Result<ScatterOutcome> {
    if !(e_au > 0.0) {
        return Err(Error::domain("scattering needs E > 0"));
    }
    let n = ev.len();
    let k = (2.0 * ev.mu() * e_au).sqrt();
    let mut kmat = DMatrix::zeros(n, n);
    let mut r_inf: f64 = 0.0;
    let mut capped = false;
    let mut steps = 0;
    let groups = coupled_groups(ev);
    for block in &groups {
        let sub = restrict(ev, block)?;
        let parity = Parity::of(sub.basis.channels[0].l);
        let ar = asymptotic_radius(&ev.params, &ev.short_range, e_au, &ev.field, parity, tail_tol);
        capped |= ar.capped;
        let r0 = inner_start(&sub, e_au, opts.wkb_suppression)?;
        let mut r_end = ar.r;
        let mut attempt = 0;
        let (sol, c1, c2) = loop {
            let grid = RadialGrid::build(&sub, e_au, r0, r_end, opts)?;
            let sol = propagate(&sub, &grid, e_au, opts)?;
            match asymptotic_match(&sol, k, &sub.l_values()) {
                Ok((c1, c2)) => break (sol, c1, c2),
                Err(e) if attempt < 3 => {
                    log::warn!("{e}; retrying at a shifted radius");
                    r_end += PI / (2.0 * k);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        steps += sol.steps;
        r_inf = r_inf.max(sol.r);
        let sm = k_s_t_from_coefficients(&c1, &c2, e_au, ev.field.strength_kvcm)?;
        for (a, &i) in block.iter().enumerate() {
            for (b, &j) in block.iter().enumerate() {
                kmat[(i, j)] = sm.k_matrix[(a, b)];
            }
        }
    }
    let matrices = ScatteringMatrices::from_k(kmat, e_au, ev.field.strength_kvcm)?;
    // cross-block T elements are exactly zero by construction; scrub the
    // rounding noise from the block-diagonal inverse
    let matrices = scrub_blocks(matrices, &groups);
    let sigma = cross_section(&matrices, k);
    Ok(ScatterOutcome { matrices, sigma, r_inf, r_inf_capped: capped, steps })
}

/// Groups of channels connected by a non-zero coupling. Distinct
/// (parity, m) blocks never share a group; at zero field every channel is
/// its own group.
pub fn coupled_groups(ev: &PotentialMatrixEvaluator) -> Vec<Vec<usize>> {
    let n = ev.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    if ev.c_e() != 0.0 {
        for block in ev.basis.blocks() {
            for i in block.clone() {
                for j in block.clone() {
                    if i < j && ev.coupling()[(i, j)] != 0.0 {
                        let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = root(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(vec![]);
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// Exact zeros between channels in different coupled groups.
pub(crate) fn scrub_blocks(mut m: ScatteringMatrices, groups: &[Vec<usize>]) -> ScatteringMatrices {
    let n = m.k_matrix.nrows();
    let mut of = vec![0usize; n];
    for (g, idx) in groups.iter().enumerate() {
        for &i in idx {
            of[i] = g;
        }
    }
    for i in 0..n {
        for j in 0..n {
            if of[i] != of[j] {
                m.k_matrix[(i, j)] = 0.0;
                m.s_matrix[(i, j)] = Complex::new(0.0, 0.0);
                m.t_matrix[(i, j)] = Complex::new(0.0, 0.0);
            }
        }
    }
    m
}

/// Evaluator restricted to a subset of channels (kept in order).
pub fn restrict(ev: &PotentialMatrixEvaluator, idx: &[usize]) -> Result<PotentialMatrixEvaluator> {
    let channels: Vec<_> = idx.iter().map(|&i| ev.basis.channels[i]).collect();
    let parity = channels.first().map(|c| Parity::of(c.l));
    let basis = ChannelBasis { parity, l_max: channels.iter().map(|c| c.l).max().unwrap_or(0), channels };
    PotentialMatrixEvaluator::new(ev.params.clone(), ev.field, basis, ev.short_range, ev.cutoff)
}

/// a = -lim K00/k over an energy-halving ladder starting at `t_nk`.
/// Needs a zero-field evaluator with a single l = 0 channel.
pub fn scattering_length(ev: &PotentialMatrixEvaluator, t_nk: f64, opts: &GridOptions) -> Result<f64> {
    if ev.len() != 1 || ev.basis.channels[0].l != 0 || ev.field.c_e != 0.0 {
        return Err(Error::domain("scattering length needs a zero-field single s-wave channel"));
    }
    let mut e = crate::system_model::temperature_to_energy(t_nk)?;
    let mut prev: Option<f64> = None;
    for _ in 0..40 {
        let out = scatter(ev, e, opts, 1e-4)?;
        let k = (2.0 * ev.mu() * e).sqrt();
        let a = -out.matrices.k_matrix[(0, 0)] / k;
        if let Some(p) = prev {
            if ((a - p) / a).abs() < 1e-3 {
                return Ok(a);
            }
        }
        prev = Some(a);
        e *= 0.5;
    }
    Err(Error::ThresholdNotReached(format!("scattering length still drifting at E = {e:e} a.u.")))
}

pub fn s_wave_scattering_length(params: &SystemParams, sr: &ShortRangeModel, t_nk: f64) -> Result<f64> {
    let basis = build_basis(Parity::Even, 0, 0)?;
    let ev = PotentialMatrixEvaluator::new(params.clone(), FieldSpec::zero(), basis, *sr, CutoffSpec::default())?;
    scattering_length(&ev, t_nk, &GridOptions::default())
}
