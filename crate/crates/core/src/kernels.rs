//! Ambiguity-domain kernels: the separable compact-support pre-filter, the
//! energy concentration measure, the radially Gaussian adaptive kernel and
//! the assembly of the kernelled TFD/IAF.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{CGrid, Grid, RGrid};
use crate::par;
use crate::signal::ObservedSignal;
use crate::tf::{freq_matrix, short_time_af, Axis, FreqGrid, JointRep, StAfSlice};

/// Shape (`rho*`) and size (`xi*`) controls of the two kernel branches.
/// `*1` acts on lag, `*2` on Doppler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcskParams {
    pub rho1: f64,
    pub rho2: f64,
    pub xi1: f64,
    pub xi2: f64,
}

pub const RHO_BOUNDS: (f64, f64) = (0.01, 10.0);
pub const XI_BOUNDS: (f64, f64) = (0.01, 0.5);

impl EcskParams {
    pub const fn new(rho1: f64, rho2: f64, xi1: f64, xi2: f64) -> Self {
        Self { rho1, rho2, xi1, xi2 }
    }

    /// Box bounds in `[rho1, rho2, xi1, xi2]` order.
    pub fn bounds() -> [(f64, f64); 4] {
        [RHO_BOUNDS, RHO_BOUNDS, XI_BOUNDS, XI_BOUNDS]
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.rho1, self.rho2, self.xi1, self.xi2]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn in_bounds(&self) -> bool {
        self.to_array()
            .iter()
            .zip(Self::bounds())
            .all(|(v, (lo, hi))| (lo..=hi).contains(v))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bounds() {
            Ok(())
        } else {
            invalid(format!("kernel parameters out of bounds: {self:?}"))
        }
    }
}

/// One branch: `exp(ρ + ρΞ²/(u² − Ξ²))` for `|u| < Ξ`, else 0.
pub fn ecsk_branch(u: f64, rho: f64, xi: f64) -> f64 {
    if u.abs() < xi {
        (rho + rho * xi * xi / (u * u - xi * xi)).exp()
    } else {
        0.0
    }
}

/// Separable kernel value at normalized lag/Doppler coordinates.
pub fn ecsk_weight(tau_norm: f64, kappa_norm: f64, p: &EcskParams) -> f64 {
    ecsk_branch(tau_norm, p.rho1, p.xi1) * ecsk_branch(kappa_norm, p.rho2, p.xi2)
}

/// Kernel surface on a slice grid. Lag is normalized by the signal length
/// and Doppler by the slice length, so both coordinates match the global
/// `(τ/N, κ/N)` plane: `τ̄ = τ/signal_len`, `κ̄ = κ/w_len`.
pub fn ecsk_surface(w_len: usize, signal_len: usize, p: &EcskParams) -> RGrid {
    let h = ((w_len - 1) / 2) as i64;
    let n = signal_len.max(1) as f64;
    let w = w_len as f64;
    let lag: Vec<f64> = (-h..=h).map(|t| ecsk_branch(t as f64 / n, p.rho1, p.xi1)).collect();
    let dop: Vec<f64> = (-h..=h).map(|k| ecsk_branch(k as f64 / w, p.rho2, p.xi2)).collect();
    Grid::from_fn(w_len, w_len, |r, c| lag[r] * dop[c])
}

/// Hadamard product of the kernel surface with the slice.
pub fn apply_prefilter(slice: &StAfSlice, p: &EcskParams) -> StAfSlice {
    let g = ecsk_surface(slice.w_len, slice.signal_len, p);
    let mut out = slice.clone();
    for (a, w) in out.data.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a *= *w;
    }
    out
}

/// Energy concentration measure applied to an ℓ2-normalized TFD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Concentration {
    /// `(Σ|v|^p)^{1/p}`; with `p = 1/2` this is `(Σ|v|^{1/2})²`.
    Norm { exponent: f64 },
    /// `(Σ|v|²)²`, constant for normalized inputs.
    Squared,
}

impl Default for Concentration {
    fn default() -> Self {
        Concentration::Norm { exponent: 0.5 }
    }
}

pub fn concentration_measure(values: &[f64], measure: Concentration) -> Result<f64> {
    let energy: f64 = values.iter().map(|v| v * v).sum();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(Error::ZeroEnergy);
    }
    let norm = energy.sqrt();
    Ok(match measure {
        Concentration::Norm { exponent } => {
            if exponent == 0.5 {
                let s: f64 = values.iter().map(|v| (v.abs() / norm).sqrt()).sum();
                s * s
            } else {
                let s: f64 = values.iter().map(|v| (v.abs() / norm).powf(exponent)).sum();
                s.powf(1.0 / exponent)
            }
        }
        Concentration::Squared => {
            let s: f64 = values.iter().map(|v| (v / norm).powi(2)).sum();
            s * s
        }
    })
}

/// Cached transforms from a `w_len × w_len` slice to its local TFD
/// (`L` frequency bins × `w_len` local instants).
#[derive(Debug, Clone)]
pub struct SliceTransform {
    w_len: usize,
    /// `[m][κ]` inverse Doppler twiddles, scaled by `1/w_len`.
    inv_doppler: CGrid,
    /// `[k][τ]` frequency twiddles.
    freq: CGrid,
}

impl SliceTransform {
    pub fn new(w_len: usize, grid: &FreqGrid) -> Self {
        let h = ((w_len - 1) / 2) as i64;
        let scale = 1.0 / w_len as f64;
        let inv_doppler = Grid::from_fn(w_len, w_len, |m, k| {
            let (m, k) = (m as i64 - h, k as i64 - h);
            let p = (m * k).rem_euclid(w_len as i64) as f64 / w_len as f64;
            Complex64::from_polar(scale, -2.0 * PI * p)
        });
        let lags: Vec<i64> = (-h..=h).collect();
        Self {
            w_len,
            inv_doppler,
            freq: freq_matrix(grid, &lags),
        }
    }

    /// Real part of the local TFD, flattened `[k][m]`.
    pub fn tfd(&self, slice: &CGrid) -> Vec<f64> {
        let w = self.w_len;
        assert_eq!(slice.shape(), (w, w));
        // local IAF: [τ][m]
        let mut local = vec![Complex64::new(0.0, 0.0); w * w];
        for r in 0..w {
            let row = slice.row(r);
            for m in 0..w {
                let t = self.inv_doppler.row(m);
                local[r * w + m] = row.iter().zip(t).map(|(a, b)| a * b).sum();
            }
        }
        let l = self.freq.rows();
        let mut out = vec![0.0; l * w];
        for k in 0..l {
            let f = self.freq.row(k);
            for m in 0..w {
                let mut acc = 0.0;
                for r in 0..w {
                    // real part of f·local
                    let a = f[r];
                    let b = local[r * w + m];
                    acc += a.re * b.re - a.im * b.im;
                }
                out[k * w + m] = acc;
            }
        }
        out
    }
}

/// Adaptive radially Gaussian kernel settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AokConfig {
    /// Volume bound `α` on `(1/4π²)∮σ²(ψ)dψ`.
    pub alpha_volume: f64,
    pub angles: usize,
    /// Radial samples; `None` uses the slice length.
    pub radii: Option<usize>,
    pub iters: usize,
}

impl Default for AokConfig {
    fn default() -> Self {
        Self {
            alpha_volume: 3.0,
            angles: 64,
            radii: None,
            iters: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AokState {
    /// `σ²(ψ_q)` on the uniform angle grid.
    pub sigma2_psi: Vec<f64>,
    pub alpha_volume: f64,
    pub radii: Vec<f64>,
    pub angles: Vec<f64>,
    /// Objective after each accepted iteration (first entry is the start).
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl AokState {
    /// `(1/4π²)·Σ σ²(ψ_q)·Δψ`.
    pub fn volume(&self) -> f64 {
        let dpsi = 2.0 * PI / self.angles.len() as f64;
        self.sigma2_psi.iter().sum::<f64>() * dpsi / (4.0 * PI * PI)
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&0.0)
    }

    /// Spread at angle `psi` by linear interpolation on the angle grid.
    pub fn sigma2_at(&self, psi: f64) -> f64 {
        let q = self.angles.len();
        let pos = psi.rem_euclid(2.0 * PI) / (2.0 * PI) * q as f64;
        let i = pos.floor() as usize % q;
        let frac = pos - pos.floor();
        self.sigma2_psi[i] * (1.0 - frac) + self.sigma2_psi[(i + 1) % q] * frac
    }

    /// `Φ(r,ψ) = exp(−r²/(2σ²(ψ)))`.
    pub fn kernel(&self, tau: f64, kappa: f64) -> f64 {
        let r2 = tau * tau + kappa * kappa;
        if r2 == 0.0 {
            return 1.0;
        }
        let s = self.sigma2_at(kappa.atan2(tau));
        if s <= 0.0 {
            0.0
        } else {
            (-r2 / (2.0 * s)).exp()
        }
    }

    /// Kernel on the rectangular slice grid, symmetrized under `(τ,κ) → (−τ,−κ)`.
    pub fn mask(&self, w_len: usize) -> RGrid {
        let h = ((w_len - 1) / 2) as i64;
        Grid::from_fn(w_len, w_len, |r, c| {
            let (t, k) = ((r as i64 - h) as f64, (c as i64 - h) as f64);
            0.5 * (self.kernel(t, k) + self.kernel(-t, -k))
        })
    }
}

fn bilinear(values: &RGrid, h: f64, tau: f64, kappa: f64) -> f64 {
    let x = tau + h;
    let y = kappa + h;
    let n = values.rows() as f64;
    if x < 0.0 || y < 0.0 || x > n - 1.0 || y > n - 1.0 {
        return 0.0;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (i0, j0) = (x0 as usize, y0 as usize);
    let i1 = (i0 + 1).min(values.rows() - 1);
    let j1 = (j0 + 1).min(values.cols() - 1);
    values[(i0, j0)] * (1.0 - fx) * (1.0 - fy)
        + values[(i1, j0)] * fx * (1.0 - fy)
        + values[(i0, j1)] * (1.0 - fx) * fy
        + values[(i1, j1)] * fx * fy
}

/// Euclidean projection onto `{s ≥ 0, Σs ≤ cap}`.
fn project_capped(v: &[f64], cap: f64) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= cap {
        return clipped;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        acc += x;
        let t = (acc - cap) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

struct PolarEnergy {
    /// `[q][p]` energy samples weighted by `r_p·Δr·Δψ`.
    weighted: Vec<Vec<f64>>,
    r2: Vec<f64>,
}

impl PolarEnergy {
    fn objective(&self, s: &[f64]) -> f64 {
        self.weighted
            .iter()
            .zip(s)
            .map(|(row, &sq)| row.iter().zip(&self.r2).map(|(e, r2)| e * gauss2(*r2, sq)).sum::<f64>())
            .sum()
    }

    fn gradient(&self, s: &[f64]) -> Vec<f64> {
        self.weighted
            .iter()
            .zip(s)
            .map(|(row, &sq)| {
                if sq <= 1e-300 {
                    return 0.0;
                }
                row.iter()
                    .zip(&self.r2)
                    .map(|(e, r2)| e * gauss2(*r2, sq) * r2 / (sq * sq))
                    .sum()
            })
            .collect()
    }
}

/// `|Φ|² = exp(−r²/σ²)`.
fn gauss2(r2: f64, s: f64) -> f64 {
    if r2 == 0.0 {
        1.0
    } else if s <= 0.0 {
        0.0
    } else {
        (-r2 / s).exp()
    }
}

/// Maximize `∮∫|A(r,ψ)Φ(r,ψ)|² r dr dψ` over `σ²(ψ)` subject to the volume
/// bound by projected gradient ascent. Returns the state and the kernel on
/// the slice grid.
pub fn aok_optimize(slice: &StAfSlice, cfg: &AokConfig) -> Result<(AokState, RGrid)> {
    if !(cfg.alpha_volume > 0.0) {
        return invalid("kernel volume must be positive");
    }
    if !(slice.energy() > 0.0) {
        return Err(Error::ZeroEnergy);
    }
    let w = slice.w_len;
    let h = slice.half() as f64;
    let q = cfg.angles.max(4);
    let p = cfg.radii.unwrap_or(w).max(2);
    let r_max = (h * std::f64::consts::SQRT_2).max(1.0);
    let dr = r_max / (p - 1) as f64;
    let dpsi = 2.0 * PI / q as f64;
    let radii: Vec<f64> = (0..p).map(|i| i as f64 * dr).collect();
    let angles: Vec<f64> = (0..q).map(|i| i as f64 * dpsi).collect();
    let power = slice.data.map(|z| z.norm_sqr());
    let weighted: Vec<Vec<f64>> = angles
        .iter()
        .map(|&psi| {
            radii
                .iter()
                .map(|&r| bilinear(&power, h, r * psi.cos(), r * psi.sin()) * r * dr * dpsi)
                .collect()
        })
        .collect();
    let polar = PolarEnergy {
        weighted,
        r2: radii.iter().map(|r| r * r).collect(),
    };

    let cap = cfg.alpha_volume * 4.0 * PI * PI / dpsi;
    let mut s = vec![cap / q as f64; q];
    let mut obj = polar.objective(&s);
    let mut trace = vec![obj];
    let mut converged = false;
    let g0 = polar.gradient(&s);
    let gmax = g0.iter().copied().fold(0.0, f64::max);
    let mut step = if gmax > 0.0 { (cap / q as f64) / gmax } else { 0.0 };
    if gmax == 0.0 {
        converged = true;
    }
    for _ in 0..cfg.iters {
        if converged {
            break;
        }
        let g = polar.gradient(&s);
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = s.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            let cand = project_capped(&cand, cap);
            let o = polar.objective(&cand);
            if o >= obj {
                let gain = o - obj;
                s = cand;
                obj = o;
                accepted = true;
                if gain <= 1e-12 * obj.abs().max(1e-300) {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        trace.push(obj);
        if !accepted {
            converged = true;
        } else {
            step *= 1.5;
        }
    }
    let state = AokState {
        sigma2_psi: s,
        alpha_volume: cfg.alpha_volume,
        radii,
        angles,
        objective_trace: trace,
        converged,
    };
    let mask = state.mask(w);
    Ok((state, mask))
}

/// Kernelled IAF column, TFD column and diagnostics at one instant.
type KernelledColumn = (Vec<Complex64>, Vec<f64>, ColumnDiagnostics);

/// Kernel pipeline settings for [`kernelled_tfd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub w_len: usize,
    pub aok: AokConfig,
    /// Divide each kernelled IAF lag by the gain the same kernel gives a
    /// unit IAF over the window and signal support.
    #[serde(default)]
    pub lag_gain: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            w_len: 15,
            aok: AokConfig::default(),
            lag_gain: false,
        }
    }
}

/// Per-lag gain of `mask` applied to a unit IAF on the window support at `t`.
fn lag_gains(n: usize, t: usize, w_len: usize, mask: &RGrid) -> Vec<Complex64> {
    let ones = vec![Complex64::new(1.0, 0.0); n];
    let mut unit = short_time_af(&ones, t, w_len);
    for (a, m) in unit.data.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *a *= *m;
    }
    unit.center_iaf()
}

/// Per-column diagnostics of the adaptive stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDiagnostics {
    pub n: usize,
    pub converged: bool,
    pub objective: f64,
    pub sigma2_psi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelledRep {
    /// Real freq×time distribution.
    pub tfr: RGrid,
    /// Kernelled lag×time IAF on lags `−h..h` of the window.
    pub iaf: JointRep,
    pub grid: FreqGrid,
    /// `None` when the pre-filter was skipped.
    pub params_used: Option<EcskParams>,
    pub diagnostics: Vec<ColumnDiagnostics>,
}

impl KernelledRep {
    /// Largest deviation between `tfr` and the frequency transform of `iaf`.
    pub fn consistency_error(&self) -> f64 {
        let lags = crate::tf::lag_values(&self.iaf.row_axis);
        let f = freq_matrix(&self.grid, &lags);
        let mut worst = 0.0f64;
        for t in 0..self.iaf.data.cols() {
            let col = crate::tf::freq_transform(&f, &self.iaf.data.column(t));
            for (k, v) in col.iter().enumerate() {
                worst = worst.max((v - Complex64::new(self.tfr[(k, t)], 0.0)).norm());
            }
        }
        worst
    }

    pub fn tfr_rep(&self) -> JointRep {
        JointRep::new(
            self.tfr.map(|&v| Complex64::new(v, 0.0)),
            Axis::frequency(&self.grid),
            self.iaf.col_axis.clone(),
        )
    }
}

/// Kernelled distribution of `x`: per instant, short-time AF → optional
/// pre-filter → adaptive radial kernel → centre-instant IAF → frequency
/// transform.
pub fn kernelled_tfd(
    x: &ObservedSignal,
    prefilter: Option<&EcskParams>,
    cfg: &KernelConfig,
    grid: &FreqGrid,
) -> Result<KernelledRep> {
    if cfg.w_len.is_multiple_of(2) || cfg.w_len < 3 {
        return invalid(format!("window length must be odd and ≥ 3, got {}", cfg.w_len));
    }
    if let Some(p) = prefilter {
        p.validate()?;
    }
    let n = x.len();
    let w = cfg.w_len;
    let h = (w - 1) / 2;
    let lags: Vec<i64> = (-(h as i64)..=h as i64).collect();
    let fm = freq_matrix(grid, &lags);
    let surface = prefilter.map(|p| ecsk_surface(w, n, p));

    let columns: Vec<Result<KernelledColumn>> = par::map_range(n, |t| {
        let mut slice = short_time_af(&x.samples, t, w);
        if let Some(g) = &surface {
            for (a, v) in slice.data.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a *= *v;
            }
        }
        if !(slice.energy() > 0.0) {
            return Ok((
                vec![Complex64::new(0.0, 0.0); w],
                vec![0.0; grid.bins],
                ColumnDiagnostics {
                    n: t,
                    converged: true,
                    objective: 0.0,
                    sigma2_psi: Vec::new(),
                },
            ));
        }
        let (state, mask) = aok_optimize(&slice, &cfg.aok)?;
        for (a, m) in slice.data.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *a *= *m;
        }
        let mut c = slice.center_iaf();
        if cfg.lag_gain {
            let total = match &surface {
                Some(g) => Grid::from_fn(w, w, |r, k| g[(r, k)] * mask[(r, k)]),
                None => mask.clone(),
            };
            let g = lag_gains(n, t, w, &total);
            let g_ref = g[h].norm();
            for (v, gv) in c.iter_mut().zip(&g) {
                *v = if gv.norm() > 0.05 * g_ref {
                    *v / gv
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
        }
        let col: Vec<f64> = crate::tf::freq_transform(&fm, &c).iter().map(|z| z.re).collect();
        Ok((
            c,
            col,
            ColumnDiagnostics {
                n: t,
                converged: state.converged,
                objective: state.objective(),
                sigma2_psi: state.sigma2_psi,
            },
        ))
    });

    let mut iaf_cols = Vec::with_capacity(n);
    let mut tfr_cols = Vec::with_capacity(n);
    let mut diagnostics = Vec::with_capacity(n);
    for c in columns {
        let (a, b, d) = c?;
        iaf_cols.push(a);
        tfr_cols.push(b);
        diagnostics.push(d);
    }
    Ok(KernelledRep {
        tfr: Grid::from_columns(grid.bins, &tfr_cols),
        iaf: JointRep::new(Grid::from_columns(w, &iaf_cols), Axis::lags(h), Axis::time(n)),
        grid: *grid,
        params_used: prefilter.copied(),
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tf::{lag_half, short_time_af};
    use proptest::prelude::*;

    #[test]
    fn branch_values() {
        let p = EcskParams::new(1.0, 2.0, 0.5, 0.3);
        assert_eq!(ecsk_weight(0.0, 0.0, &p), 1.0);
        assert_eq!(ecsk_weight(0.5, 0.0, &p), 0.0);
        assert_eq!(ecsk_weight(0.0, -0.3, &p), 0.0);
        let v = ecsk_weight(0.25, 0.0, &p);
        assert!((v - (-1.0f64 / 3.0).exp()).abs() < 1e-12);
        assert!((v - 0.71653).abs() < 1e-5);
    }

    #[test]
    fn wide_flat_kernel_is_near_identity() {
        let x: Vec<Complex64> = (0..40).map(|t| Complex64::from_polar(1.0, 0.3 * t as f64)).collect();
        let s = short_time_af(&x, 20, 15);
        let p = EcskParams::new(0.01, 0.01, 0.5, 0.5);
        let f = apply_prefilter(&s, &p);
        // interior entries (|τ̄|, |κ̄| ≤ 3/15) keep at least 97% of their value
        for r in 4..11 {
            for c in 4..11 {
                let a = s.data[(r, c)].norm();
                if a > 0.0 {
                    assert!(f.data[(r, c)].norm() / a > 0.97);
                }
            }
        }
    }

    #[test]
    fn prefilter_support_is_inside_kernel() {
        let x: Vec<Complex64> = (0..40)
            .map(|t| Complex64::new((t as f64).sin(), (0.5 * t as f64).cos()))
            .collect();
        let s = short_time_af(&x, 20, 15);
        let p = EcskParams::new(2.0, 1.0, 0.1, 0.1);
        let f = apply_prefilter(&s, &p);
        for r in 0..15 {
            for c in 0..15 {
                let t = s.lag(r) as f64 / 40.0;
                let k = s.doppler(c) as f64 / 15.0;
                if t.abs() >= 0.1 || k.abs() >= 0.1 {
                    assert_eq!(f.data[(r, c)].norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn narrow_doppler_keeps_only_the_ridge() {
        let x = vec![Complex64::new(1.0, 0.0); 40];
        let s = short_time_af(&x, 20, 15);
        let p = EcskParams::new(1.0, 1.0, 0.5, 0.05);
        let f = apply_prefilter(&s, &p);
        let h = s.half();
        for r in 0..15 {
            for c in 0..15 {
                if c != h {
                    assert_eq!(f.data[(r, c)].norm(), 0.0);
                }
            }
            assert!((f.data[(r, h)] - s.data[(r, h)] * ecsk_branch(s.lag(r) as f64 / 40.0, 1.0, 0.5)).norm() < 1e-12);
        }
    }

    #[test]
    fn separable_and_monotone() {
        let p = EcskParams::new(3.0, 0.7, 0.37, 0.21);
        for i in 0..64 {
            for j in 0..64 {
                let t = (i as f64 - 32.0) / 64.0;
                let k = (j as f64 - 32.0) / 64.0;
                let full = ecsk_weight(t, k, &p);
                assert!((full - ecsk_weight(t, 0.0, &p) * ecsk_weight(0.0, k, &p)).abs() < 1e-15);
            }
        }
        for i in 0..32 {
            let a = i as f64 / 64.0;
            let b = (i + 1) as f64 / 64.0;
            assert!(ecsk_branch(b, 3.0, 0.37) <= ecsk_branch(a, 3.0, 0.37));
        }
    }

    #[test]
    fn measure_closed_forms() {
        let m = Concentration::default();
        let mut one = vec![0.0; 10];
        one[3] = 1.0;
        assert!((concentration_measure(&one, m).unwrap() - 1.0).abs() < 1e-12);
        for k in [2usize, 5, 16] {
            let v = vec![(1.0 / k as f64).sqrt(); k];
            let want = (k as f64).powf(1.5);
            assert!((concentration_measure(&v, m).unwrap() - want).abs() < 1e-9 * want);
        }
        let two = [1.0, 1.0, 0.0];
        assert!(concentration_measure(&two, m).unwrap() > concentration_measure(&one, m).unwrap());
        assert!(matches!(concentration_measure(&[0.0; 4], m), Err(Error::ZeroEnergy)));
        let sq = concentration_measure(&[3.0, 1.0, -2.0], Concentration::Squared).unwrap();
        assert!((sq - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slice_transform_matches_generic_route() {
        let x: Vec<Complex64> = (0..30)
            .map(|t| Complex64::new((0.4 * t as f64).cos(), (0.1 * t as f64).sin()))
            .collect();
        let s = short_time_af(&x, 14, 9);
        let grid = FreqGrid::new(16);
        let fast = SliceTransform::new(9, &grid).tfd(&s.data);
        let local = s.local_iaf();
        let lags: Vec<i64> = (-4..=4).collect();
        let f = freq_matrix(&grid, &lags);
        for m in 0..9 {
            let col = crate::tf::freq_transform(&f, &local.column(m));
            for k in 0..16 {
                assert!((col[k].re - fast[k * 9 + m]).abs() < 1e-10);
            }
        }
    }

    fn slice_with(w_len: usize, f: impl Fn(i64, i64) -> f64) -> StAfSlice {
        let h = ((w_len - 1) / 2) as i64;
        StAfSlice {
            center_n: 0,
            w_len,
            signal_len: 64,
            data: Grid::from_fn(w_len, w_len, |r, c| Complex64::new(f(r as i64 - h, c as i64 - h), 0.0)),
        }
    }

    #[test]
    fn origin_energy_keeps_uniform_spread() {
        let s = slice_with(15, |t, k| if t == 0 && k == 0 { 1.0 } else { 0.0 });
        let (state, mask) = aok_optimize(&s, &AokConfig::default()).unwrap();
        assert!((state.volume() - 3.0).abs() < 1e-9);
        assert_eq!(mask[(7, 7)], 1.0);
    }

    #[test]
    fn ray_energy_widens_that_angle() {
        // energy along the lag axis (ψ = 0)
        let s = slice_with(15, |_, k| if k == 0 { 1.0 } else { 0.0 });
        let (state, mask) = aok_optimize(&s, &AokConfig::default()).unwrap();
        assert!(state.sigma2_at(0.0) > state.sigma2_at(PI / 2.0));
        assert!(state.volume() <= 3.0 + 1e-9);
        assert!(state.sigma2_psi.iter().all(|&v| v >= 0.0));
        assert!(state.objective_trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(mask[(0, 7)] > mask[(7, 0)]);
    }

    #[test]
    fn larger_volume_never_loses_objective() {
        let s = slice_with(15, |t, k| {
            ((t * t + 2 * k * k) as f64 * -0.05).exp() + if k == 3 { 0.4 } else { 0.0 }
        });
        let mut cfg = AokConfig::default();
        let (a, _) = aok_optimize(&s, &cfg).unwrap();
        cfg.alpha_volume *= 2.0;
        let (b, _) = aok_optimize(&s, &cfg).unwrap();
        assert!(b.objective() >= a.objective());
    }

    #[test]
    fn projection_respects_cap() {
        let v = [5.0, -1.0, 3.0, 0.5];
        let p = project_capped(&v, 4.0);
        assert!((p.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
        let q = project_capped(&[0.5, 0.5], 4.0);
        assert_eq!(q, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_signal_gives_zero_tfd() {
        let x = ObservedSignal::from_samples(vec![Complex64::new(0.0, 0.0); 32], 1.0);
        let k = kernelled_tfd(
            &x,
            Some(&EcskParams::new(1.0, 1.0, 0.4, 0.1)),
            &KernelConfig::default(),
            &FreqGrid::new(32),
        )
        .unwrap();
        assert_eq!(k.tfr.as_slice().iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        assert_eq!(lag_half(32), 15);
    }

    #[test]
    fn single_tone_kernelled_peaks_on_its_bin() {
        let grid = FreqGrid::new(64);
        let x: Vec<Complex64> = (0..64)
            .map(|t| Complex64::from_polar(1.0, 2.0 * PI * 0.15625 * t as f64))
            .collect();
        let sig = ObservedSignal::from_samples(x, 1.0);
        let p = EcskParams::new(1.0, 1.0, 0.45, 0.05);
        let k = kernelled_tfd(&sig, Some(&p), &KernelConfig::default(), &grid).unwrap();
        assert!(k.consistency_error() < 1e-9);
        let want = grid.bin_of(0.15625);
        let interior = 7..57;
        let hits = interior
            .clone()
            .filter(|&t| {
                let col: Vec<f64> = (0..64).map(|b| k.tfr[(b, t)]).collect();
                (0..64).max_by(|&i, &j| col[i].total_cmp(&col[j])).unwrap() == want
            })
            .count();
        assert!(hits as f64 >= 0.95 * interior.len() as f64);
    }

    proptest! {
        #[test]
        fn ecsk_weight_is_a_unit_bump(rho1 in 0.01f64..10.0, rho2 in 0.01f64..10.0, xi1 in 0.01f64..0.5, xi2 in 0.01f64..0.5,
                                      t in -0.6f64..0.6, k in -0.6f64..0.6) {
            let p = EcskParams::new(rho1, rho2, xi1, xi2);
            let w = ecsk_weight(t, k, &p);
            prop_assert!((0.0..=1.0).contains(&w));
            prop_assert_eq!(w, ecsk_branch(t, rho1, xi1) * ecsk_branch(k, rho2, xi2));
            prop_assert!(ecsk_branch(t * 0.5, rho1, xi1) >= ecsk_branch(t, rho1, xi1));
            prop_assert_eq!(ecsk_weight(-t, -k, &p), w);
        }

        #[test]
        fn aok_state_respects_constraints(seed in proptest::collection::vec(-1.0f64..1.0, 9 * 9), volume in 0.5f64..6.0) {
            let s = slice_with(9, |t, k| seed[((t + 4) * 9 + k + 4) as usize]);
            prop_assume!(s.energy() > 1e-6);
            let cfg = AokConfig { alpha_volume: volume, ..AokConfig::default() };
            let (state, mask) = aok_optimize(&s, &cfg).unwrap();
            prop_assert!(state.volume() <= volume * (1.0 + 1e-9));
            prop_assert!(state.sigma2_psi.iter().all(|&v| v >= 0.0));
            prop_assert!(state.objective_trace.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(mask.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(mask[(4, 4)], 1.0);
        }

        #[test]
        fn projection_is_feasible(v in proptest::collection::vec(-5.0f64..5.0, 1..12), cap in 0.1f64..10.0) {
            let p = project_capped(&v, cap);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!(p.iter().sum::<f64>() <= cap * (1.0 + 1e-12));
        }
    }
}
