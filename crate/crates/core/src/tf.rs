//! Discrete bilinear joint-variable transforms.
//!
//! Conventions used throughout the crate:
//!
//! * lags are integers `τ ∈ {−Lτ, …, Lτ}` with `Lτ = ⌊(N−1)/2⌋`; samples
//!   outside `[0, N)` read as zero;
//! * the Doppler transform of a lag×time matrix is
//!   `A[τ,κ] = Σₙ C[τ,n]·e^{j2πκn/N}` with no normalization; its inverse
//!   carries the `1/N`;
//! * the frequency transform is `W[k,n] = Σ_τ C[τ,n]·e^{−j4πν_k τ}` on the
//!   grid `ν_k = k/(2L)`, `k = 0..L−1`. Because lags are integers this grid
//!   covers `ν ∈ [0, 1/2)` and a tone at `ν` lands on bin `2Lν mod L`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::{CGrid, Grid, RGrid};
use crate::signal::ObservedSignal;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisKind {
    Lag,
    Doppler,
    Time,
    Frequency,
}

impl AxisKind {
    pub fn name(self) -> &'static str {
        match self {
            AxisKind::Lag => "lag",
            AxisKind::Doppler => "doppler",
            AxisKind::Time => "time",
            AxisKind::Frequency => "frequency",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub kind: AxisKind,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn lags(half: usize) -> Self {
        Self {
            kind: AxisKind::Lag,
            values: (-(half as i64)..=half as i64).map(|t| t as f64).collect(),
        }
    }

    pub fn time(n: usize) -> Self {
        Self {
            kind: AxisKind::Time,
            values: (0..n).map(|t| t as f64).collect(),
        }
    }

    /// Doppler axis in cycles/sample, `κ/N`.
    pub fn doppler(n: usize) -> Self {
        Self {
            kind: AxisKind::Doppler,
            values: (0..n).map(|k| k as f64 / n as f64).collect(),
        }
    }

    /// Frequency axis in cycles/sample, `k/(2L)`.
    pub fn frequency(grid: &FreqGrid) -> Self {
        Self {
            kind: AxisKind::Frequency,
            values: (0..grid.bins).map(|k| grid.nu(k)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Transform convention tag carried by every representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Integer lags, `e^{−j4πντ}` frequency kernel, `ν_k = k/(2L)`.
    IntegerLag,
}

/// Frequency grid `ν_k = k/(2L)`, `k = 0..L−1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreqGrid {
    pub bins: usize,
}

impl FreqGrid {
    pub fn new(bins: usize) -> Self {
        assert!(bins > 0, "frequency grid needs at least one bin");
        Self { bins }
    }

    pub fn nu(&self, k: usize) -> f64 {
        k as f64 / (2.0 * self.bins as f64)
    }

    /// Nearest bin of a normalized frequency (cycles/sample) under the
    /// integer-lag convention; frequencies alias with period 1/2.
    pub fn bin_of(&self, nu: f64) -> usize {
        let l = self.bins as f64;
        ((2.0 * l * nu).round() as i64).rem_euclid(self.bins as i64) as usize
    }

    /// Circular distance between two bins.
    pub fn distance(&self, a: usize, b: usize) -> usize {
        let d = a.abs_diff(b) % self.bins;
        d.min(self.bins - d)
    }
}

/// Complex matrix over a declared pair of axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRep {
    pub data: CGrid,
    pub row_axis: Axis,
    pub col_axis: Axis,
    pub convention: Convention,
}

impl JointRep {
    pub fn new(data: CGrid, row_axis: Axis, col_axis: Axis) -> Self {
        assert_eq!(data.rows(), row_axis.len());
        assert_eq!(data.cols(), col_axis.len());
        Self {
            data,
            row_axis,
            col_axis,
            convention: Convention::IntegerLag,
        }
    }

    /// Half-width `Lτ` of a lag axis in rows.
    pub fn lag_half(&self) -> usize {
        assert_eq!(self.row_axis.kind, AxisKind::Lag);
        (self.row_axis.len() - 1) / 2
    }

    pub fn real(&self) -> RGrid {
        self.data.map(|z| z.re)
    }

    pub fn magnitude(&self) -> RGrid {
        self.data.abs()
    }

    /// Largest imaginary part magnitude.
    pub fn max_imag(&self) -> f64 {
        self.data.as_slice().iter().map(|z| z.im.abs()).fold(0.0, f64::max)
    }
}

/// Half-width of the symmetric lag grid for a length-N signal.
pub fn lag_half(n: usize) -> usize {
    n.saturating_sub(1) / 2
}

fn sample(x: &[Complex64], i: i64) -> Complex64 {
    if i >= 0 && (i as usize) < x.len() {
        x[i as usize]
    } else {
        ZERO
    }
}

/// `e^{j2π·sign·a·b/n}` table indexed `[a][b]` flattened.
fn twiddles(rows: &[i64], cols: &[i64], n: usize, sign: f64) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &a in rows {
        for &b in cols {
            let ph = ((a * b).rem_euclid(n as i64)) as f64 / n as f64;
            out.push(Complex64::from_polar(1.0, sign * 2.0 * PI * ph));
        }
    }
    out
}

/// Instantaneous autocorrelation `C[τ,n] = x[n+τ]·x*[n−τ]`.
pub fn iaf(x: &ObservedSignal) -> JointRep {
    iaf_of(&x.samples)
}

pub fn iaf_of(x: &[Complex64]) -> JointRep {
    let n = x.len();
    let half = lag_half(n) as i64;
    let lags: Vec<i64> = (-half..=half).collect();
    let data = Grid::from_fn(lags.len(), n, |r, t| {
        let tau = lags[r];
        let t = t as i64;
        sample(x, t + tau) * sample(x, t - tau).conj()
    });
    JointRep::new(data, Axis::lags(half as usize), Axis::time(n))
}

/// Doppler transform along time: `A[τ,κ] = Σₙ C[τ,n]·e^{j2πκn/N}`.
pub fn af_from_iaf(c: &JointRep) -> JointRep {
    assert_eq!(c.col_axis.kind, AxisKind::Time);
    let n = c.data.cols();
    let idx: Vec<i64> = (0..n as i64).collect();
    let tw = twiddles(&idx, &idx, n, 1.0); // [κ][n]
    let data = Grid::from_fn(c.data.rows(), n, |r, k| {
        let row = c.data.row(r);
        let t = &tw[k * n..(k + 1) * n];
        row.iter().zip(t).map(|(a, b)| a * b).sum()
    });
    JointRep::new(data, c.row_axis.clone(), Axis::doppler(n))
}

/// Inverse of [`af_from_iaf`].
pub fn iaf_from_af(a: &JointRep) -> JointRep {
    assert_eq!(a.col_axis.kind, AxisKind::Doppler);
    let n = a.data.cols();
    let idx: Vec<i64> = (0..n as i64).collect();
    let tw = twiddles(&idx, &idx, n, -1.0); // [n][κ]
    let scale = 1.0 / n as f64;
    let data = Grid::from_fn(a.data.rows(), n, |r, t| {
        let row = a.data.row(r);
        let w = &tw[t * n..(t + 1) * n];
        row.iter().zip(w).map(|(x, y)| x * y).sum::<Complex64>() * scale
    });
    JointRep::new(data, a.row_axis.clone(), Axis::time(n))
}

/// Frequency-transform matrix `F[k,τ] = e^{−j2πkτ/L}` for the given lags.
pub fn freq_matrix(grid: &FreqGrid, lags: &[i64]) -> CGrid {
    let ks: Vec<i64> = (0..grid.bins as i64).collect();
    let tw = twiddles(&ks, lags, grid.bins, -1.0);
    let mut g = CGrid::zeros(grid.bins, lags.len());
    g.as_mut_slice().copy_from_slice(&tw);
    g
}

/// Apply the frequency transform to one lag vector.
pub fn freq_transform(f: &CGrid, lag_column: &[Complex64]) -> Vec<Complex64> {
    assert_eq!(f.cols(), lag_column.len());
    (0..f.rows())
        .map(|k| f.row(k).iter().zip(lag_column).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn lag_values(axis: &Axis) -> Vec<i64> {
    assert_eq!(axis.kind, AxisKind::Lag);
    axis.values.iter().map(|&v| v as i64).collect()
}

/// Wigner-Ville distribution `W[k,n] = Σ_τ C[τ,n]·e^{−j4πν_kτ}`.
///
/// The transform is invertible when `grid.bins ≥ 2Lτ + 1`.
pub fn wvd_from_iaf(c: &JointRep, grid: &FreqGrid) -> JointRep {
    let lags = lag_values(&c.row_axis);
    let f = freq_matrix(grid, &lags);
    let cols: Vec<Vec<Complex64>> = (0..c.data.cols())
        .map(|t| freq_transform(&f, &c.data.column(t)))
        .collect();
    JointRep::new(
        Grid::from_columns(grid.bins, &cols),
        Axis::frequency(grid),
        c.col_axis.clone(),
    )
}

/// Inverse frequency transform back onto a symmetric lag grid.
pub fn iaf_from_wvd(w: &JointRep, half: usize) -> JointRep {
    assert_eq!(w.row_axis.kind, AxisKind::Frequency);
    let l = w.data.rows();
    let lags: Vec<i64> = (-(half as i64)..=half as i64).collect();
    let ks: Vec<i64> = (0..l as i64).collect();
    let tw = twiddles(&lags, &ks, l, 1.0); // [τ][k]
    let scale = 1.0 / l as f64;
    let data = Grid::from_fn(lags.len(), w.data.cols(), |r, t| {
        let row = &tw[r * l..(r + 1) * l];
        (0..l).map(|k| row[k] * w.data[(k, t)]).sum::<Complex64>() * scale
    });
    JointRep::new(data, Axis::lags(half), w.col_axis.clone())
}

/// Short-time ambiguity function around one instant.
///
/// Rows are lags `τ = −h..h`, columns are centred Doppler indices
/// `κ = −h..h` with `h = (w_len−1)/2`. Doppler phase is referenced to the
/// window centre: `A[τ,κ] = Σ_m x_w[n₀+m+τ]·x_w*[n₀+m−τ]·e^{j2πκm/w_len}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StAfSlice {
    pub center_n: usize,
    pub w_len: usize,
    /// Length of the signal the slice was cut from.
    pub signal_len: usize,
    pub data: CGrid,
}

impl StAfSlice {
    pub fn half(&self) -> usize {
        (self.w_len - 1) / 2
    }

    /// Signed lag of row `r`.
    pub fn lag(&self, r: usize) -> i64 {
        r as i64 - self.half() as i64
    }

    /// Signed Doppler index of column `c`.
    pub fn doppler(&self, c: usize) -> i64 {
        c as i64 - self.half() as i64
    }

    pub fn energy(&self) -> f64 {
        self.data.energy()
    }

    /// Local IAF at offsets `m = −h..h` from the centre: lag×local-time.
    pub fn local_iaf(&self) -> CGrid {
        let w = self.w_len;
        let h = self.half() as i64;
        let ms: Vec<i64> = (-h..=h).collect();
        let tw = twiddles(&ms, &ms, w, -1.0); // [m][κ]
        let scale = 1.0 / w as f64;
        Grid::from_fn(w, w, |r, mi| {
            let row = self.data.row(r);
            let t = &tw[mi * w..(mi + 1) * w];
            row.iter().zip(t).map(|(a, b)| a * b).sum::<Complex64>() * scale
        })
    }

    /// Lag vector of the local IAF at the window centre (`m = 0`).
    pub fn center_iaf(&self) -> Vec<Complex64> {
        let scale = 1.0 / self.w_len as f64;
        (0..self.w_len)
            .map(|r| self.data.row(r).iter().sum::<Complex64>() * scale)
            .collect()
    }
}

pub fn short_time_af(x: &[Complex64], center_n: usize, w_len: usize) -> StAfSlice {
    assert!(w_len % 2 == 1 && w_len >= 1, "window length must be odd");
    let h = ((w_len - 1) / 2) as i64;
    let c = center_n as i64;
    let win = |u: i64| -> Complex64 {
        if (u - c).abs() <= h {
            sample(x, u)
        } else {
            ZERO
        }
    };
    let ms: Vec<i64> = (-h..=h).collect();
    let tw = twiddles(&ms, &ms, w_len, 1.0); // [κ][m]
    let mut data = CGrid::zeros(w_len, w_len);
    let mut prod = vec![ZERO; w_len];
    for (r, &tau) in ms.iter().enumerate() {
        for (i, &m) in ms.iter().enumerate() {
            prod[i] = win(c + m + tau) * win(c + m - tau).conj();
        }
        for (k, _) in ms.iter().enumerate() {
            let t = &tw[k * w_len..(k + 1) * w_len];
            data[(r, k)] = prod.iter().zip(t).map(|(a, b)| a * b).sum();
        }
    }
    StAfSlice {
        center_n,
        w_len,
        signal_len: x.len(),
        data,
    }
}

/// Analysis window of the sliding Fourier transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Taper {
    Rectangular,
    #[default]
    Hann,
}

impl Taper {
    /// Window values at offsets `−h..h`.
    pub fn values(self, w_len: usize) -> Vec<f64> {
        match self {
            Taper::Rectangular => vec![1.0; w_len],
            // periodic form over w_len+1 points so both ends stay nonzero
            Taper::Hann => (0..w_len)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * (i + 1) as f64 / (w_len + 1) as f64).cos())
                .collect(),
        }
    }
}

/// Rectangular-window spectrogram; see [`spectrogram_with`].
pub fn spectrogram(x: &[Complex64], w_len: usize, grid: &FreqGrid) -> JointRep {
    spectrogram_with(x, w_len, Taper::Rectangular, grid)
}

/// Squared magnitude of the sliding Fourier transform, folded onto the
/// integer-lag frequency grid so that a tone at `ν` peaks on the same bin as
/// in the WVD. Real values are stored in `data.re`.
pub fn spectrogram_with(x: &[Complex64], w_len: usize, taper: Taper, grid: &FreqGrid) -> JointRep {
    assert!(w_len % 2 == 1, "window length must be odd");
    let n = x.len();
    let l = grid.bins;
    let h = ((w_len - 1) / 2) as i64;
    let ms: Vec<i64> = (-h..=h).collect();
    let js: Vec<i64> = (0..2 * l as i64).collect();
    let win = taper.values(w_len);
    // STFT evaluated at ν_j = j/(2L); bins j and j+L share the convention bin.
    let tw = twiddles(&js, &ms, 2 * l, -1.0);
    let cols: Vec<Vec<Complex64>> = (0..n)
        .map(|t| {
            let seg: Vec<Complex64> = ms
                .iter()
                .zip(&win)
                .map(|(&m, &g)| sample(x, t as i64 + m) * g)
                .collect();
            let power: Vec<f64> = (0..2 * l)
                .map(|j| {
                    let row = &tw[j * w_len..(j + 1) * w_len];
                    row.iter().zip(&seg).map(|(a, b)| a * b).sum::<Complex64>().norm_sqr()
                })
                .collect();
            (0..l).map(|k| Complex64::new(power[k] + power[k + l], 0.0)).collect()
        })
        .collect();
    JointRep::new(Grid::from_columns(l, &cols), Axis::frequency(grid), Axis::time(n))
}

/// Decomposition of the AF of a masked signal into the full-data AF and the
/// artifacts caused by the lost samples. Signs are folded into each term so
/// the five terms sum to the masked-signal AF.
#[derive(Debug, Clone)]
pub struct MissingAfTerms {
    /// AF of the complete signal.
    pub full: JointRep,
    /// `−Σ_m s[m]·s*[m−2τ]·e^{j2πκ(m−τ)/N}`: lost sample on the leading factor.
    pub leading: JointRep,
    /// `−Σ_m s[m+2τ]·s*[m]·e^{j2πκ(m+τ)/N}`: lost sample on the lagging factor.
    pub lagging: JointRep,
    /// `Σ_m |s[m]|²·e^{j2πκm/N}` on the τ = 0 row only.
    pub zero_lag: JointRep,
    /// Products where both factors are distinct lost samples (τ ≠ 0).
    pub pairs: JointRep,
}

impl MissingAfTerms {
    pub fn artifacts(&self) -> [&JointRep; 4] {
        [&self.leading, &self.lagging, &self.zero_lag, &self.pairs]
    }

    pub fn sum(&self) -> CGrid {
        let mut out = self.full.data.clone();
        for t in self.artifacts() {
            for (o, v) in out.as_mut_slice().iter_mut().zip(t.data.as_slice()) {
                *o += v;
            }
        }
        out
    }
}

/// Closed-form missing-sample AF decomposition, evaluated from the lost
/// indices directly rather than through the masked IAF.
pub fn missing_af_terms(s_full: &ObservedSignal, mask: &[usize]) -> MissingAfTerms {
    let s = &s_full.samples;
    let n = s.len();
    let half = lag_half(n) as i64;
    let lags: Vec<i64> = (-half..=half).collect();
    let full = af_from_iaf(&iaf_of(s));
    let rows = lags.len();

    let mut missing: Vec<usize> = mask.to_vec();
    missing.sort_unstable();
    missing.dedup();
    let lost = {
        let mut m = vec![false; n];
        for &i in &missing {
            m[i] = true;
        }
        m
    };
    let phase = |kappa: usize, t: i64| -> Complex64 {
        let p = (kappa as i64 * t).rem_euclid(n as i64) as f64 / n as f64;
        Complex64::from_polar(1.0, 2.0 * PI * p)
    };
    let in_range = |t: i64| t >= 0 && (t as usize) < n;

    let mut leading = CGrid::zeros(rows, n);
    let mut lagging = CGrid::zeros(rows, n);
    let mut zero_lag = CGrid::zeros(rows, n);
    let mut pairs = CGrid::zeros(rows, n);
    for (r, &tau) in lags.iter().enumerate() {
        for kappa in 0..n {
            let mut a = ZERO;
            let mut b = ZERO;
            for &m in &missing {
                let m = m as i64;
                // leading factor x[n+τ] lost: n = m − τ
                if in_range(m - tau) {
                    a -= sample(s, m) * sample(s, m - 2 * tau).conj() * phase(kappa, m - tau);
                }
                // lagging factor x[n−τ] lost: n = m + τ
                if in_range(m + tau) {
                    b -= sample(s, m + 2 * tau) * sample(s, m).conj() * phase(kappa, m + tau);
                }
            }
            leading[(r, kappa)] = a;
            lagging[(r, kappa)] = b;

            if tau == 0 {
                zero_lag[(r, kappa)] = missing.iter().map(|&m| s[m].norm_sqr() * phase(kappa, m as i64)).sum();
            } else {
                // both n+τ and n−τ lost; they are distinct since τ ≠ 0
                let mut p = ZERO;
                for &m in &missing {
                    let t = m as i64 - tau;
                    let other = t - tau;
                    if in_range(t) && in_range(other) && lost[other as usize] {
                        p += sample(s, m as i64) * sample(s, other).conj() * phase(kappa, t);
                    }
                }
                pairs[(r, kappa)] = p;
            }
        }
    }
    let mk = |data| JointRep::new(data, full.row_axis.clone(), full.col_axis.clone());
    MissingAfTerms {
        leading: mk(leading),
        lagging: mk(lagging),
        zero_lag: mk(zero_lag),
        pairs: mk(pairs),
        full,
    }
}
