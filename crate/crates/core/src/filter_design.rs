//! Latent analog filters and least-squares kernel design.
//!
//! Every convolution kernel of the sampling-frequency-independent layers is
//! derived from a continuous frequency response `G(ω)`. For a concrete
//! sampling frequency `fs` the response is sampled on `I` points of
//! `[0, π·fs]` and a length-`K` real FIR is fitted to it in the
//! least-squares sense:
//!
//! ```text
//! b = argmin ‖G − D b‖²,   D[i, k] = exp(j·ω_i·(k − K/2)/fs),  k = 1..K
//! ```
//!
//! The complex problem is solved over reals by stacking real and imaginary
//! parts and applying a truncated-SVD pseudo-inverse. The pseudo-inverse only
//! depends on `(fs, K, I)`, so [`KernelSolver`] keeps it around and maps any
//! number of target responses (and their gradients) through it.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Singular values below this fraction of the largest one are discarded.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

/// Modulated Gaussian latent filter.
///
/// `G(ω) = exp(−(ω−μ)²/(2σ²) + jφ) + exp(−(ω+μ)²/(2σ²) − jφ)`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgfParams {
    /// Center angular frequency, rad/s.
    pub mu: f64,
    /// Gaussian width, rad/s.
    pub sigma: f64,
    /// Initial phase, rad.
    pub phi: f64,
}

impl MgfParams {
    pub fn new(mu: f64, sigma: f64, phi: f64) -> Result<Self> {
        let p = Self { mu, sigma, phi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return invalid(format!("MGF sigma must be positive and finite, got {}", self.sigma));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return invalid(format!("MGF mu must be non-negative and finite, got {}", self.mu));
        }
        if !self.phi.is_finite() {
            return invalid(format!("MGF phi must be finite, got {}", self.phi));
        }
        Ok(())
    }

    /// Continuous frequency response at angular frequency `omega` (rad/s).
    pub fn response(&self, omega: f64) -> Complex64 {
        let (pos, neg) = self.lobes(omega);
        pos + neg
    }

    /// Partial derivatives of the response with respect to `(mu, sigma, phi)`.
    pub fn response_gradient(&self, omega: f64) -> [Complex64; 3] {
        let (pos, neg) = self.lobes(omega);
        let s2 = self.sigma * self.sigma;
        let s3 = s2 * self.sigma;
        let dp = omega - self.mu;
        let dn = omega + self.mu;
        let d_mu = pos * (dp / s2) - neg * (dn / s2);
        let d_sigma = pos * (dp * dp / s3) + neg * (dn * dn / s3);
        let j = Complex64::i();
        let d_phi = j * pos - j * neg;
        [d_mu, d_sigma, d_phi]
    }

    fn lobes(&self, omega: f64) -> (Complex64, Complex64) {
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let dp = omega - self.mu;
        let dn = omega + self.mu;
        let pos = Complex64::from_polar((-dp * dp / two_s2).exp(), self.phi);
        let neg = Complex64::from_polar((-dn * dn / two_s2).exp(), -self.phi);
        (pos, neg)
    }
}

/// One latent analog filter per (input, output) channel pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogFilterBank {
    params: Vec<MgfParams>,
}

impl AnalogFilterBank {
    pub fn new(params: Vec<MgfParams>) -> Result<Self> {
        if params.is_empty() {
            return invalid("filter bank needs at least one channel pair");
        }
        for p in &params {
            p.validate()?;
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[MgfParams] {
        &self.params
    }

    pub fn channel_pairs(&self) -> usize {
        self.params.len()
    }
}

/// Angular frequencies `ω_i = π·fs·i/(I−1)`, `i = 0..I−1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    fs: f64,
    omegas: Vec<f64>,
}

impl FrequencyGrid {
    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn count(&self) -> usize {
        self.omegas.len()
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }
}

pub fn sample_frequency_grid(fs: f64, count: usize) -> Result<FrequencyGrid> {
    if !(fs.is_finite() && fs > 0.0) {
        return invalid(format!("sampling frequency must be positive, got {fs}"));
    }
    if count < 2 {
        return invalid(format!("frequency grid needs at least 2 points, got {count}"));
    }
    let last = (count - 1) as f64;
    let mut omegas: Vec<f64> = (0..count).map(|i| PI * fs * i as f64 / last).collect();
    // pin the upper edge exactly
    omegas[count - 1] = PI * fs;
    Ok(FrequencyGrid { fs, omegas })
}

/// Complex `I×K` matrix of `exp(j·ω_i·(k − K/2)/fs)`, stored row-major.
///
/// Column `k'` (0-based) uses tap index `k = k' + 1`.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    fs: f64,
    kernel_size: usize,
    rows: usize,
    entries: Vec<Complex64>,
}

impl DesignMatrix {
    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn entry(&self, i: usize, k: usize) -> Complex64 {
        self.entries[i * self.kernel_size + k]
    }

    /// `D b` for real coefficients `b`.
    pub fn apply(&self, b: &[f64]) -> Vec<Complex64> {
        assert_eq!(b.len(), self.kernel_size);
        self.entries
            .chunks_exact(self.kernel_size)
            .map(|row| row.iter().zip(b).map(|(d, &bk)| d * bk).sum())
            .collect()
    }

    /// Real `2I×K` matrix `[Re D; Im D]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (i_n, k_n) = (self.rows, self.kernel_size);
        DMatrix::from_fn(2 * i_n, k_n, |r, c| {
            if r < i_n {
                self.entry(r, c).re
            } else {
                self.entry(r - i_n, c).im
            }
        })
    }
}

/// Time offset in samples of 0-based tap `k` for a kernel of size `kernel_size`.
#[inline]
pub fn tap_offset(k: usize, kernel_size: usize) -> f64 {
    (k + 1) as f64 - kernel_size as f64 / 2.0
}

pub fn build_design_matrix(grid: &FrequencyGrid, kernel_size: usize) -> Result<DesignMatrix> {
    if kernel_size == 0 {
        return invalid("kernel size must be at least 1");
    }
    let mut entries = Vec::with_capacity(grid.count() * kernel_size);
    for &omega in grid.omegas() {
        for k in 0..kernel_size {
            let theta = omega * tap_offset(k, kernel_size) / grid.fs();
            entries.push(Complex64::from_polar(1.0, theta));
        }
    }
    Ok(DesignMatrix {
        fs: grid.fs(),
        kernel_size,
        rows: grid.count(),
        entries,
    })
}

/// Precomputed pseudo-inverse of the stacked design matrix for one `(fs, K, I)`.
#[derive(Clone, Debug)]
pub struct KernelSolver {
    grid: FrequencyGrid,
    kernel_size: usize,
    /// `K × 2I`, row-major.
    pinv: Vec<f64>,
    rank: usize,
}

impl KernelSolver {
    pub fn new(fs: f64, kernel_size: usize, grid_size: usize) -> Result<Self> {
        let grid = sample_frequency_grid(fs, grid_size)?;
        let d = build_design_matrix(&grid, kernel_size)?;
        Ok(Self::from_design(grid, &d))
    }

    fn from_design(grid: FrequencyGrid, d: &DesignMatrix) -> Self {
        let (pinv, rank) = flat_pseudo_inverse(d);
        Self {
            grid,
            kernel_size: d.kernel_size(),
            pinv,
            rank,
        }
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    /// Numerical rank of the stacked design matrix.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Least-squares coefficients `b` (not time-reversed) for a target response.
    pub fn solve(&self, target: &[Complex64]) -> Result<Vec<f64>> {
        check_target(target, self.grid.count())?;
        Ok(apply_pinv(&self.pinv, target))
    }

    /// Vector-Jacobian product: maps `∂L/∂b` to `∂L/∂Re G` and `∂L/∂Im G`.
    pub fn backpropagate(&self, grad_b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let i_n = self.grid.count();
        let mut g_re = vec![0.0; i_n];
        let mut g_im = vec![0.0; i_n];
        for (row, &gb) in self.pinv.chunks_exact(2 * i_n).zip(grad_b) {
            let (re_part, im_part) = row.split_at(i_n);
            for i in 0..i_n {
                g_re[i] += re_part[i] * gb;
                g_im[i] += im_part[i] * gb;
            }
        }
        (g_re, g_im)
    }
}

/// Row-major `K × 2I` pseudo-inverse of `[Re D; Im D]` and its numerical rank.
fn flat_pseudo_inverse(d: &DesignMatrix) -> (Vec<f64>, usize) {
    let (pinv, rank) = pseudo_inverse(d.stacked());
    let mut flat = Vec::with_capacity(pinv.nrows() * pinv.ncols());
    for r in 0..pinv.nrows() {
        flat.extend(pinv.row(r).iter());
    }
    (flat, rank)
}

fn apply_pinv(pinv: &[f64], target: &[Complex64]) -> Vec<f64> {
    let i_n = target.len();
    pinv.chunks_exact(2 * i_n)
        .map(|row| {
            let (re_part, im_part) = row.split_at(i_n);
            target
                .iter()
                .zip(re_part.iter().zip(im_part))
                .map(|(g, (pr, pi))| pr * g.re + pi * g.im)
                .sum()
        })
        .collect()
}

fn pseudo_inverse(a: DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (rows, cols) = a.shape();
    let svd = a.svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let s = svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = PINV_RELATIVE_CUTOFF * s_max;
    let mut pinv = DMatrix::<f64>::zeros(cols, rows);
    let mut rank = 0;
    for (idx, &sv) in s.iter().enumerate() {
        if sv <= cutoff || sv == 0.0 {
            continue;
        }
        rank += 1;
        let inv = 1.0 / sv;
        let v_col = v_t.row(idx).transpose();
        let u_col = u.column(idx);
        pinv += (v_col * inv) * u_col.transpose();
    }
    (pinv, rank)
}

/// Least-squares design coefficients for `target` under design matrix `d`.
pub fn solve_kernel(target: &[Complex64], d: &DesignMatrix) -> Result<Vec<f64>> {
    check_target(target, d.rows())?;
    let (pinv, _) = flat_pseudo_inverse(d);
    Ok(apply_pinv(&pinv, target))
}

fn check_target(target: &[Complex64], rows: usize) -> Result<()> {
    if target.len() != rows {
        return invalid(format!(
            "target has {} samples but the design has {} frequencies",
            target.len(),
            rows
        ));
    }
    if target.iter().any(|g| !(g.re.is_finite() && g.im.is_finite())) {
        return invalid("target response contains non-finite values");
    }
    Ok(())
}

/// Convolution-ready kernel: the least-squares coefficients reversed in time.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn from_design_coefficients(b: &[f64]) -> Self {
        Self {
            taps: b.iter().rev().copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn design_coefficients(&self) -> Vec<f64> {
        self.taps.iter().rev().copied().collect()
    }

    /// Frequency response `Σ b_k exp(j·ω·(k − K/2)/fs)` using the design convention.
    pub fn response(&self, omega: f64, fs: f64) -> Complex64 {
        let k_n = self.taps.len();
        self.taps
            .iter()
            .rev()
            .enumerate()
            .map(|(k, &b)| Complex64::from_polar(b, omega * tap_offset(k, k_n) / fs))
            .sum()
    }
}

/// Kernels for every channel pair of a bank at one sampling frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet {
    pub fs: u32,
    pub kernel_size: usize,
    pub grid_size: usize,
    pub kernels: Vec<Kernel>,
}

/// Samples every latent filter on the grid, solves for its kernel and reverses it.
pub fn generate_filterbank_weights(
    bank: &AnalogFilterBank,
    fs: u32,
    kernel_size: usize,
    grid_size: usize,
) -> Result<KernelSet> {
    let solver = KernelSolver::new(fs as f64, kernel_size, grid_size)?;
    generate_with_solver(bank, fs, &solver)
}

pub fn generate_with_solver(
    bank: &AnalogFilterBank,
    fs: u32,
    solver: &KernelSolver,
) -> Result<KernelSet> {
    let omegas = solver.grid().omegas();
    let kernels = bank
        .params()
        .iter()
        .map(|p| {
            let target: Vec<Complex64> = omegas.iter().map(|&w| p.response(w)).collect();
            solver
                .solve(&target)
                .map(|b| Kernel::from_design_coefficients(&b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelSet {
        fs,
        kernel_size: solver.kernel_size(),
        grid_size: solver.grid().count(),
        kernels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDumpMeta {
    pub fs: u32,
    #[serde(rename = "K")]
    pub kernel_size: usize,
    #[serde(rename = "S")]
    pub stride: usize,
    #[serde(rename = "I")]
    pub grid_size: usize,
    pub generated_at: String,
}

/// Sidecar path next to a kernel CSV (`kernels.csv` → `kernels.json`).
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `channel,tap_index,value` rows plus the JSON sidecar.
pub fn write_kernel_dump(csv_path: &Path, set: &KernelSet, stride: usize) -> Result<KernelDumpMeta> {
    let mut out = BufWriter::new(File::create(csv_path)?);
    writeln!(out, "channel,tap_index,value")?;
    for (c, kernel) in set.kernels.iter().enumerate() {
        for (k, v) in kernel.taps.iter().enumerate() {
            writeln!(out, "{c},{k},{v:.8e}")?;
        }
    }
    out.flush()?;
    let meta = KernelDumpMeta {
        fs: set.fs,
        kernel_size: set.kernel_size,
        stride,
        grid_size: set.grid_size,
        generated_at: chrono::Utc::now().to_rfc3339(),
    };
    std::fs::write(sidecar_path(csv_path), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_kernel_dump(csv_path: &Path) -> Result<(KernelSet, KernelDumpMeta)> {
    let meta: KernelDumpMeta =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(csv_path))?)?;
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut kernels: Vec<Kernel> = Vec::new();
    for record in reader.deserialize::<(usize, usize, f64)>() {
        let (c, k, v) = record?;
        if c == kernels.len() {
            kernels.push(Kernel {
                taps: vec![0.0; meta.kernel_size],
            });
        }
        let slot = kernels
            .get_mut(c)
            .and_then(|kern| kern.taps.get_mut(k))
            .ok_or_else(|| Error::InvalidArgument(format!("kernel dump row out of order: {c},{k}")))?;
        *slot = v;
    }
    Ok((
        KernelSet {
            fs: meta.fs,
            kernel_size: meta.kernel_size,
            grid_size: meta.grid_size,
            kernels,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn mgf_dc_is_real_and_symmetric() {
        let p = MgfParams::new(100.0 * PI, 50.0 * PI, 0.0).unwrap();
        let g = p.response(0.0);
        assert!((g.re - 2.0 * (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(g.im, 0.0);
    }

    #[test]
    fn mgf_is_hermitian() {
        let p = MgfParams::new(321.0, 45.0, 0.7).unwrap();
        for &w in &[1.0, 100.0, 333.3, 1000.0] {
            assert!(close(p.response(-w), p.response(w).conj(), 1e-15));
        }
    }

    #[test]
    fn mgf_at_center() {
        // (ω+μ)²/(2σ²) = (200π)²/(2·(50π)²) = 8, so G = e^{jπ/4} + e^{−8−jπ/4}
        let p = MgfParams::new(100.0 * PI, 50.0 * PI, PI / 4.0).unwrap();
        let g = p.response(100.0 * PI);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let e2 = (-8.0f64).exp();
        let expected = Complex64::new(h + e2 * h, h - e2 * h);
        assert!(close(g, expected, 1e-14));
    }

    #[test]
    fn mgf_gradient_matches_finite_differences() {
        let p = MgfParams::new(900.0, 120.0, -0.4).unwrap();
        let h = 1e-6;
        for &w in &[0.0, 700.0, 950.0, 1300.0] {
            let g = p.response_gradient(w);
            let fd = [
                (MgfParams { mu: p.mu + h, ..p }.response(w) - MgfParams { mu: p.mu - h, ..p }.response(w)) / (2.0 * h),
                (MgfParams { sigma: p.sigma + h, ..p }.response(w) - MgfParams { sigma: p.sigma - h, ..p }.response(w)) / (2.0 * h),
                (MgfParams { phi: p.phi + h, ..p }.response(w) - MgfParams { phi: p.phi - h, ..p }.response(w)) / (2.0 * h),
            ];
            for (a, b) in g.iter().zip(&fd) {
                assert!(close(*a, *b, 1e-6), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn invalid_mgf_rejected() {
        assert!(MgfParams::new(1.0, 0.0, 0.0).is_err());
        assert!(MgfParams::new(-1.0, 1.0, 0.0).is_err());
        assert!(MgfParams::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = sample_frequency_grid(2.0, 3).unwrap();
        assert_eq!(g.omegas(), &[0.0, PI, 2.0 * PI]);
        let g = sample_frequency_grid(8000.0, 5).unwrap();
        for (w, e) in g.omegas().iter().zip([0.0, 2000.0, 4000.0, 6000.0, 8000.0]) {
            assert!((w - e * PI).abs() < 1e-9);
        }
        let g = sample_frequency_grid(48000.0, 960).unwrap();
        assert_eq!(g.count(), 960);
        assert_eq!(*g.omegas().last().unwrap(), PI * 48000.0);
        assert!(sample_frequency_grid(8000.0, 1).is_err());
    }

    #[test]
    fn design_matrix_entries() {
        let grid = sample_frequency_grid(8000.0, 7).unwrap();
        let d = build_design_matrix(&grid, 2).unwrap();
        for k in 0..2 {
            assert_eq!(d.entry(0, k), Complex64::new(1.0, 0.0));
        }
        // ω = π·fs: k=1 → e^{0} = 1, k=2 → e^{jπ} = −1
        assert!(close(d.entry(6, 0), Complex64::new(1.0, 0.0), 1e-12));
        assert!(close(d.entry(6, 1), Complex64::new(-1.0, 0.0), 1e-12));
        let d = build_design_matrix(&sample_frequency_grid(44100.0, 50).unwrap(), 13).unwrap();
        for i in 0..50 {
            for k in 0..13 {
                assert!((d.entry(i, k).norm() - 1.0).abs() < 1e-12);
            }
        }
        assert!(build_design_matrix(&grid, 0).is_err());
    }

    #[test]
    fn zero_target_gives_zero_kernel() {
        let d = build_design_matrix(&sample_frequency_grid(8000.0, 32).unwrap(), 8).unwrap();
        let b = solve_kernel(&vec![Complex64::new(0.0, 0.0); 32], &d).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn column_target_recovers_impulse() {
        let d = build_design_matrix(&sample_frequency_grid(16000.0, 64).unwrap(), 12).unwrap();
        for k0 in 0..12 {
            let target: Vec<Complex64> = (0..64).map(|i| d.entry(i, k0)).collect();
            let b = solve_kernel(&target, &d).unwrap();
            for (k, v) in b.iter().enumerate() {
                let want = if k == k0 { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-8);
            }
            let resid: f64 = d.apply(&b).iter().zip(&target).map(|(a, g)| (a - g).norm_sqr()).sum();
            assert!(resid.sqrt() <= 1e-8);
        }
    }

    #[test]
    fn non_finite_target_rejected() {
        let d = build_design_matrix(&sample_frequency_grid(8000.0, 8).unwrap(), 4).unwrap();
        let mut t = vec![Complex64::new(1.0, 0.0); 8];
        t[3].im = f64::INFINITY;
        assert!(solve_kernel(&t, &d).is_err());
        assert!(solve_kernel(&t[..5], &d).is_err());
    }

    #[test]
    fn residual_is_orthogonal_and_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = build_design_matrix(&sample_frequency_grid(12000.0, 40).unwrap(), 10).unwrap();
        let target: Vec<Complex64> = (0..40)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let b = solve_kernel(&target, &d).unwrap();
        let cost = |b: &[f64]| -> f64 {
            d.apply(b).iter().zip(&target).map(|(a, g)| (g - a).norm_sqr()).sum()
        };
        let base = cost(&b);
        let norm_g: f64 = target.iter().map(|g| g.norm_sqr()).sum::<f64>().sqrt();
        let resid: Vec<Complex64> = d.apply(&b).iter().zip(&target).map(|(a, g)| g - a).collect();
        for k in 0..10 {
            // ⟨Re r, Re D_k⟩ + ⟨Im r, Im D_k⟩
            let dot: f64 = (0..40)
                .map(|i| resid[i].re * d.entry(i, k).re + resid[i].im * d.entry(i, k).im)
                .sum();
            assert!(dot.abs() <= 1e-6 * norm_g);
            for delta in [1e-3, -1e-3] {
                let mut p = b.clone();
                p[k] += delta;
                assert!(cost(&p) >= base);
            }
        }
    }

    #[test]
    fn weights_are_deterministic_and_sized() {
        let bank = AnalogFilterBank::new(vec![MgfParams::new(3000.0, 50.0 * PI, 0.3).unwrap()]).unwrap();
        let a = generate_filterbank_weights(&bank, 8000, 40, 160).unwrap();
        let b = generate_filterbank_weights(&bank, 8000, 40, 160).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kernels.len(), 1);
        assert_eq!(a.kernels[0].len(), 40);
        // real taps ⇒ response at DC is real
        assert_eq!(a.kernels[0].response(0.0, 8000.0).im.abs() < 1e-15, true);
    }

    #[test]
    fn response_peak_tracks_center_frequency() {
        let fs = 16000.0;
        let bank = AnalogFilterBank::new(vec![MgfParams::new(PI * fs / 2.0, 400.0 * PI, 0.0).unwrap()]).unwrap();
        let set = generate_filterbank_weights(&bank, fs as u32, 64, 256).unwrap();
        let grid = sample_frequency_grid(fs, 256).unwrap();
        let (peak, _) = grid
            .omegas()
            .iter()
            .enumerate()
            .map(|(i, &w)| (i, set.kernels[0].response(w, fs).norm()))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let bin_hz = fs / 2.0 / 255.0;
        let peak_hz = peak as f64 * bin_hz;
        assert!((peak_hz - fs / 4.0).abs() <= 2.0 * bin_hz, "peak at {peak_hz} Hz");
    }

    #[test]
    fn backpropagate_is_transpose_of_solve() {
        let solver = KernelSolver::new(8000.0, 6, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target: Vec<Complex64> = (0..20)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let gb: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = solver.solve(&target).unwrap();
        let (gr, gi) = solver.backpropagate(&gb);
        let lhs: f64 = b.iter().zip(&gb).map(|(x, y)| x * y).sum();
        let rhs: f64 = target.iter().enumerate().map(|(i, t)| t.re * gr[i] + t.im * gi[i]).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn kernel_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = AnalogFilterBank::new(vec![
            MgfParams::new(3000.0, 157.0, 0.3).unwrap(),
            MgfParams::new(9000.0, 157.0, -1.0).unwrap(),
        ])
        .unwrap();
        let set = generate_filterbank_weights(&bank, 8000, 40, 160).unwrap();
        let path = dir.path().join("kernels.csv");
        let meta = write_kernel_dump(&path, &set, 20).unwrap();
        assert_eq!(meta.kernel_size, 40);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("channel,tap_index,value\n"));
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        for key in ["fs", "K", "S", "I", "generated_at"] {
            assert!(sidecar.get(key).is_some(), "missing {key}");
        }
        let (back, _) = read_kernel_dump(&path).unwrap();
        for (a, b) in back.kernels.iter().zip(&set.kernels) {
            for (x, y) in a.taps.iter().zip(&b.taps) {
                assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-12));
            }
        }
    }
}
