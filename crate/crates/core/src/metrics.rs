//! Image quality metrics and basis-material decomposition.

use faer::linalg::solvers::SolveLstsq;
use faer::{Col, Mat};
use rayon::prelude::*;

use crate::error::{NlctfError, Result};
use crate::tensor::Tensor3;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

/// Largest basis accepted by [`decompose`]; the active-set enumeration is
/// exponential in the material count.
pub const MAX_BASIS_MATERIALS: usize = 12;

/// Condition number above which a basis is reported as ill-conditioned.
pub const CONDITION_WARNING: f64 = 1e8;

fn same_dims(x: &Tensor3, reference: &Tensor3) -> Result<()> {
    if x.dims() != reference.dims() {
        return Err(NlctfError::Dimension(format!(
            "volume {:?} vs reference {:?}",
            x.dims(),
            reference.dims()
        )));
    }
    Ok(())
}

/// Per-channel root mean square error.
pub fn rmse(x: &Tensor3, reference: &Tensor3) -> Result<Vec<f64>> {
    same_dims(x, reference)?;
    let s = x.dims()[2];
    Ok((0..s)
        .map(|c| {
            let a = x.slice3(c);
            let b = reference.slice3(c);
            let sse: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
            (sse / a.len() as f64).sqrt()
        })
        .collect())
}

/// Per-channel PSNR in dB with the reference channel maximum as peak.
/// Identical channels give `f64::INFINITY`.
pub fn psnr(x: &Tensor3, reference: &Tensor3) -> Result<Vec<f64>> {
    let errors = rmse(x, reference)?;
    errors
        .iter()
        .enumerate()
        .map(|(c, &e)| {
            let peak = reference.slice3(c).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if reference.slice3(c).iter().all(|&v| v == 0.0) {
                return Err(NlctfError::Config(format!("psnr: reference channel {c} is all zero")));
            }
            if e == 0.0 {
                Ok(f64::INFINITY)
            } else {
                Ok(20.0 * (peak.abs() / e).log10())
            }
        })
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.iter().map(|v| v / total).collect()
}

/// Separable Gaussian filter, valid region only. Input column-major
/// `(rows, cols)`; output `(rows - 10, cols - 10)`.
fn filter_valid(img: &[f64], rows: usize, cols: usize, g: &[f64]) -> Vec<f64> {
    let w = g.len();
    let (orows, ocols) = (rows + 1 - w, cols + 1 - w);
    // along rows first
    let mut tmp = vec![0.0; orows * cols];
    for c in 0..cols {
        let col = &img[c * rows..(c + 1) * rows];
        for r in 0..orows {
            tmp[c * orows + r] = g.iter().zip(&col[r..r + w]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; orows * ocols];
    for c in 0..ocols {
        for r in 0..orows {
            out[c * orows + r] = (0..w).map(|k| g[k] * tmp[(c + k) * orows + r]).sum();
        }
    }
    out
}

fn ssim_channel(x: &[f64], reference: &[f64], rows: usize, cols: usize) -> f64 {
    let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gain = if hi > lo { SSIM_L / (hi - lo) } else { 1.0 };
    let a: Vec<f64> = reference.iter().map(|v| (v - lo) * gain).collect();
    let b: Vec<f64> = x.iter().map(|v| (v - lo) * gain).collect();
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(&a, rows, cols, &g);
    let mu_b = filter_valid(&b, rows, cols, &g);
    let aa = filter_valid(&prod(&a, &a), rows, cols, &g);
    let bb = filter_valid(&prod(&b, &b), rows, cols, &g);
    let ab = filter_valid(&prod(&a, &b), rows, cols, &g);
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Per-channel SSIM. Both images are mapped with the affine transform that
/// takes the reference channel onto `[0, 255]`.
pub fn ssim(x: &Tensor3, reference: &Tensor3) -> Result<Vec<f64>> {
    same_dims(x, reference)?;
    let [rows, cols, s] = x.dims();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(NlctfError::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {rows}x{cols}"
        )));
    }
    Ok((0..s)
        .into_par_iter()
        .map(|c| ssim_channel(x.slice3(c), reference.slice3(c), rows, cols))
        .collect())
}

/// Per-channel scores plus optional decomposition residual.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rmse: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// Mean per-pixel decomposition residual, when a basis was applied.
    pub decomposition_residual: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricReport {
    pub fn evaluate(x: &Tensor3, reference: &Tensor3) -> Result<Self> {
        Ok(Self {
            rmse: rmse(x, reference)?,
            psnr: psnr(x, reference)?,
            ssim: ssim(x, reference)?,
            decomposition_residual: None,
        })
    }

    pub fn mean_rmse(&self) -> f64 {
        mean(&self.rmse)
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    /// `key=value` lines, one block per channel followed by the means.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for c in 0..self.rmse.len() {
            out += &format!("channel.{c}.rmse={}\n", self.rmse[c]);
            out += &format!("channel.{c}.psnr={}\n", self.psnr[c]);
            out += &format!("channel.{c}.ssim={}\n", self.ssim[c]);
        }
        out += &format!("mean.rmse={}\n", self.mean_rmse());
        out += &format!("mean.psnr={}\n", self.mean_psnr());
        out += &format!("mean.ssim={}\n", self.mean_ssim());
        if let Some(r) = self.decomposition_residual {
            out += &format!("decomposition.residual={r}\n");
        }
        out
    }

    /// Comma-separated table with header `channel,rmse,psnr,ssim`. The
    /// decomposition residual, if any, is a trailing `residual` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,rmse,psnr,ssim\n");
        for c in 0..self.rmse.len() {
            out += &format!("{c},{},{},{}\n", self.rmse[c], self.psnr[c], self.ssim[c]);
        }
        if let Some(r) = self.decomposition_residual {
            out += &format!("residual,{r},,\n");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| NlctfError::Format {
            path: "<report>".into(),
            reason: m,
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("channel,rmse,psnr,ssim") {
            return Err(bad("missing header".into()));
        }
        let mut report = Self {
            rmse: vec![],
            psnr: vec![],
            ssim: vec![],
            decomposition_residual: None,
        };
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("line {}: expected 4 fields", i + 2)));
            }
            if f[0] == "residual" {
                report.decomposition_residual = Some(num(f[1])?);
                continue;
            }
            if f[0].trim().parse::<usize>().ok() != Some(report.rmse.len()) {
                return Err(bad(format!("line {}: channel out of order", i + 2)));
            }
            report.rmse.push(num(f[1])?);
            report.psnr.push(num(f[2])?);
            report.ssim.push(num(f[3])?);
        }
        Ok(report)
    }
}

/// Basis materials with their per-bin attenuation signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub names: Vec<String>,
    /// `signatures[m][s]`, cm⁻¹.
    pub signatures: Vec<Vec<f64>>,
}

impl BasisSet {
    pub fn n_bins(&self) -> usize {
        self.signatures.first().map_or(0, Vec::len)
    }

    fn matrix(&self) -> Mat<f64> {
        Mat::from_fn(self.n_bins(), self.signatures.len(), |s, m| self.signatures[m][s])
    }

    /// Ratio of extreme singular values of the `S x M` signature matrix.
    pub fn condition_number(&self) -> f64 {
        let Ok(sv) = self.matrix().singular_values() else {
            return f64::INFINITY;
        };
        let hi = sv.iter().copied().fold(0.0, f64::max);
        let lo = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.signatures.len();
        if m == 0 || m != self.names.len() {
            return Err(NlctfError::Config(format!("basis: {} names for {m} signatures", self.names.len())));
        }
        if m > MAX_BASIS_MATERIALS {
            return Err(NlctfError::Config(format!("basis: at most {MAX_BASIS_MATERIALS} materials")));
        }
        let s = self.n_bins();
        if self.signatures.iter().any(|v| v.len() != s) {
            return Err(NlctfError::Config("basis: signatures differ in length".into()));
        }
        if s < m {
            return Err(NlctfError::Config(format!("basis: {m} materials need at least {m} bins, got {s}")));
        }
        Ok(())
    }
}

/// Fraction maps, dims `(rows, cols, M)`, and per-pixel residual norms.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub fractions: Tensor3,
    pub residual: Vec<f64>,
    pub condition_number: f64,
}

impl Decomposition {
    pub fn ill_conditioned(&self) -> bool {
        self.condition_number > CONDITION_WARNING
    }

    /// Index of the largest fraction per pixel, `None` where all are zero.
    pub fn argmax(&self) -> Vec<Option<usize>> {
        let [rows, cols, m] = self.fractions.dims();
        (0..rows * cols)
            .map(|p| {
                let mut best: Option<(usize, f64)> = None;
                for k in 0..m {
                    let v = self.fractions.data()[p + k * rows * cols];
                    if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                        best = Some((k, v));
                    }
                }
                best.map(|(k, _)| k)
            })
            .collect()
    }
}

/// Nonnegative least squares for one pixel, exact for small bases: every
/// active set is solved unconstrained and the best feasible one kept.
fn nnls_enumerate(a: &Mat<f64>, b: &Col<f64>) -> (Vec<f64>, f64) {
    let m = a.ncols();
    let mut best = (vec![0.0; m], b.norm_l2());
    for mask in 1u32..(1 << m) {
        let cols: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
        let sub = Mat::from_fn(a.nrows(), cols.len(), |r, j| a[(r, cols[j])]);
        let mut rhs = b.clone();
        sub.col_piv_qr().solve_lstsq_in_place(rhs.as_mat_mut());
        let sol: Vec<f64> = (0..cols.len()).map(|j| rhs[j]).collect();
        if sol.iter().any(|&v| !(v >= 0.0)) {
            continue;
        }
        let fit = Col::from_fn(a.nrows(), |r| (0..cols.len()).map(|j| sub[(r, j)] * sol[j]).sum::<f64>());
        let r = (b - &fit).norm_l2();
        if r < best.1 {
            let mut f = vec![0.0; m];
            for (&k, &v) in cols.iter().zip(sol.iter()) {
                f[k] = v;
            }
            best = (f, r);
        }
    }
    best
}

/// Per-pixel nonnegative fit of the spectral vector to the basis.
pub fn decompose(volume: &Tensor3, basis: &BasisSet) -> Result<Decomposition> {
    basis.validate()?;
    let [rows, cols, s] = volume.dims();
    if s != basis.n_bins() {
        return Err(NlctfError::Dimension(format!(
            "volume has {s} bins, basis has {}",
            basis.n_bins()
        )));
    }
    let a = basis.matrix();
    let plane = rows * cols;
    let m = basis.signatures.len();
    let fits: Vec<(Vec<f64>, f64)> = (0..plane)
        .into_par_iter()
        .map(|p| {
            let b = Col::from_fn(s, |c| volume.data()[p + c * plane]);
            nnls_enumerate(&a, &b)
        })
        .collect();
    let mut fractions = Tensor3::zeros([rows, cols, m]);
    let mut residual = vec![0.0; plane];
    for (p, (f, r)) in fits.into_iter().enumerate() {
        for (k, v) in f.into_iter().enumerate() {
            fractions.data_mut()[p + k * plane] = v;
        }
        residual[p] = r;
    }
    Ok(Decomposition {
        fractions,
        residual,
        condition_number: basis.condition_number(),
    })
}
