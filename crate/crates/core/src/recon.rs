//! SART baseline and the non-local tensor-factorization reconstruction loop.
//!
//! Volumes are `(n_h, n_w, S)` tensors in cm⁻¹; sinograms are the
//! dimensionless line integrals produced by [`AttenuationProjector`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NlctfError, Result};
use crate::geometry::{SartNormalizers, Sinogram};
use crate::kbr::{kbr_step, KbrParams, KbrState};
use crate::metrics;
use crate::patch::{self, MatchSet, PatchGridSpec, PatchPos};
use crate::sim::AttenuationProjector;
use crate::tensor::Tensor3;

/// How the data-fidelity step is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataStep {
    /// Row/column-sum normalized (SART) step.
    #[default]
    Sart,
    /// Plain gradient `x - β Hᵀ(Hx - y)`.
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub alpha: f64,
    pub tau: f64,
    pub theta: f64,
    /// Coupling weight of the cube term in the image update.
    pub mu: f64,
    /// Relaxation of the data step.
    pub beta: f64,
    /// Multiplier step.
    pub rho: f64,
    pub epsilon: f64,
    /// `delta = c_const / tau`.
    pub c_const: f64,
    pub patch: PatchGridSpec,
    pub outer_iters: usize,
    /// Split-Bregman passes per cube per outer iteration.
    pub inner_iters: usize,
    /// Re-run block matching every this many outer iterations.
    pub match_interval: usize,
    pub data_step: DataStep,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            tau: 0.05,
            theta: 250.0,
            mu: 0.5,
            beta: 0.03,
            rho: 1.0,
            epsilon: 1e-3,
            c_const: 1e-3,
            patch: PatchGridSpec::default(),
            outer_iters: 50,
            inner_iters: 1,
            match_interval: 1,
            data_step: DataStep::Sart,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn delta(&self) -> f64 {
        self.c_const / self.tau
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(NlctfError::Config(format!("recon.{k}: {m}")));
        if !(self.beta > 0.0 && self.beta < 2.0) {
            return bad("beta", format!("must lie in (0, 2), got {}", self.beta));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho", format!("must be positive, got {}", self.rho));
        }
        if !(self.tau > 0.0 && self.c_const > 0.0 && self.delta().is_finite()) {
            return bad("tau", "tau and c_const must be positive".into());
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu", format!("must be nonnegative, got {}", self.mu));
        }
        if self.inner_iters == 0 {
            return bad("inner_iters", "must be at least 1".into());
        }
        if self.match_interval == 0 {
            return bad("match_interval", "must be at least 1".into());
        }
        self.patch.validate().map_err(|e| e.context("recon.patch"))?;
        self.kbr_params().map(|_| ())
    }

    pub fn kbr_params(&self) -> Result<KbrParams> {
        KbrParams::new(self.alpha, self.delta(), self.theta, self.epsilon).map_err(|e| e.context("recon"))
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `‖y − Hx‖` over all channels, evaluated at the iterate entering this
    /// iteration.
    pub data_residual: f64,
    /// `Σ_l ‖T_l − E_l X‖_F` after the cube phase (0 when no cubes).
    pub multiplier_residual: f64,
    pub cubes: usize,
    pub rematched: bool,
    /// Per-channel errors against the reference, when one is supplied.
    pub rmse: Option<Vec<f64>>,
    pub psnr: Option<Vec<f64>>,
}

impl IterationRecord {
    pub fn mean_rmse(&self) -> Option<f64> {
        self.rmse.as_ref().map(|r| r.iter().sum::<f64>() / r.len() as f64)
    }
}

/// Header for [`trace_to_text`].
pub const TRACE_HEADER: &str = "iteration\tdata_residual\tmultiplier_residual\tcubes\trematched\tmean_rmse\tmean_psnr";

/// Tab-separated trace, one row per iteration.
pub fn trace_to_text(trace: &[IterationRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    let mean = |v: &Option<Vec<f64>>| match v {
        Some(v) => format!("{}", v.iter().sum::<f64>() / v.len() as f64),
        None => "nan".into(),
    };
    for r in trace {
        out += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.iteration,
            r.data_residual,
            r.multiplier_residual,
            r.cubes,
            u8::from(r.rematched),
            mean(&r.rmse),
            mean(&r.psnr)
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    pub volume: Tensor3,
    pub trace: Vec<IterationRecord>,
}

/// Shared inputs of both reconstructors.
pub struct Problem<'a> {
    pub sinos: &'a [Sinogram],
    pub projector: &'a AttenuationProjector,
    pub normalizers: &'a SartNormalizers,
    pub reference: Option<&'a Tensor3>,
}

impl<'a> Problem<'a> {
    pub fn check(&self) -> Result<[usize; 3]> {
        let g = &self.projector.geom;
        if self.sinos.is_empty() {
            return Err(NlctfError::Dimension("no sinogram channels".into()));
        }
        for (s, sino) in self.sinos.iter().enumerate() {
            if !sino.matches(g) {
                return Err(NlctfError::Dimension(format!(
                    "channel {s}: sinogram {}x{} does not match geometry {}x{}",
                    sino.n_views, sino.n_det, g.n_views, g.n_det
                )));
            }
        }
        if self.normalizers.col_sums.len() != g.n_pixels() || self.normalizers.row_sums.len() != g.n_rays() {
            return Err(NlctfError::Dimension("normalizers do not match geometry".into()));
        }
        let dims = [g.n_h, g.n_w, self.sinos.len()];
        if let Some(r) = self.reference {
            if r.dims() != dims {
                return Err(NlctfError::Dimension(format!("reference {:?} vs volume {dims:?}", r.dims())));
            }
        }
        Ok(dims)
    }

    fn errors(&self, x: &Tensor3) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        match self.reference {
            Some(r) => {
                let rmse = metrics::rmse(x, r)?;
                let psnr = metrics::psnr(x, r).ok();
                Ok((Some(rmse), psnr))
            }
            None => Ok((None, None)),
        }
    }
}

/// One data step for every channel, without the nonnegativity clamp.
/// Returns the updated volume and `‖y − Hx‖` of the input.
pub fn data_step(x: &Tensor3, problem: &Problem, beta: f64, mode: DataStep) -> Result<(Tensor3, f64)> {
    let s = x.dims()[2];
    let chans: Vec<&[f64]> = (0..s).map(|c| x.slice3(c)).collect();
    let hx = problem.projector.forward(&chans)?;
    let norms = problem.normalizers;
    let mut resid_sq = 0.0;
    let residuals: Vec<Sinogram> = hx
        .iter()
        .zip(problem.sinos)
        .map(|(h, y)| {
            let values: Vec<f64> = y.values.iter().zip(&h.values).map(|(a, b)| a - b).collect();
            resid_sq += values.iter().map(|v| v * v).sum::<f64>();
            let values = match mode {
                DataStep::Sart => values
                    .iter()
                    .zip(&norms.row_sums)
                    .map(|(r, &w)| if w > 0.0 { r / w } else { 0.0 })
                    .collect(),
                DataStep::Gradient => values,
            };
            Sinogram {
                n_views: y.n_views,
                n_det: y.n_det,
                values,
            }
        })
        .collect();
    let refs: Vec<&Sinogram> = residuals.iter().collect();
    let back = problem.projector.back(&refs)?;
    let mut out = x.clone();
    for (c, bp) in back.iter().enumerate() {
        let dst = out.slice3_mut(c);
        match mode {
            DataStep::Sart => {
                for ((v, b), &w) in dst.iter_mut().zip(bp).zip(&norms.col_sums) {
                    if w > 0.0 {
                        *v += beta * b / w;
                    }
                }
            }
            DataStep::Gradient => {
                for (v, b) in dst.iter_mut().zip(bp) {
                    *v += beta * b;
                }
            }
        }
    }
    Ok((out, resid_sq.sqrt()))
}

fn clamp_nonnegative(x: &mut Tensor3) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Channel-wise SART from a zero start.
pub fn sart_reconstruct(problem: &Problem, iters: usize, beta: f64) -> Result<ReconOutput> {
    sart_from(Tensor3::zeros(problem.check()?), problem, iters, beta)
}

/// SART started from `x0`.
pub fn sart_from(x0: Tensor3, problem: &Problem, iters: usize, beta: f64) -> Result<ReconOutput> {
    let dims = problem.check()?;
    if x0.dims() != dims {
        return Err(NlctfError::Dimension(format!("initial volume {:?} vs {dims:?}", x0.dims())));
    }
    if !(beta > 0.0 && beta < 2.0) {
        return Err(NlctfError::Config(format!("beta must lie in (0, 2), got {beta}")));
    }
    let mut x = x0;
    let mut trace = Vec::with_capacity(iters);
    for k in 0..iters {
        let (mut next, resid) = data_step(&x, problem, beta, DataStep::Sart)?;
        clamp_nonnegative(&mut next);
        x = next;
        let (rmse, psnr) = problem.errors(&x)?;
        trace.push(IterationRecord {
            iteration: k + 1,
            data_residual: resid,
            multiplier_residual: 0.0,
            cubes: 0,
            rematched: false,
            rmse,
            psnr,
        });
    }
    Ok(ReconOutput { volume: x, trace })
}

/// Persistent state of one non-local cube.
#[derive(Debug, Clone)]
pub struct CubeSlot {
    pub matches: MatchSet,
    pub kbr: KbrState,
    /// Current cube estimate, volume units.
    pub t: Tensor3,
    /// Error feedback, volume units.
    pub w: Tensor3,
    /// Normalization scale the KBR state is expressed in.
    pub scale: f64,
}

/// `E_l X`, in volume units. Not stored per slot: re-extracting is cheap and
/// bit-identical to the value the cube phase saw.
fn extract(x: &Tensor3, slot: &CubeSlot, spec: &PatchGridSpec) -> Result<Tensor3> {
    Ok(patch::extract_cube(x, &slot.matches, spec, 1.0)?.data)
}

/// `E_l X − T_l + W_l`, the quantity pulled back into the image.
fn feedback(x: &Tensor3, slot: &CubeSlot, spec: &PatchGridSpec) -> Result<Tensor3> {
    let mut d = extract(x, slot, spec)?.sub(&slot.t)?;
    d.axpy(1.0, &slot.w)?;
    Ok(d)
}

/// Count-averaged aggregate of the feedback cubes for the image `x` the
/// slots were last updated from.
pub fn regularization_term(slots: &[CubeSlot], x: &Tensor3, spec: &PatchGridSpec) -> Result<Tensor3> {
    let fb: Vec<Tensor3> = slots.par_iter().map(|s| feedback(x, s, spec)).collect::<Result<_>>()?;
    let pairs: Vec<(&Tensor3, &MatchSet)> = fb.iter().zip(slots.iter().map(|s| &s.matches)).collect();
    let [rows, cols, ch] = x.dims();
    Ok(patch::aggregate(&pairs, rows, cols, ch, spec)?.averaged())
}

/// `x⁺ = max(0, D(x) − μ · reg)` where `D` is the data step.
pub fn nlctf_image_update(
    x: &Tensor3,
    slots: &[CubeSlot],
    problem: &Problem,
    config: &ReconConfig,
) -> Result<(Tensor3, f64)> {
    let (mut next, resid) = data_step(x, problem, config.beta, config.data_step)?;
    if config.mu != 0.0 && !slots.is_empty() {
        let reg = regularization_term(slots, x, &config.patch)?;
        next.axpy(-config.mu, &reg)?;
    }
    clamp_nonnegative(&mut next);
    Ok((next, resid))
}

/// Advance the cube states after an image update.
///
/// Returns whether block matching ran. A slot whose membership changes is
/// rebuilt from the current cube with zero feedback.
pub fn cube_phase(
    x: &Tensor3,
    slots: &mut Vec<CubeSlot>,
    grid: &[PatchPos],
    rematch: bool,
    config: &ReconConfig,
    params: &KbrParams,
) -> Result<bool> {
    let (xn, scale) = patch::normalize(x);
    let rematch = rematch || slots.is_empty();
    let fresh: Option<Vec<MatchSet>> = if rematch {
        Some(patch::match_all(&xn, grid, &config.patch)?)
    } else {
        None
    };
    let spec = &config.patch;
    let update = |slot: Option<CubeSlot>, matches: MatchSet| -> Result<CubeSlot> {
        let pos = matches.reference_pos;
        let run = || -> Result<CubeSlot> {
            let cube = patch::extract_cube(&xn, &matches, spec, scale)?.data;
            let ex = patch::denormalize(&cube, scale);
            let (mut kbr, w) = match slot {
                Some(s) if s.matches.same_members(&matches) => {
                    let mut kbr = s.kbr;
                    if s.scale != scale {
                        kbr.rescale(s.scale / scale);
                    }
                    (kbr, s.w)
                }
                _ => (KbrState::from_cube(&cube)?, Tensor3::zeros(cube.dims())),
            };
            let wn = w.map(|v| v / scale);
            let mut rec = cube.clone();
            for _ in 0..config.inner_iters {
                rec = kbr_step(&mut kbr, &cube, &wn, params)?;
            }
            let t = patch::denormalize(&rec, scale);
            // W ← W − ρ (T − E X)
            let mut diff = t.sub(&ex)?;
            diff.scale_in_place(config.rho);
            let w = w.sub(&diff)?;
            Ok(CubeSlot {
                matches,
                kbr,
                t,
                w,
                scale,
            })
        };
        run().map_err(|e| e.context(format!("cube at {pos:?}")))
    };

    let old = std::mem::take(slots);
    let new_slots: Vec<CubeSlot> = match fresh {
        Some(all) => {
            let mut old: Vec<Option<CubeSlot>> = old.into_iter().map(Some).collect();
            old.resize_with(all.len(), || None);
            old.into_par_iter()
                .zip(all.into_par_iter())
                .map(|(o, m)| update(o, m))
                .collect::<Result<_>>()?
        }
        None => old
            .into_par_iter()
            .map(|s| {
                let m = s.matches.clone();
                update(Some(s), m)
            })
            .collect::<Result<_>>()?,
    };
    *slots = new_slots;
    Ok(rematch)
}

/// `Σ_l ‖T_l − E_l X‖_F`.
pub fn multiplier_residual(slots: &[CubeSlot], x: &Tensor3, spec: &PatchGridSpec) -> f64 {
    let norms: Vec<f64> = slots
        .par_iter()
        .map(|s| {
            extract(x, s, spec)
                .and_then(|ex| s.t.sub(&ex))
                .map(|d| d.frobenius_norm())
                .unwrap_or(f64::NAN)
        })
        .collect();
    norms.iter().sum()
}

/// The full non-local reconstruction loop from a zero start.
pub fn nlctf_reconstruct(problem: &Problem, config: &ReconConfig) -> Result<ReconOutput> {
    nlctf_observe(problem, config, |_, _| {})
}

/// [`nlctf_reconstruct`] with a callback after every outer iteration.
pub fn nlctf_observe(
    problem: &Problem,
    config: &ReconConfig,
    mut observer: impl FnMut(&IterationRecord, &Tensor3),
) -> Result<ReconOutput> {
    config.validate()?;
    let dims = problem.check()?;
    let params = config.kbr_params()?;
    let grid = patch::build_grid(dims[0], dims[1], &config.patch)?;
    let mut x = Tensor3::zeros(dims);
    let mut slots: Vec<CubeSlot> = Vec::new();
    let mut trace = Vec::with_capacity(config.outer_iters);
    for k in 0..config.outer_iters {
        let ctx = |e: NlctfError| e.context(format!("iteration {}", k + 1));
        let (next, resid) = nlctf_image_update(&x, &slots, problem, config).map_err(ctx)?;
        x = next;
        if !x.is_finite() {
            return Err(ctx(NlctfError::Numeric("image became non-finite".into())));
        }
        let mut rematched = false;
        if config.mu != 0.0 {
            let due = k % config.match_interval == 0;
            rematched = cube_phase(&x, &mut slots, &grid, due, config, &params).map_err(ctx)?;
        }
        let (rmse, psnr) = problem.errors(&x)?;
        let record = IterationRecord {
            iteration: k + 1,
            data_residual: resid,
            multiplier_residual: multiplier_residual(&slots, &x, &config.patch),
            cubes: slots.len(),
            rematched,
            rmse,
            psnr,
        };
        observer(&record, &x);
        trace.push(record);
    }
    Ok(ReconOutput { volume: x, trace })
}
