//! Kronecker-basis-representation (KBR) proximal solver for a single cube.
//!
//! One call to [`kbr_step`] performs a single split-Bregman pass over the
//! per-cube sub-problems: log-sum thresholding of the core, orthogonal
//! Procrustes updates of the three factors, weighted singular-value
//! thresholding of the mode auxiliaries, and the auxiliary multiplier update.
//!
//! Everything here operates on normalized cubes; the caller rescales.

use crate::error::{NlctfError, Result};
use crate::tensor::{
    fold, hosvd, mode_product, multi_mode_product, multi_mode_product_t, singular_values,
    thin_svd, unfold, Mat, Mode, Tensor3,
};

/// Lower bound on the mode-auxiliary weight. If one of the other modes'
/// log-sum rank collapses to zero the product weight would vanish and the
/// update would stop shrinking anything.
pub const MODE_WEIGHT_FLOOR: f64 = 1e-12;

/// Hyperparameters of the per-cube problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KbrParams {
    alpha: f64,
    delta: f64,
    theta: f64,
    epsilon: f64,
    gamma: f64,
}

impl KbrParams {
    pub fn new(alpha: f64, delta: f64, theta: f64, epsilon: f64) -> Result<Self> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(NlctfError::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("alpha", alpha)?;
        positive("delta", delta)?;
        positive("theta", theta)?;
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(NlctfError::Config(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        Ok(Self {
            alpha,
            delta,
            theta,
            epsilon,
            gamma: 1.0 / (delta + 3.0 * theta),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    /// `1 / (delta + 3 theta)`, the core step weight.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Per-cube split-Bregman state.
#[derive(Debug, Clone)]
pub struct KbrState {
    pub core: Tensor3,
    pub q: [Mat; 3],
    pub m_aux: [Tensor3; 3],
    pub z: [Tensor3; 3],
    /// Singular values of `unfold(m_aux[n], n)`, kept so the mode weights
    /// need no extra SVDs.
    m_sigma: [Vec<f64>; 3],
}

impl KbrState {
    /// Fresh state for a cube: HOSVD for core and factors, the cube itself
    /// for every mode auxiliary, zero multipliers.
    pub fn from_cube(cube: &Tensor3) -> Result<Self> {
        let h = hosvd(cube)?;
        let m_sigma = h.sigma;
        let zero = Tensor3::zeros(cube.dims());
        Ok(Self {
            core: h.core,
            q: h.q,
            m_aux: [cube.clone(), cube.clone(), cube.clone()],
            z: [zero.clone(), zero.clone(), zero],
            m_sigma,
        })
    }

    /// Cube dims.
    pub fn dims(&self) -> [usize; 3] {
        self.m_aux[0].dims()
    }

    /// Multiply every scale-carrying quantity by `factor` (> 0). Used when
    /// the volume normalization changes between outer iterations.
    pub fn rescale(&mut self, factor: f64) {
        self.core.scale_in_place(factor);
        for n in 0..3 {
            self.m_aux[n].scale_in_place(factor);
            self.z[n].scale_in_place(factor);
            self.m_sigma[n].iter_mut().for_each(|s| *s *= factor);
        }
    }

    /// Current reconstruction `core ×1 Q1 ×2 Q2 ×3 Q3`.
    pub fn reconstruction(&self) -> Result<Tensor3> {
        multi_mode_product(&self.core, &self.q)
    }

    /// Log-sum rank of the mode-n auxiliary along its own mode.
    pub fn mode_logsum(&self, mode: Mode, epsilon: f64) -> f64 {
        logsum_values(&self.m_sigma[mode.index()], epsilon)
    }
}

fn logsum_values(values: &[f64], epsilon: f64) -> f64 {
    let c1 = -1.0 / epsilon.ln();
    values.iter().map(|v| c1 * (v.abs() / epsilon).ln_1p()).sum()
}

/// Log-sum sparsity of a core tensor, `sum_i log(1 + |c_i|/eps) / (-log eps)`.
pub fn logsum_core(core: &Tensor3, epsilon: f64) -> f64 {
    logsum_values(core.data(), epsilon)
}

/// Log-sum rank surrogate of a matrix over all its singular values.
pub fn logsum_rank(m: &Mat, epsilon: f64) -> Result<f64> {
    Ok(logsum_values(&singular_values(m)?, epsilon))
}

/// Proximal map of the scaled log-sum penalty:
/// `argmin_c gamma * log(1 + |c|/eps)/(-log eps) + (c - d)^2 / 2`.
///
/// Below the threshold `max(0, 2 sqrt(c1 gamma) - eps)` the answer is zero.
/// Above it the stationary point `sign(d) (c2 + c3) / 2` is a local minimum;
/// it is returned only when it beats `c = 0`, so the result is the global
/// minimizer.
pub fn scalar_logsum_prox(d: f64, gamma: f64, epsilon: f64) -> Result<f64> {
    let c1 = -1.0 / epsilon.ln();
    let k = c1 * gamma;
    let mag = d.abs();
    let threshold = (2.0 * k.sqrt() - epsilon).max(0.0);
    if mag <= threshold {
        return Ok(0.0);
    }
    let disc = (mag + epsilon) * (mag + epsilon) - 4.0 * k;
    if disc < 0.0 {
        return Err(NlctfError::Numeric(format!(
            "log-sum prox discriminant {disc} < 0 above threshold (d={d}, gamma={gamma}, eps={epsilon})"
        )));
    }
    let c = 0.5 * ((mag - epsilon) + disc.sqrt());
    if c <= 0.0 {
        return Ok(0.0);
    }
    let at_c = k * (c / epsilon).ln_1p() + 0.5 * (c - mag) * (c - mag);
    let at_zero = 0.5 * mag * mag;
    if at_c < at_zero {
        Ok(c.copysign(d))
    } else {
        Ok(0.0)
    }
}

/// Blend of the data target and the mode auxiliaries that the core and
/// factor sub-problems fit: `(delta (target + w) + theta sum_n (M_n - Z_n)) / (delta + 3 theta)`.
pub fn blend_target(state: &KbrState, target: &Tensor3, w: &Tensor3, params: &KbrParams) -> Result<Tensor3> {
    let dims = state.dims();
    if target.dims() != dims || w.dims() != dims {
        return Err(NlctfError::Dimension(format!(
            "cube target {:?} / feedback {:?} vs state {dims:?}",
            target.dims(),
            w.dims()
        )));
    }
    let g = params.gamma;
    let mut b = Tensor3::zeros(dims);
    let out = b.data_mut();
    let (t, wd) = (target.data(), w.data());
    let m = [state.m_aux[0].data(), state.m_aux[1].data(), state.m_aux[2].data()];
    let z = [state.z[0].data(), state.z[1].data(), state.z[2].data()];
    for i in 0..out.len() {
        let aux = (m[0][i] - z[0][i]) + (m[1][i] - z[1][i]) + (m[2][i] - z[2][i]);
        out[i] = (params.delta * (t[i] + wd[i]) + params.theta * aux) * g;
    }
    Ok(b)
}

/// Core sub-problem: project `b` onto the factor bases and apply the
/// log-sum prox entrywise with weight `gamma`.
pub fn update_core(state: &mut KbrState, b: &Tensor3, params: &KbrParams) -> Result<Tensor3> {
    if b.dims() != state.dims() {
        return Err(NlctfError::Dimension(format!(
            "blend {:?} vs cube {:?}",
            b.dims(),
            state.dims()
        )));
    }
    let projected = multi_mode_product_t(b, &state.q)?;
    let mut core = projected;
    for v in core.data_mut() {
        *v = scalar_logsum_prox(*v, params.gamma, params.epsilon)?;
    }
    state.core = core.clone();
    Ok(core)
}

/// The matrix whose polar factor is the optimal mode-n factor:
/// `unfold(b, n) * kron(other factors) * unfold(core, n)^T`, evaluated with
/// mode products instead of an explicit Kronecker product.
pub fn factor_target(state: &KbrState, b: &Tensor3, mode: Mode) -> Result<Mat> {
    let [o1, o2] = mode.others();
    let p = mode_product(b, &state.q[o1.index()].transpose(), o1)?;
    let p = mode_product(&p, &state.q[o2.index()].transpose(), o2)?;
    unfold(&p, mode).matmul_t(&unfold(&state.core, mode))
}

/// Orthogonal factor sub-problem for one mode (Procrustes): with
/// `L = G Θ V^T`, the new factor is `G V^T`.
pub fn update_factor(state: &mut KbrState, b: &Tensor3, mode: Mode) -> Result<Mat> {
    let l = factor_target(state, b, mode)?;
    let svd = thin_svd(&l).map_err(|e| e.context(format!("factor update mode {}", mode.index() + 1)))?;
    let q = svd.u.matmul_t(&svd.v)?;
    state.q[mode.index()] = q.clone();
    Ok(q)
}

/// Weight of the mode-n auxiliary problem: `(alpha/theta) * prod_{m != n} f*(M_m)`,
/// floored at [`MODE_WEIGHT_FLOOR`].
pub fn mode_weight(state: &KbrState, mode: Mode, params: &KbrParams) -> f64 {
    let [o1, o2] = mode.others();
    let prod = state.mode_logsum(o1, params.epsilon) * state.mode_logsum(o2, params.epsilon);
    (params.alpha / params.theta * prod).max(MODE_WEIGHT_FLOOR)
}

/// Mode-auxiliary sub-problem: weighted log-sum thresholding of the singular
/// values of `unfold(reconstruction + Z_n, n)`.
pub fn update_mode_aux(
    state: &mut KbrState,
    reconstruction: &Tensor3,
    mode: Mode,
    params: &KbrParams,
) -> Result<Tensor3> {
    let n = mode.index();
    let weight = mode_weight(state, mode, params);
    let y = reconstruction.add(&state.z[n])?;
    let svd = thin_svd(&unfold(&y, mode))
        .map_err(|e| e.context(format!("mode auxiliary update mode {}", n + 1)))?;
    let shrunk = svd
        .s
        .iter()
        .map(|&s| scalar_logsum_prox(s, weight, params.epsilon))
        .collect::<Result<Vec<f64>>>()?;
    let m = fold(&svd.recompose_with(&shrunk), mode, y.dims())?;
    state.m_aux[n] = m.clone();
    state.m_sigma[n] = shrunk;
    Ok(m)
}

/// Multiplier update `Z_n <- Z_n - (M_n - reconstruction)` for all modes.
pub fn update_multipliers(state: &mut KbrState, reconstruction: &Tensor3) -> Result<()> {
    for n in 0..3 {
        let diff = state.m_aux[n].sub(reconstruction)?;
        state.z[n].axpy(-1.0, &diff)?;
    }
    Ok(())
}

/// Per-cube surrogate objective (the augmented split-Bregman functional):
///
/// `f(C) + alpha prod_n f*(M_n) + delta/2 ||X - target - w||^2 + theta/2 sum_n ||X - M_n + Z_n||^2`
/// with `X = C ×1 Q1 ×2 Q2 ×3 Q3`.
pub fn surrogate_objective(state: &KbrState, target: &Tensor3, w: &Tensor3, params: &KbrParams) -> Result<f64> {
    let x = state.reconstruction()?;
    let eps = params.epsilon;
    let mut fit = 0.0;
    for ((xv, tv), wv) in x.data().iter().zip(target.data()).zip(w.data()) {
        let r = xv - tv - wv;
        fit += r * r;
    }
    let mut coupling = 0.0;
    for n in 0..3 {
        for ((xv, mv), zv) in x.data().iter().zip(state.m_aux[n].data()).zip(state.z[n].data()) {
            let r = xv - mv + zv;
            coupling += r * r;
        }
    }
    let rank_term: f64 = Mode::ALL.iter().map(|&m| state.mode_logsum(m, eps)).product();
    Ok(logsum_core(&state.core, eps)
        + params.alpha * rank_term
        + 0.5 * params.delta * fit
        + 0.5 * params.theta * coupling)
}

/// One split-Bregman pass for a cube. Returns the updated (still
/// normalized) cube estimate `core ×1 Q1 ×2 Q2 ×3 Q3`.
pub fn kbr_step(state: &mut KbrState, target: &Tensor3, w: &Tensor3, params: &KbrParams) -> Result<Tensor3> {
    let b = blend_target(state, target, w, params)?;
    update_core(state, &b, params)?;
    for mode in Mode::ALL {
        update_factor(state, &b, mode)?;
    }
    let rec = state.reconstruction()?;
    for mode in Mode::ALL {
        update_mode_aux(state, &rec, mode, params)?;
    }
    update_multipliers(state, &rec)?;
    if !rec.is_finite() {
        return Err(NlctfError::Numeric("cube estimate became non-finite".into()));
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: brute-force grid search of the scalar objective
    /// over `[0, d]` with step 1e-4.
    fn grid_prox(d: f64, gamma: f64, eps: f64) -> f64 {
        let obj = |c: f64| gamma * (c.abs() / eps + 1.0).ln() / (-eps.ln()) + 0.5 * (c - d) * (c - d);
        let steps = (d.abs() / 1e-4).ceil() as i64;
        let mut best = (obj(0.0), 0.0);
        for j in 1..=steps {
            let c = (j as f64 * 1e-4).min(d.abs()).copysign(d);
            let v = obj(c);
            if v < best.0 {
                best = (v, c);
            }
        }
        best.1
    }

    fn random_tensor(rng: &mut impl Rng, dims: [usize; 3], scale: f64) -> Tensor3 {
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn params_validate_and_derive_gamma() {
        let p = KbrParams::new(10.0, 0.02, 250.0, 1e-3).unwrap();
        assert_eq!(p.gamma(), 1.0 / (0.02 + 3.0 * 250.0));
        assert!(KbrParams::new(0.0, 1.0, 1.0, 1e-3).is_err());
        assert!(KbrParams::new(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(KbrParams::new(1.0, -1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn logsum_core_values() {
        assert_eq!(logsum_core(&Tensor3::zeros([2, 2, 2]), 1e-3), 0.0);
        let one = Tensor3::from_vec([1, 1, 1], vec![1e-3]).unwrap();
        let want = 2f64.ln() / -(1e-3f64).ln();
        assert!((logsum_core(&one, 1e-3) - want).abs() < 1e-12);
        assert!((want - 0.10034).abs() < 1e-5);
        let t = Tensor3::from_vec([1, 2, 1], vec![0.3, -0.1]).unwrap();
        assert!(logsum_core(&t.map(|v| 2.0 * v), 1e-3) > logsum_core(&t, 1e-3));
    }

    #[test]
    fn logsum_rank_values() {
        assert_eq!(logsum_rank(&Mat::zeros(3, 2), 1e-3).unwrap(), 0.0);
        let v = logsum_rank(&Mat::identity(2), 1e-3).unwrap();
        let want = 2.0 * ((1.0f64 + 1e-3).ln() - (1e-3f64).ln()) / -(1e-3f64).ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 2.0003).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Mat::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let a = logsum_rank(&m, 1e-2).unwrap();
        let b = logsum_rank(&m.transpose(), 1e-2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn prox_zero_and_large_inputs() {
        assert_eq!(scalar_logsum_prox(0.0, 0.5, 1e-3).unwrap(), 0.0);
        for &(gamma, eps) in &[(1e-3, 1e-3), (0.5, 1e-2), (1.0, 1e-4)] {
            let c1 = -1.0 / f64::ln(eps);
            let thr = (2.0 * (c1 * gamma as f64).sqrt() - eps).max(0.0);
            let d = 100.0 * thr.max(1e-3);
            let out = scalar_logsum_prox(d, gamma, eps).unwrap();
            assert!((out - d).abs() <= 0.01 * d);
            let first_order = d - c1 * gamma / d;
            assert!((out - first_order).abs() <= 0.01 * d);
        }
    }

    #[test]
    fn prox_matches_grid_search_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let d = rng.random_range(-3.0..3.0);
            let gamma = rng.random_range(1e-4..1.0);
            let eps = rng.random_range(1e-4..1e-1);
            let got = scalar_logsum_prox(d, gamma, eps).unwrap();
            let want = grid_prox(d, gamma, eps);
            assert!((got - want).abs() <= 2e-4, "d={d} gamma={gamma} eps={eps}: {got} vs {want}");
        }
    }

    #[test]
    fn update_core_zero_and_subthreshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cube = random_tensor(&mut rng, [4, 3, 5], 1.0);
        let params = KbrParams::new(1.0, 1.0, 1.0, 1e-3).unwrap();
        let mut state = KbrState::from_cube(&cube).unwrap();
        let core = update_core(&mut state, &Tensor3::zeros([4, 3, 5]), &params).unwrap();
        assert!(core.data().iter().all(|&v| v == 0.0));

        let mut state = KbrState::from_cube(&cube).unwrap();
        state.q = [Mat::identity(4), Mat::identity(3), Mat::identity(5)];
        let c1 = -1.0 / f64::ln(1e-3);
        let thr = 2.0 * (c1 * params.gamma()).sqrt() - 1e-3;
        let small = random_tensor(&mut rng, [4, 3, 5], 0.9 * thr);
        let core = update_core(&mut state, &small, &params).unwrap();
        assert!(core.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn update_core_matches_entrywise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cube = random_tensor(&mut rng, [4, 3, 5], 1.0);
        let mut state = KbrState::from_cube(&cube).unwrap();
        let params = KbrParams::new(1.0, 0.5, 0.2, 1e-2).unwrap();
        let b = random_tensor(&mut rng, [4, 3, 5], 1.0);
        let projected = multi_mode_product_t(&b, &state.q).unwrap();
        let core = update_core(&mut state, &b, &params).unwrap();
        for (got, d) in core.data().iter().zip(projected.data()) {
            assert!((got - grid_prox(*d, params.gamma(), params.epsilon())).abs() <= 2e-4);
        }
    }

    fn fit_error(state: &KbrState, b: &Tensor3) -> f64 {
        state.reconstruction().unwrap().sub(b).unwrap().frobenius_norm().powi(2)
    }

    #[test]
    fn factor_update_never_increases_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let cube = random_tensor(&mut rng, [5, 3, 4], 1.0);
            let mut state = KbrState::from_cube(&cube).unwrap();
            let params = KbrParams::new(1.0, 1.0, 1.0, 1e-2).unwrap();
            let b = random_tensor(&mut rng, [5, 3, 4], 1.0);
            update_core(&mut state, &b, &params).unwrap();
            for mode in Mode::ALL {
                let before = fit_error(&state, &b);
                let l = factor_target(&state, &b, mode).unwrap();
                let old = state.q[mode.index()].clone();
                let new = update_factor(&mut state, &b, mode).unwrap();
                assert!(fit_error(&state, &b) <= before + 1e-9);
                assert!(l.inner(&new) >= l.inner(&old) - 1e-12);
                assert!(new.orthonormality_error() < 1e-10);
            }
        }
    }

    #[test]
    fn factor_update_at_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cube = random_tensor(&mut rng, [4, 3, 2], 1.0);
        let mut state = KbrState::from_cube(&cube).unwrap();
        let b = state.reconstruction().unwrap();
        let before = fit_error(&state, &b);
        for mode in Mode::ALL {
            update_factor(&mut state, &b, mode).unwrap();
        }
        assert!(fit_error(&state, &b) <= before + 1e-9);
    }

    #[test]
    fn factor_update_with_core_equal_to_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b = random_tensor(&mut rng, [3, 3, 3], 1.0);
        let mut state = KbrState::from_cube(&b).unwrap();
        state.core = b.clone();
        state.q = [Mat::identity(3), Mat::identity(3), Mat::identity(3)];
        for mode in Mode::ALL {
            let q = update_factor(&mut state, &b, mode).unwrap();
            assert!(q.orthonormality_error() <= 1e-10);
        }
    }

    #[test]
    fn factor_target_matches_explicit_kronecker_route() {
        use crate::tensor::kron;
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let cube = random_tensor(&mut rng, [5, 3, 4], 1.0);
        let state = KbrState::from_cube(&cube).unwrap();
        let b = random_tensor(&mut rng, [5, 3, 4], 1.0);
        let q = &state.q;
        let krons = [kron(&q[2], &q[1]), kron(&q[2], &q[0]), kron(&q[1], &q[0])];
        for mode in Mode::ALL {
            let explicit = unfold(&b, mode)
                .matmul(&krons[mode.index()])
                .unwrap()
                .matmul_t(&unfold(&state.core, mode))
                .unwrap();
            let fast = factor_target(&state, &b, mode).unwrap();
            let err = explicit.data().iter().zip(fast.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn mode_aux_zero_input_and_floor_weight() {
        let params = KbrParams::new(1.0, 1.0, 1.0, 1e-3).unwrap();
        let zero = Tensor3::zeros([3, 2, 4]);
        let mut state = KbrState::from_cube(&zero).unwrap();
        let m = update_mode_aux(&mut state, &zero, Mode::One, &params).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = random_tensor(&mut rng, [3, 2, 4], 1.0);
        let mut state = KbrState::from_cube(&x).unwrap();
        let tiny = KbrParams::new(1e-300, 1.0, 1.0, 1e-3).unwrap();
        assert_eq!(mode_weight(&state, Mode::Two, &tiny), MODE_WEIGHT_FLOOR);
        let m = update_mode_aux(&mut state, &x, Mode::Two, &tiny).unwrap();
        let y = x.add(&state.z[1]).unwrap();
        assert!(m.sub(&y).unwrap().frobenius_norm() < 1e-9);
    }

    #[test]
    fn mode_aux_singular_values_follow_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = random_tensor(&mut rng, [9, 4, 6], 1.0);
        let mut state = KbrState::from_cube(&x).unwrap();
        state.z[0] = random_tensor(&mut rng, [9, 4, 6], 0.1);
        let params = KbrParams::new(0.05, 1.0, 10.0, 1e-2).unwrap();
        let weight = mode_weight(&state, Mode::One, &params);
        let y = x.add(&state.z[0]).unwrap();
        let sin = singular_values(&unfold(&y, Mode::One)).unwrap();
        let m = update_mode_aux(&mut state, &x, Mode::One, &params).unwrap();
        let sout = singular_values(&unfold(&m, Mode::One)).unwrap();
        for (so, si) in sout.iter().zip(&sin) {
            assert!((so - grid_prox(*si, weight, 1e-2)).abs() <= 2e-4);
            assert!(*so <= *si + 1e-12);
        }
    }

    #[test]
    fn multiplier_update_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_tensor(&mut rng, [3, 2, 2], 1.0);
        let mut state = KbrState::from_cube(&x).unwrap();
        update_multipliers(&mut state, &x).unwrap();
        for z in &state.z {
            assert!(z.data().iter().all(|&v| v == 0.0));
        }
        let rec = random_tensor(&mut rng, [3, 2, 2], 1.0);
        let e = x.sub(&rec).unwrap();
        update_multipliers(&mut state, &rec).unwrap();
        for z in &state.z {
            assert!(z.add(&e).unwrap().frobenius_norm() < 1e-15);
        }
        let before = state.z[1].clone();
        update_multipliers(&mut state, &rec).unwrap();
        update_multipliers(&mut state, &rec).unwrap();
        let delta = state.z[1].sub(&before).unwrap();
        assert!(delta.add(&e.map(|v| 2.0 * v)).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn blend_with_empty_auxiliaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let zero = Tensor3::zeros([3, 2, 2]);
        let state = KbrState::from_cube(&zero).unwrap();
        let params = KbrParams::new(1.0, 2.0, 0.5, 1e-3).unwrap();
        let t = random_tensor(&mut rng, [3, 2, 2], 1.0);
        let w = random_tensor(&mut rng, [3, 2, 2], 1.0);
        let b = blend_target(&state, &t, &w, &params).unwrap();
        let want = t.add(&w).unwrap().map(|v| 2.0 / 3.5 * v);
        assert!(b.sub(&want).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn kbr_step_zero_cube_stays_zero() {
        let zero = Tensor3::zeros([4, 3, 3]);
        let mut state = KbrState::from_cube(&zero).unwrap();
        let params = KbrParams::new(10.0, 0.02, 250.0, 1e-3).unwrap();
        let out = kbr_step(&mut state, &zero, &zero, &params).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kbr_step_recovers_low_rank_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dims = [12, 6, 8];
        let core = random_tensor(&mut rng, [2, 2, 2], 3.0);
        let q = [
            crate::tensor::thin_svd(&Mat::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0))).unwrap().u,
            crate::tensor::thin_svd(&Mat::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0))).unwrap().u,
            crate::tensor::thin_svd(&Mat::from_fn(8, 2, |_, _| rng.random_range(-1.0..1.0))).unwrap().u,
        ];
        let target = multi_mode_product(&core, &q).unwrap();
        assert_eq!(target.dims(), dims);
        let params = KbrParams::new(1e-3, 10.0, 0.1, 1e-3).unwrap();
        let w = Tensor3::zeros(dims);
        let mut state = KbrState::from_cube(&target).unwrap();
        let mut out = target.clone();
        for _ in 0..10 {
            out = kbr_step(&mut state, &target, &w, &params).unwrap();
            for q in &state.q {
                assert!(q.orthonormality_error() < 1e-8);
            }
        }
        let rel = out.sub(&target).unwrap().frobenius_norm() / target.frobenius_norm();
        assert!(rel <= 5e-2, "relative error {rel}");
    }

    #[test]
    fn sub_updates_descend_the_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let dims = [8, 4, 5];
            let cube = random_tensor(&mut rng, dims, 1.0);
            let mut state = KbrState::from_cube(&cube).unwrap();
            for n in 0..3 {
                state.z[n] = random_tensor(&mut rng, dims, 0.1);
            }
            let target = cube.add(&random_tensor(&mut rng, dims, 0.2)).unwrap();
            let w = random_tensor(&mut rng, dims, 0.05);
            let params = KbrParams::new(0.5, 1.0, 0.5, 1e-2).unwrap();
            let mut prev = surrogate_objective(&state, &target, &w, &params).unwrap();
            let b = blend_target(&state, &target, &w, &params).unwrap();
            let mut check = |state: &KbrState| {
                let now = surrogate_objective(state, &target, &w, &params).unwrap();
                assert!(now <= prev + 1e-7 * prev.abs().max(1.0), "{now} > {prev}");
                prev = now;
            };
            update_core(&mut state, &b, &params).unwrap();
            check(&state);
            for mode in Mode::ALL {
                update_factor(&mut state, &b, mode).unwrap();
                check(&state);
            }
            let rec = state.reconstruction().unwrap();
            for mode in Mode::ALL {
                update_mode_aux(&mut state, &rec, mode, &params).unwrap();
                check(&state);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn prox_is_odd_shrinking_and_optimal(d in -2.0f64..2.0, gamma in 1e-4f64..1.0, eps in 1e-4f64..1e-1) {
            let p = scalar_logsum_prox(d, gamma, eps).unwrap();
            prop_assert_eq!(scalar_logsum_prox(-d, gamma, eps).unwrap(), -p);
            prop_assert!(p.abs() <= d.abs());
            prop_assert!((p - grid_prox(d, gamma, eps)).abs() <= 2e-4);
        }
    }
}
