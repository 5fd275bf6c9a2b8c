//! Python module `nlctf`.
//!
//! Arrays cross the boundary as flat lists in the library's column-major
//! layout together with their dims.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nlctf_core::config::{self, Profile, RunConfig};
use nlctf_core::geometry::Sinogram;
use nlctf_core::recon::{self, Problem};
use nlctf_core::sim::{self, AttenuationProjector};
use nlctf_core::tensor::{self, Mode};
use nlctf_core::{kbr, metrics, NlctfError};

fn py_err(e: NlctfError) -> PyErr {
    match e {
        NlctfError::Numeric(m) => PyRuntimeError::new_err(m),
        NlctfError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn mode(n: usize) -> PyResult<Mode> {
    Mode::from_number(n).map_err(py_err)
}

/// Dense third-order tensor, first index fastest.
#[pyclass(name = "Tensor3", from_py_object)]
#[derive(Clone)]
pub struct PyTensor3 {
    inner: tensor::Tensor3,
}

#[pymethods]
impl PyTensor3 {
    #[new]
    fn new(dims: [usize; 3], data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: tensor::Tensor3::from_vec(dims, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(dims: [usize; 3]) -> Self {
        Self {
            inner: tensor::Tensor3::zeros(dims),
        }
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, i: usize, j: usize, k: usize) -> PyResult<f64> {
        let [a, b, c] = self.inner.dims();
        if i >= a || j >= b || k >= c {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(i, j, k))
    }

    fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }

    /// Mode-n unfolding as `(rows, cols, column-major data)`.
    fn unfold(&self, n: usize) -> PyResult<(usize, usize, Vec<f64>)> {
        let m = tensor::unfold(&self.inner, mode(n)?);
        Ok((m.rows(), m.cols(), m.data().to_vec()))
    }

    fn __repr__(&self) -> String {
        format!("Tensor3(dims={:?})", self.inner.dims())
    }
}

/// Fold a `(rows, cols)` column-major matrix back along mode `n`.
#[pyfunction]
fn fold(rows: usize, cols: usize, data: Vec<f64>, n: usize, dims: [usize; 3]) -> PyResult<PyTensor3> {
    let m = tensor::Mat::from_col_major(rows, cols, data).map_err(py_err)?;
    Ok(PyTensor3 {
        inner: tensor::fold(&m, mode(n)?, dims).map_err(py_err)?,
    })
}

/// HOSVD: returns `(core, [factor as (rows, cols, data)] * 3)`.
#[pyfunction]
fn hosvd(t: &PyTensor3) -> PyResult<(PyTensor3, Vec<(usize, usize, Vec<f64>)>)> {
    let h = tensor::hosvd(&t.inner).map_err(py_err)?;
    let q = h.q.iter().map(|m| (m.rows(), m.cols(), m.data().to_vec())).collect();
    Ok((PyTensor3 { inner: h.core }, q))
}

/// Minimizer of `gamma * f(c) + (c - d)^2 / 2` for the log-sum penalty.
#[pyfunction]
fn logsum_prox(d: f64, gamma: f64, epsilon: f64) -> PyResult<f64> {
    kbr::scalar_logsum_prox(d, gamma, epsilon).map_err(py_err)
}

/// A loaded run configuration (profile + overrides).
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: RunConfig,
}

fn volume_sinos(cfg: &RunConfig, sinos: Vec<Vec<f64>>) -> PyResult<Vec<Sinogram>> {
    let g = &cfg.geometry;
    sinos
        .into_iter()
        .map(|values| {
            if values.len() != g.n_rays() {
                return Err(PyValueError::new_err(format!(
                    "sinogram has {} values, geometry needs {}",
                    values.len(),
                    g.n_rays()
                )));
            }
            Ok(Sinogram {
                n_views: g.n_views,
                n_det: g.n_det,
                values,
            })
        })
        .collect()
}

impl PyRunConfig {
    fn solve<T>(
        &self,
        sinos: Vec<Vec<f64>>,
        reference: Option<&PyTensor3>,
        f: impl FnOnce(&Problem) -> nlctf_core::Result<T>,
    ) -> PyResult<T> {
        let sinos = volume_sinos(&self.inner, sinos)?;
        let projector = AttenuationProjector::new(self.inner.geometry).map_err(py_err)?;
        let normalizers = projector.normalizers().map_err(py_err)?;
        let problem = Problem {
            sinos: &sinos,
            projector: &projector,
            normalizers: &normalizers,
            reference: reference.map(|r| &r.inner),
        };
        f(&problem).map_err(py_err)
    }
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (profile = "desk", overrides = Vec::new()))]
    fn new(profile: &str, overrides: Vec<String>) -> PyResult<Self> {
        let p = Profile::parse(profile).map_err(py_err)?;
        Ok(Self {
            inner: config::load(None, Some(p), &overrides, None).map_err(py_err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize) {
        (self.inner.geometry.n_h, self.inner.geometry.n_w)
    }

    #[getter]
    fn n_bins(&self) -> usize {
        self.inner.spectrum.n_bins()
    }

    #[getter]
    fn material_names(&self) -> Vec<String> {
        self.inner.phantom.materials.iter().map(|m| m.name.clone()).collect()
    }

    /// Ground-truth attenuation volume `(n_h, n_w, S)`.
    fn phantom(&self) -> PyResult<PyTensor3> {
        let gt = sim::rasterize_phantom(&self.inner.phantom_spec()).map_err(py_err)?;
        Ok(PyTensor3 { inner: gt.volume })
    }

    /// Log-domain sinograms, one flat view-major list per bin.
    #[pyo3(signature = (truth, noise = true))]
    fn simulate(&self, truth: &PyTensor3, noise: bool) -> PyResult<Vec<Vec<f64>>> {
        let gt = sim::GroundTruth {
            volume: truth.inner.clone(),
            labels: vec![],
        };
        let c = &self.inner;
        let counts = sim::simulate_counts(&gt, &c.geometry, &c.spectrum, c.seed, noise).map_err(py_err)?;
        let sinos = sim::counts_to_sinogram(&counts, &c.spectrum).map_err(py_err)?;
        Ok(sinos.into_iter().map(|s| s.values).collect())
    }

    /// Noise-free forward projection of a volume.
    fn project(&self, volume: &PyTensor3) -> PyResult<Vec<Vec<f64>>> {
        let p = AttenuationProjector::new(self.inner.geometry).map_err(py_err)?;
        let sinos = p.forward_volume(&volume.inner).map_err(py_err)?;
        Ok(sinos.into_iter().map(|s| s.values).collect())
    }

    /// SART with the configured iteration count and relaxation.
    fn sart(&self, sinos: Vec<Vec<f64>>) -> PyResult<PyTensor3> {
        let (iters, beta) = (self.inner.recon.outer_iters, self.inner.recon.beta);
        let out = self.solve(sinos, None, |p| recon::sart_reconstruct(p, iters, beta))?;
        Ok(PyTensor3 { inner: out.volume })
    }

    /// Non-local reconstruction. Returns the volume and the per-iteration
    /// mean RMSE against `reference` (empty without one).
    #[pyo3(signature = (sinos, reference = None))]
    fn nlctf(&self, sinos: Vec<Vec<f64>>, reference: Option<PyTensor3>) -> PyResult<(PyTensor3, Vec<f64>)> {
        let cfg = self.inner.recon.clone();
        let out = self.solve(sinos, reference.as_ref(), |p| recon::nlctf_reconstruct(p, &cfg))?;
        let trace = out.trace.iter().filter_map(|r| r.mean_rmse()).collect();
        Ok((PyTensor3 { inner: out.volume }, trace))
    }

    /// Per-pixel material fractions `(n_h, n_w, M)` against the phantom
    /// materials.
    fn decompose(&self, volume: &PyTensor3) -> PyResult<PyTensor3> {
        let d = metrics::decompose(&volume.inner, &self.inner.basis()).map_err(py_err)?;
        Ok(PyTensor3 { inner: d.fractions })
    }
}

#[pyfunction]
fn rmse(x: &PyTensor3, reference: &PyTensor3) -> PyResult<Vec<f64>> {
    metrics::rmse(&x.inner, &reference.inner).map_err(py_err)
}

#[pyfunction]
fn psnr(x: &PyTensor3, reference: &PyTensor3) -> PyResult<Vec<f64>> {
    metrics::psnr(&x.inner, &reference.inner).map_err(py_err)
}

#[pyfunction]
fn ssim(x: &PyTensor3, reference: &PyTensor3) -> PyResult<Vec<f64>> {
    metrics::ssim(&x.inner, &reference.inner).map_err(py_err)
}

#[pymodule]
fn nlctf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor3>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(fold, m)?)?;
    m.add_function(wrap_pyfunction!(hosvd, m)?)?;
    m.add_function(wrap_pyfunction!(logsum_prox, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    Ok(())
}
