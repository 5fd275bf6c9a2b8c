//! Procedural spectral phantoms and photon-counting projection data.
//!
//! Attenuation lives in cm⁻¹ and geometry in mm. [`AttenuationProjector`]
//! is the only place where the two meet.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NlctfError, Result};
use crate::geometry::{self, FanBeamGeometry, SartNormalizers, Sinogram};
use crate::tensor::Tensor3;

/// cm per mm.
pub const MM_TO_CM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub name: String,
    /// Linear attenuation per energy bin, cm⁻¹.
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    /// (x, y) in mm, isocenter at the origin, y up.
    pub center: [f64; 2],
    /// Semi-axes (a, b) in mm before rotation.
    pub semi_axes: [f64; 2],
    /// Counterclockwise rotation, radians.
    #[serde(default)]
    pub rotation: f64,
    /// Index into the material list.
    pub material: usize,
    #[serde(default)]
    pub priority: i32,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_axes[0]).powi(2) + (v / self.semi_axes[1]).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub materials: Vec<Material>,
    #[serde(default)]
    pub shapes: Vec<Ellipse>,
    pub n_w: usize,
    pub n_h: usize,
    /// mm
    pub pixel_size: f64,
}

impl PhantomSpec {
    pub fn n_bins(&self) -> usize {
        self.materials.first().map_or(0, |m| m.mu.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.materials.is_empty() {
            return Err(NlctfError::Config("materials: at least one material is required".into()));
        }
        let s = self.n_bins();
        if s == 0 {
            return Err(NlctfError::Config("materials: mu lists must not be empty".into()));
        }
        for m in &self.materials {
            if m.mu.len() != s {
                return Err(NlctfError::Config(format!(
                    "materials.{}: {} bins, expected {s}",
                    m.name,
                    m.mu.len()
                )));
            }
            if let Some(bad) = m.mu.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(NlctfError::Config(format!("materials.{}: mu must be positive, got {bad}", m.name)));
            }
        }
        for (i, e) in self.shapes.iter().enumerate() {
            if e.material >= self.materials.len() {
                return Err(NlctfError::Config(format!(
                    "shapes[{i}].material: index {} out of range",
                    e.material
                )));
            }
            if !(e.semi_axes[0] > 0.0 && e.semi_axes[1] > 0.0) {
                return Err(NlctfError::Config(format!("shapes[{i}].semi_axes must be positive")));
            }
        }
        if self.n_w == 0 || self.n_h == 0 || !(self.pixel_size > 0.0) {
            return Err(NlctfError::Config("phantom grid must be non-empty with positive pixel_size".into()));
        }
        Ok(())
    }
}

/// Per-bin attenuation images plus a label map.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Dims `(n_h, n_w, S)`, cm⁻¹.
    pub volume: Tensor3,
    /// `0` for background, otherwise material index + 1. Pixel order matches
    /// the volume's first two modes.
    pub labels: Vec<u8>,
}

/// Each pixel center takes the material of the highest-priority ellipse
/// containing it. Equal priorities resolve to the later shape.
pub fn rasterize_phantom(spec: &PhantomSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let (nh, nw, s) = (spec.n_h, spec.n_w, spec.n_bins());
    let mut order: Vec<usize> = (0..spec.shapes.len()).collect();
    order.sort_by_key(|&i| spec.shapes[i].priority);
    let mut labels = vec![0u8; nh * nw];
    for col in 0..nw {
        for row in 0..nh {
            let x = (col as f64 + 0.5 - nw as f64 / 2.0) * spec.pixel_size;
            let y = (nh as f64 / 2.0 - row as f64 - 0.5) * spec.pixel_size;
            for &i in order.iter().rev() {
                let e = &spec.shapes[i];
                if e.contains(x, y) {
                    labels[row + nh * col] = (e.material + 1) as u8;
                    break;
                }
            }
        }
    }
    let mut volume = Tensor3::zeros([nh, nw, s]);
    for ch in 0..s {
        let slice = volume.slice3_mut(ch);
        for (p, &l) in labels.iter().enumerate() {
            if l > 0 {
                slice[p] = spec.materials[l as usize - 1].mu[ch];
            }
        }
    }
    Ok(GroundTruth { volume, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumModel {
    /// keV, S + 1 strictly increasing values.
    pub bin_edges_kev: Vec<f64>,
    /// Total photons per ray before binning.
    pub photons_per_path: f64,
    /// Fraction of photons per bin.
    pub fractions: Vec<f64>,
}

impl SpectrumModel {
    pub fn n_bins(&self) -> usize {
        self.fractions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_edges_kev.len() != self.fractions.len() + 1 || self.fractions.is_empty() {
            return Err(NlctfError::Config(format!(
                "spectrum: {} edges for {} fractions",
                self.bin_edges_kev.len(),
                self.fractions.len()
            )));
        }
        if self.bin_edges_kev.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(NlctfError::Config("spectrum.bin_edges_kev must be strictly increasing".into()));
        }
        if self.fractions.iter().any(|f| !(*f >= 0.0)) {
            return Err(NlctfError::Config("spectrum.fractions must be nonnegative".into()));
        }
        let total: f64 = self.fractions.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(NlctfError::Config(format!("spectrum.fractions sum to {total}, expected 1")));
        }
        if !(self.photons_per_path > 0.0 && self.photons_per_path.is_finite()) {
            return Err(NlctfError::Config("spectrum.photons_per_path must be positive".into()));
        }
        Ok(())
    }

    /// Unattenuated counts per bin.
    pub fn n0(&self) -> Vec<f64> {
        self.fractions.iter().map(|f| f * self.photons_per_path).collect()
    }
}

/// Fan-beam projector acting on attenuation images in cm⁻¹ and producing
/// dimensionless line integrals.
#[derive(Debug, Clone, Copy)]
pub struct AttenuationProjector {
    pub geom: FanBeamGeometry,
}

impl AttenuationProjector {
    pub fn new(geom: FanBeamGeometry) -> Result<Self> {
        geom.validate()?;
        Ok(Self { geom })
    }

    pub fn forward(&self, images: &[&[f64]]) -> Result<Vec<Sinogram>> {
        let mut out = geometry::forward_project_many(images, &self.geom)?;
        for s in &mut out {
            s.values.iter_mut().for_each(|v| *v *= MM_TO_CM);
        }
        Ok(out)
    }

    pub fn back(&self, sinos: &[&Sinogram]) -> Result<Vec<Vec<f64>>> {
        let mut out = geometry::back_project_many(sinos, &self.geom)?;
        for img in &mut out {
            img.iter_mut().for_each(|v| *v *= MM_TO_CM);
        }
        Ok(out)
    }

    /// Row and column sums of the scaled system matrix.
    pub fn normalizers(&self) -> Result<SartNormalizers> {
        let mut n = geometry::sart_normalizers(&self.geom)?;
        n.row_sums.iter_mut().for_each(|v| *v *= MM_TO_CM);
        n.col_sums.iter_mut().for_each(|v| *v *= MM_TO_CM);
        Ok(n)
    }

    /// Forward-project every channel of a `(n_h, n_w, S)` volume.
    pub fn forward_volume(&self, volume: &Tensor3) -> Result<Vec<Sinogram>> {
        let [nh, nw, s] = volume.dims();
        if nh != self.geom.n_h || nw != self.geom.n_w {
            return Err(NlctfError::Dimension(format!(
                "volume grid {nh}x{nw} vs geometry {}x{}",
                self.geom.n_h, self.geom.n_w
            )));
        }
        let chans: Vec<&[f64]> = (0..s).map(|c| volume.slice3(c)).collect();
        self.forward(&chans)
    }
}

/// Noise-free transmitted counts `N0_s · exp(-p)`.
pub fn expected_counts(truth: &GroundTruth, geom: &FanBeamGeometry, spectrum: &SpectrumModel) -> Result<Vec<Sinogram>> {
    spectrum.validate()?;
    let s = truth.volume.dims()[2];
    if spectrum.n_bins() != s {
        return Err(NlctfError::Dimension(format!(
            "phantom has {s} bins, spectrum has {}",
            spectrum.n_bins()
        )));
    }
    let mut sinos = AttenuationProjector::new(*geom)?.forward_volume(&truth.volume)?;
    for (sino, n0) in sinos.iter_mut().zip(spectrum.n0()) {
        sino.values.iter_mut().for_each(|p| *p = n0 * (-*p).exp());
    }
    Ok(sinos)
}

/// Poisson draws with one counter-based stream per (bin, view, detector),
/// so the result does not depend on scheduling.
pub fn sample_counts(expected: &[Sinogram], seed: u64) -> Result<Vec<Sinogram>> {
    let mut out = Vec::with_capacity(expected.len());
    for (s, lam) in expected.iter().enumerate() {
        let n_det = lam.n_det;
        let rows: Vec<Vec<f64>> = (0..lam.n_views)
            .into_par_iter()
            .map(|v| {
                (0..n_det)
                    .map(|d| {
                        let l = lam.values[v * n_det + d];
                        if !(l > 0.0) {
                            return Ok(0.0);
                        }
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(((s * lam.n_views + v) * n_det + d) as u64);
                        let dist = Poisson::new(l)
                            .map_err(|e| NlctfError::Numeric(format!("poisson rate {l}: {e}")))?;
                        Ok(dist.sample(&mut rng))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        out.push(Sinogram {
            n_views: lam.n_views,
            n_det,
            values: rows.concat(),
        });
    }
    Ok(out)
}

/// Per-bin count sinograms. With `noise == false` the expected counts are
/// returned unchanged.
pub fn simulate_counts(
    truth: &GroundTruth,
    geom: &FanBeamGeometry,
    spectrum: &SpectrumModel,
    seed: u64,
    noise: bool,
) -> Result<Vec<Sinogram>> {
    let lam = expected_counts(truth, geom, spectrum)?;
    if noise {
        sample_counts(&lam, seed)
    } else {
        Ok(lam)
    }
}

/// Log transform `ln(N0_s / max(counts, 1))`.
pub fn counts_to_sinogram(counts: &[Sinogram], spectrum: &SpectrumModel) -> Result<Vec<Sinogram>> {
    if counts.len() != spectrum.n_bins() {
        return Err(NlctfError::Dimension(format!(
            "{} count sinograms for {} bins",
            counts.len(),
            spectrum.n_bins()
        )));
    }
    counts
        .iter()
        .zip(spectrum.n0())
        .map(|(c, n0)| {
            if let Some(bad) = c.values.iter().find(|v| !(**v >= 0.0)) {
                return Err(NlctfError::Config(format!("negative or NaN count {bad}")));
            }
            Ok(Sinogram {
                n_views: c.n_views,
                n_det: c.n_det,
                values: c.values.iter().map(|&v| (n0 / v.max(1.0)).ln()).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn water(mu: f64) -> Material {
        Material {
            name: "water".into(),
            mu: vec![mu, mu * 0.8],
        }
    }

    fn disk(r: f64, material: usize, priority: i32) -> Ellipse {
        Ellipse {
            center: [0.0, 0.0],
            semi_axes: [r, r],
            rotation: 0.0,
            material,
            priority,
        }
    }

    fn spectrum(n0: f64) -> SpectrumModel {
        SpectrumModel {
            bin_edges_kev: vec![20.0, 30.0, 40.0],
            photons_per_path: n0,
            fractions: vec![0.6, 0.4],
        }
    }

    #[test]
    fn empty_phantom_is_zero() {
        let spec = PhantomSpec {
            materials: vec![water(0.3)],
            shapes: vec![],
            n_w: 8,
            n_h: 6,
            pixel_size: 1.0,
        };
        let gt = rasterize_phantom(&spec).unwrap();
        assert_eq!(gt.volume.dims(), [6, 8, 2]);
        assert!(gt.volume.data().iter().all(|&v| v == 0.0));
        assert!(gt.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn center_pixel_gets_material_vector() {
        let spec = PhantomSpec {
            materials: vec![water(0.30)],
            shapes: vec![disk(1.0, 0, 0)],
            n_w: 5,
            n_h: 5,
            pixel_size: 1.0,
        };
        let gt = rasterize_phantom(&spec).unwrap();
        assert_eq!(gt.volume.get(2, 2, 0), 0.30);
        assert_eq!(gt.volume.get(2, 2, 1), 0.30 * 0.8);
        assert_eq!(gt.labels[2 + 5 * 2], 1);
        assert_eq!(gt.labels[0], 0);
    }

    #[test]
    fn overlap_takes_higher_priority() {
        // 3x1 strip: centers at x = -1, 0, 1
        let bone = Material {
            name: "bone".into(),
            mu: vec![2.0, 1.5],
        };
        let left = Ellipse {
            center: [-0.5, 0.0],
            semi_axes: [0.9, 0.4],
            rotation: 0.0,
            material: 1,
            priority: 5,
        };
        let right = Ellipse {
            center: [0.5, 0.0],
            semi_axes: [0.9, 0.4],
            rotation: 0.0,
            material: 0,
            priority: 1,
        };
        let spec = PhantomSpec {
            materials: vec![water(0.3), bone],
            shapes: vec![left.clone(), right.clone()],
            n_w: 3,
            n_h: 1,
            pixel_size: 1.0,
        };
        let gt = rasterize_phantom(&spec).unwrap();
        assert_eq!(gt.labels, vec![2, 2, 1]);
        // swapping priorities flips the shared center pixel only
        let mut swapped = spec.clone();
        swapped.shapes[0].priority = 0;
        let gt2 = rasterize_phantom(&swapped).unwrap();
        assert_eq!(gt2.labels, vec![2, 1, 1]);
    }

    #[test]
    fn rotated_ellipse_membership() {
        let e = Ellipse {
            center: [1.0, 1.0],
            semi_axes: [3.0, 0.5],
            rotation: std::f64::consts::FRAC_PI_2,
            material: 0,
            priority: 0,
        };
        assert!(e.contains(1.0, 3.5));
        assert!(!e.contains(3.5, 1.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = PhantomSpec {
            materials: vec![],
            shapes: vec![],
            n_w: 4,
            n_h: 4,
            pixel_size: 1.0,
        };
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("materials"));
        spec.materials = vec![water(0.3)];
        spec.shapes = vec![disk(1.0, 3, 0)];
        assert!(spec.validate().is_err());
        spec.shapes.clear();
        spec.materials[0].mu[1] = 0.0;
        assert!(spec.validate().is_err());
        let mut sp = spectrum(1e4);
        sp.fractions = vec![0.5, 0.4];
        assert!(sp.validate().is_err());
        sp.fractions = vec![0.6, 0.4];
        sp.bin_edges_kev = vec![20.0, 20.0, 40.0];
        assert!(sp.validate().is_err());
    }

    #[test]
    fn log_transform_examples() {
        let sp = spectrum(1e4);
        let n0 = sp.n0();
        let counts = vec![
            Sinogram {
                n_views: 1,
                n_det: 3,
                values: vec![n0[0], n0[0] / std::f64::consts::E, 0.0],
            },
            Sinogram {
                n_views: 1,
                n_det: 3,
                values: vec![n0[1], 1.0, 0.5],
            },
        ];
        let y = counts_to_sinogram(&counts, &sp).unwrap();
        assert_eq!(y[0].values[0], 0.0);
        assert!((y[0].values[1] - 1.0).abs() < 1e-12);
        assert_eq!(y[0].values[2], n0[0].ln());
        assert_eq!(y[1].values[1], y[1].values[2]);
    }

    fn small_geom(n: usize) -> FanBeamGeometry {
        FanBeamGeometry {
            sod: 100.0,
            sdd: 150.0,
            n_det: 41,
            det_pitch: 1.0,
            n_views: 30,
            n_w: n,
            n_h: n,
            pixel_size: 0.5,
            rays_per_cell: 1,
        }
    }

    #[test]
    fn noise_free_pipeline_recovers_line_integrals() {
        let spec = PhantomSpec {
            materials: vec![water(0.4)],
            shapes: vec![disk(5.0, 0, 0)],
            n_w: 32,
            n_h: 32,
            pixel_size: 0.5,
        };
        let gt = rasterize_phantom(&spec).unwrap();
        let g = small_geom(32);
        let sp = spectrum(2e4);
        let counts = simulate_counts(&gt, &g, &sp, 0, false).unwrap();
        let y = counts_to_sinogram(&counts, &sp).unwrap();
        let p = AttenuationProjector::new(g).unwrap().forward_volume(&gt.volume).unwrap();
        for (a, b) in y.iter().zip(&p) {
            for (u, v) in a.values.iter().zip(&b.values) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn slab_follows_beer_lambert() {
        // 10 mm wide slab; the central ray of view 0 is horizontal.
        let mu = 0.3;
        let spec = PhantomSpec {
            materials: vec![water(mu)],
            shapes: vec![Ellipse {
                center: [0.0, 0.0],
                semi_axes: [5.0, 1e6],
                rotation: 0.0,
                material: 0,
                priority: 0,
            }],
            n_w: 32,
            n_h: 32,
            pixel_size: 0.5,
        };
        let gt = rasterize_phantom(&spec).unwrap();
        let g = small_geom(32);
        let sp = spectrum(2e4);
        let lam = expected_counts(&gt, &g, &sp).unwrap();
        let n0 = sp.n0();
        let want = n0[0] * (-mu * 10.0 * MM_TO_CM).exp();
        assert!((lam[0].values[20] - want).abs() < 1e-9 * want);

        // sample mean of many independent draws of that ray
        let draws = 400;
        let mut sum = 0.0;
        for seed in 0..draws {
            sum += sample_counts(&lam[..1], seed).unwrap()[0].values[20];
        }
        let mean = sum / draws as f64;
        let sigma = (want / draws as f64).sqrt();
        assert!((mean - want).abs() < 3.0 * sigma, "{mean} vs {want}");

        // thicker slab, fewer counts in every bin
        let mut thick = spec.clone();
        thick.shapes[0].semi_axes[0] = 7.0;
        let lam2 = expected_counts(&rasterize_phantom(&thick).unwrap(), &g, &sp).unwrap();
        for s in 0..2 {
            assert!(lam2[s].values[20] < lam[s].values[20]);
        }
    }

    #[test]
    fn open_beam_counts_have_mean_n0() {
        let n0 = 2e4 * 0.6;
        let lam = vec![Sinogram {
            n_views: 100,
            n_det: 100,
            values: vec![n0; 10_000],
        }];
        let c = sample_counts(&lam, 7).unwrap();
        let mean = c[0].values.iter().sum::<f64>() / 1e4;
        let sigma = (n0 / 1e4).sqrt();
        assert!((mean - n0).abs() < 3.0 * sigma);
        assert!(c[0].values.iter().all(|v| v.fract() == 0.0 && *v >= 0.0));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let lam = vec![
            Sinogram {
                n_views: 7,
                n_det: 9,
                values: (0..63).map(|i| 10.0 + i as f64).collect(),
            };
            2
        ];
        let a = sample_counts(&lam, 99).unwrap();
        let b = sample_counts(&lam, 99).unwrap();
        let c = sample_counts(&lam, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // bins draw from distinct streams
        assert_ne!(a[0].values, a[1].values);
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let d = serial.install(|| sample_counts(&lam, 99).unwrap());
        assert_eq!(a, d);
    }
}
