//! 2-D fan-beam geometry with a flat detector and an exact (Siddon-style)
//! ray-driven projector pair.
//!
//! Conventions:
//! - images are column-major `(rows, cols)` = `(n_h, n_w)`, row 0 at the top
//!   (largest y), column 0 at the left (smallest x); the isocenter sits at
//!   the image center;
//! - view `v` places the source at angle `2π v / n_views` (counterclockwise
//!   from +x) at distance `sod`; the detector is perpendicular to the
//!   central ray at distance `sdd` from the source;
//! - detector cell `k` is centred `(k - (n_det - 1)/2) * det_pitch` along
//!   `(-sin φ, cos φ)`;
//! - sinogram values are stored view-major, `values[v * n_det + k]`, and are
//!   sums of (intersection length in mm × pixel value).

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NlctfError, Result};

/// Number of view chunks used for back-projection. Fixed so the summation
/// order, and therefore the output bits, do not depend on the thread count.
const BACKPROJECT_CHUNKS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    /// Source to isocenter distance (mm).
    pub sod: f64,
    /// Source to detector distance (mm).
    pub sdd: f64,
    pub n_det: usize,
    /// Detector element pitch (mm).
    pub det_pitch: f64,
    /// Views equally spaced over a full rotation.
    pub n_views: usize,
    /// Image columns.
    pub n_w: usize,
    /// Image rows.
    pub n_h: usize,
    /// Pixel side (mm).
    pub pixel_size: f64,
    /// Rays traced per detector cell (their weights are averaged).
    #[serde(default = "one")]
    pub rays_per_cell: usize,
}

fn one() -> usize {
    1
}

impl FanBeamGeometry {
    /// Diameter of the circle seen by every view (mm).
    pub fn fov_diameter(&self) -> f64 {
        let half_fan = ((self.n_det as f64 * self.det_pitch / 2.0) / self.sdd).atan();
        2.0 * self.sod * half_fan.sin()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NlctfError::Config(m));
        if !(self.sod > 0.0 && self.sdd > self.sod && self.sdd.is_finite()) {
            return bad(format!("need sdd > sod > 0, got sdd={} sod={}", self.sdd, self.sod));
        }
        if self.n_det == 0 || self.n_views == 0 || self.n_w == 0 || self.n_h == 0 || self.rays_per_cell == 0 {
            return bad("geometry counts must be at least 1".into());
        }
        if !(self.det_pitch > 0.0 && self.pixel_size > 0.0) {
            return bad("det_pitch and pixel_size must be positive".into());
        }
        // The reconstruction circle is inscribed in the image square.
        let recon_diameter = self.pixel_size * self.n_w.min(self.n_h) as f64;
        if self.fov_diameter() + 1e-9 < recon_diameter {
            return bad(format!(
                "field of view {:.4} mm does not cover the {:.4} mm reconstruction circle",
                self.fov_diameter(),
                recon_diameter
            ));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.n_w * self.n_h
    }

    pub fn n_rays(&self) -> usize {
        self.n_views * self.n_det
    }

    /// Center of pixel `(row, col)` in mm.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = (col as f64 + 0.5 - self.n_w as f64 / 2.0) * self.pixel_size;
        let y = (self.n_h as f64 / 2.0 - row as f64 - 0.5) * self.pixel_size;
        (x, y)
    }

    /// Source position and the end point on the detector for one ray.
    pub fn ray(&self, view: usize, det: usize, sub: usize) -> ((f64, f64), (f64, f64)) {
        let phi = 2.0 * PI * view as f64 / self.n_views as f64;
        let (s, c) = phi.sin_cos();
        let src = (self.sod * c, self.sod * s);
        let center = (src.0 - self.sdd * c, src.1 - self.sdd * s);
        let offset = (det as f64 - (self.n_det as f64 - 1.0) / 2.0
            + (sub as f64 + 0.5) / self.rays_per_cell as f64
            - 0.5)
            * self.det_pitch;
        (src, (center.0 - offset * s, center.1 + offset * c))
    }
}

/// One channel of projection data.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub n_views: usize,
    pub n_det: usize,
    /// View-major: `values[view * n_det + det]`.
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(n_views: usize, n_det: usize) -> Self {
        Self {
            n_views,
            n_det,
            values: vec![0.0; n_views * n_det],
        }
    }

    pub fn for_geometry(geom: &FanBeamGeometry) -> Self {
        Self::zeros(geom.n_views, geom.n_det)
    }

    pub fn matches(&self, geom: &FanBeamGeometry) -> bool {
        self.n_views == geom.n_views && self.n_det == geom.n_det && self.values.len() == geom.n_rays()
    }
}

/// Walk the pixels crossed by the segment `p0 -> p1`, calling
/// `visit(pixel_index, length_mm)` for every non-empty intersection.
/// Pixel index is `row + n_h * col`.
pub fn trace_ray(geom: &FanBeamGeometry, p0: (f64, f64), p1: (f64, f64), mut visit: impl FnMut(usize, f64)) {
    let pix = geom.pixel_size;
    let half_w = geom.n_w as f64 * pix / 2.0;
    let half_h = geom.n_h as f64 * pix / 2.0;
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return;
    }

    let slab = |p: f64, d: f64, lo: f64, hi: f64| -> Option<(f64, f64)> {
        if d == 0.0 {
            if p <= lo || p >= hi {
                None
            } else {
                Some((f64::NEG_INFINITY, f64::INFINITY))
            }
        } else {
            let a = (lo - p) / d;
            let b = (hi - p) / d;
            Some((a.min(b), a.max(b)))
        }
    };
    let Some((ax0, ax1)) = slab(p0.0, dx, -half_w, half_w) else { return };
    let Some((ay0, ay1)) = slab(p0.1, dy, -half_h, half_h) else { return };
    let a_min = ax0.max(ay0).max(0.0);
    let a_max = ax1.min(ay1).min(1.0);
    if a_max <= a_min {
        return;
    }

    // Parametric position of the next vertical / horizontal grid line.
    let next_crossing = |p: f64, d: f64, lo: f64, a: f64| -> (f64, f64) {
        if d == 0.0 {
            return (f64::INFINITY, f64::INFINITY);
        }
        let step = pix / d.abs();
        let pos = (p + a * d - lo) / pix;
        let line = if d > 0.0 { pos.floor() + 1.0 } else { pos.ceil() - 1.0 };
        let mut next = (lo + line * pix - p) / d;
        if next <= a {
            next += step;
        }
        (next, step)
    };
    let (mut ax, step_x) = next_crossing(p0.0, dx, -half_w, a_min);
    let (mut ay, step_y) = next_crossing(p0.1, dy, -half_h, a_min);

    let (n_w, n_h) = (geom.n_w as isize, geom.n_h as isize);
    let mut a = a_min;
    while a < a_max {
        let a_next = ax.min(ay).min(a_max);
        if a_next > a {
            let mid = 0.5 * (a + a_next);
            let x = p0.0 + mid * dx;
            let y = p0.1 + mid * dy;
            let col = (((x + half_w) / pix).floor() as isize).clamp(0, n_w - 1) as usize;
            let row = (((half_h - y) / pix).floor() as isize).clamp(0, n_h - 1) as usize;
            visit(row + geom.n_h * col, (a_next - a) * len);
        }
        if ax <= a_next {
            ax += step_x;
        }
        if ay <= a_next {
            ay += step_y;
        }
        a = a_next;
    }
}

fn check_image(image: &[f64], geom: &FanBeamGeometry) -> Result<()> {
    if image.len() != geom.n_pixels() {
        return Err(NlctfError::Dimension(format!(
            "image has {} pixels, geometry expects {}x{}",
            image.len(),
            geom.n_h,
            geom.n_w
        )));
    }
    Ok(())
}

fn check_sino(sino: &Sinogram, geom: &FanBeamGeometry) -> Result<()> {
    if !sino.matches(geom) {
        return Err(NlctfError::Dimension(format!(
            "sinogram {}x{} vs geometry {}x{}",
            sino.n_views, sino.n_det, geom.n_views, geom.n_det
        )));
    }
    Ok(())
}

/// Project several images (all on `geom`'s grid) with one ray traversal.
pub fn forward_project_many(images: &[&[f64]], geom: &FanBeamGeometry) -> Result<Vec<Sinogram>> {
    geom.validate()?;
    for img in images {
        check_image(img, geom)?;
    }
    let n = images.len();
    let n_det = geom.n_det;
    let weight = 1.0 / geom.rays_per_cell as f64;
    // rows[v] holds view v for every image: [image][det]
    let rows: Vec<Vec<f64>> = (0..geom.n_views)
        .into_par_iter()
        .map(|v| {
            let mut out = vec![0.0; n * n_det];
            for k in 0..n_det {
                for sub in 0..geom.rays_per_cell {
                    let (p0, p1) = geom.ray(v, k, sub);
                    trace_ray(geom, p0, p1, |p, l| {
                        let wl = weight * l;
                        for (i, img) in images.iter().enumerate() {
                            out[i * n_det + k] += wl * img[p];
                        }
                    });
                }
            }
            out
        })
        .collect();
    let mut sinos: Vec<Sinogram> = (0..n).map(|_| Sinogram::for_geometry(geom)).collect();
    for (v, row) in rows.iter().enumerate() {
        for (i, s) in sinos.iter_mut().enumerate() {
            s.values[v * n_det..(v + 1) * n_det].copy_from_slice(&row[i * n_det..(i + 1) * n_det]);
        }
    }
    Ok(sinos)
}

/// Fan-beam forward projection of one image.
pub fn forward_project(image: &[f64], geom: &FanBeamGeometry) -> Result<Sinogram> {
    Ok(forward_project_many(&[image], geom)?.remove(0))
}

/// Exact adjoint of [`forward_project_many`].
pub fn back_project_many(sinos: &[&Sinogram], geom: &FanBeamGeometry) -> Result<Vec<Vec<f64>>> {
    geom.validate()?;
    for s in sinos {
        check_sino(s, geom)?;
    }
    let n = sinos.len();
    let np = geom.n_pixels();
    let n_det = geom.n_det;
    let weight = 1.0 / geom.rays_per_cell as f64;
    let chunk = geom.n_views.div_ceil(BACKPROJECT_CHUNKS);
    let partials: Vec<Vec<f64>> = (0..BACKPROJECT_CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut buf = vec![0.0; n * np];
            let lo = (c * chunk).min(geom.n_views);
            let hi = ((c + 1) * chunk).min(geom.n_views);
            let mut vals = vec![0.0; n];
            for v in lo..hi {
                for k in 0..n_det {
                    for (i, s) in sinos.iter().enumerate() {
                        vals[i] = weight * s.values[v * n_det + k];
                    }
                    if vals.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    for sub in 0..geom.rays_per_cell {
                        let (p0, p1) = geom.ray(v, k, sub);
                        trace_ray(geom, p0, p1, |p, l| {
                            for (i, &y) in vals.iter().enumerate() {
                                buf[i * np + p] += l * y;
                            }
                        });
                    }
                }
            }
            buf
        })
        .collect();
    let mut out = vec![vec![0.0; np]; n];
    for buf in &partials {
        for (i, img) in out.iter_mut().enumerate() {
            for (d, s) in img.iter_mut().zip(&buf[i * np..(i + 1) * np]) {
                *d += s;
            }
        }
    }
    Ok(out)
}

/// Fan-beam back-projection (transpose of [`forward_project`]).
pub fn back_project(sino: &Sinogram, geom: &FanBeamGeometry) -> Result<Vec<f64>> {
    Ok(back_project_many(&[sino], geom)?.remove(0))
}

/// Row and column sums of the system matrix.
#[derive(Debug, Clone)]
pub struct SartNormalizers {
    /// Per ray: total intersection length (view-major).
    pub row_sums: Vec<f64>,
    /// Per pixel: total length over all rays.
    pub col_sums: Vec<f64>,
}

impl SartNormalizers {
    /// Pixels never crossed by any ray.
    pub fn masked_pixels(&self) -> usize {
        self.col_sums.iter().filter(|&&v| v == 0.0).count()
    }
}

pub fn sart_normalizers(geom: &FanBeamGeometry) -> Result<SartNormalizers> {
    let ones_img = vec![1.0; geom.n_pixels()];
    let row_sums = forward_project(&ones_img, geom)?.values;
    let mut ones_sino = Sinogram::for_geometry(geom);
    ones_sino.values.iter_mut().for_each(|v| *v = 1.0);
    let col_sums = back_project(&ones_sino, geom)?;
    Ok(SartNormalizers { row_sums, col_sums })
}
