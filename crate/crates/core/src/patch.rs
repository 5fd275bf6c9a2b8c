//! Non-local cube construction: patch grid, block matching, cube extraction
//! and scatter-add aggregation.
//!
//! A spectral volume is a [`Tensor3`] with dims `(rows, cols, channels)`.
//! A cube gathered around a reference patch has dims
//! `(patch_h * patch_w, channels, matches + 1)`; inside a patch the row index
//! varies fastest, and slab 0 always holds the reference patch.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NlctfError, Result};
use crate::tensor::Tensor3;

/// Patch grid and matching parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGridSpec {
    /// Patch width in pixels (columns).
    pub patch_w: usize,
    /// Patch height in pixels (rows).
    pub patch_h: usize,
    /// Step between reference patches.
    pub stride: usize,
    /// Side of the square search window, in pixels.
    pub search_window: usize,
    /// Number of similar patches gathered per reference.
    pub neighbors: usize,
}

impl Default for PatchGridSpec {
    fn default() -> Self {
        Self {
            patch_w: 6,
            patch_h: 6,
            stride: 2,
            search_window: 80,
            neighbors: 50,
        }
    }
}

impl PatchGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_w < 2 || self.patch_h < 2 {
            return Err(NlctfError::Config(format!(
                "patch must be at least 2x2, got {}x{}",
                self.patch_h, self.patch_w
            )));
        }
        if self.stride < 1 {
            return Err(NlctfError::Config("stride must be at least 1".into()));
        }
        if self.neighbors < 1 {
            return Err(NlctfError::Config("neighbors must be at least 1".into()));
        }
        if self.search_window < self.patch_w.max(self.patch_h) {
            return Err(NlctfError::Config(format!(
                "search_window {} smaller than patch {}x{}",
                self.search_window, self.patch_h, self.patch_w
            )));
        }
        Ok(())
    }

    /// Number of pixels in one patch.
    pub fn patch_len(&self) -> usize {
        self.patch_w * self.patch_h
    }
}

/// Top-left corner of a patch.
pub type PatchPos = (usize, usize);

/// Result of block matching for one reference patch.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub reference_pos: PatchPos,
    /// Matched positions, most similar first.
    pub neighbor_pos: Vec<PatchPos>,
    /// Squared distances to the reference, non-decreasing.
    pub distances: Vec<f64>,
}

impl MatchSet {
    /// All positions in slab order: reference first, then the neighbors.
    pub fn positions(&self) -> impl Iterator<Item = PatchPos> + '_ {
        std::iter::once(self.reference_pos).chain(self.neighbor_pos.iter().copied())
    }

    /// Number of slabs in the assembled cube.
    pub fn slab_count(&self) -> usize {
        self.neighbor_pos.len() + 1
    }

    /// Whether two match sets gather the same patches (order ignored).
    pub fn same_members(&self, other: &MatchSet) -> bool {
        if self.reference_pos != other.reference_pos || self.neighbor_pos.len() != other.neighbor_pos.len() {
            return false;
        }
        let mut a = self.neighbor_pos.clone();
        let mut b = other.neighbor_pos.clone();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

/// A cube gathered from a volume together with where it came from.
#[derive(Debug, Clone)]
pub struct CubeStack {
    pub data: Tensor3,
    pub origin: MatchSet,
    /// Volume normalization in force when the cube was extracted.
    pub scale: f64,
}

fn axis_positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    // Only guarantee full coverage when patches overlap or abut.
    if stride <= patch && *out.last().expect("non-empty") != last {
        out.push(last);
    }
    out
}

/// Reference patch positions in raster order (row-major over `(row, col)`).
pub fn build_grid(rows: usize, cols: usize, spec: &PatchGridSpec) -> Result<Vec<PatchPos>> {
    spec.validate()?;
    if spec.patch_h > rows || spec.patch_w > cols {
        return Err(NlctfError::Config(format!(
            "patch {}x{} larger than image {rows}x{cols}",
            spec.patch_h, spec.patch_w
        )));
    }
    let rs = axis_positions(rows, spec.patch_h, spec.stride);
    let cs = axis_positions(cols, spec.patch_w, spec.stride);
    Ok(rs.iter().flat_map(|&r| cs.iter().map(move |&c| (r, c))).collect())
}

/// Inclusive range of top-left positions whose patch lies inside the search
/// window centred on the patch at `pos`, clipped to the image.
fn window_range(pos: usize, len: usize, patch: usize, window: usize) -> (usize, usize) {
    let slack = window - patch;
    let lo = slack / 2;
    let hi = slack - lo;
    (pos.saturating_sub(lo), (pos + hi).min(len - patch))
}

fn patch_distance(volume: &Tensor3, a: PatchPos, b: PatchPos, spec: &PatchGridSpec, bound: f64) -> f64 {
    let [rows, cols, channels] = volume.dims();
    let data = volume.data();
    let plane = rows * cols;
    let mut acc = 0.0;
    for s in 0..channels {
        for dc in 0..spec.patch_w {
            let ia = s * plane + (a.1 + dc) * rows + a.0;
            let ib = s * plane + (b.1 + dc) * rows + b.0;
            let ca = &data[ia..ia + spec.patch_h];
            let cb = &data[ib..ib + spec.patch_h];
            for (x, y) in ca.iter().zip(cb) {
                let d = x - y;
                acc += d * d;
            }
        }
        if acc > bound {
            return acc;
        }
    }
    acc
}

/// Find the `spec.neighbors` patches most similar to the one at `reference`
/// (squared Euclidean distance over all channels), excluding the reference.
/// Ties are broken by raster order. Fewer matches are returned when the
/// window holds fewer candidates.
pub fn match_patches(volume: &Tensor3, reference: PatchPos, spec: &PatchGridSpec) -> Result<MatchSet> {
    let [rows, cols, _] = volume.dims();
    if reference.0 + spec.patch_h > rows || reference.1 + spec.patch_w > cols {
        return Err(NlctfError::Dimension(format!(
            "reference {reference:?} outside {rows}x{cols} image"
        )));
    }
    let (r0, r1) = window_range(reference.0, rows, spec.patch_h, spec.search_window);
    let (c0, c1) = window_range(reference.1, cols, spec.patch_w, spec.search_window);
    let t = spec.neighbors;

    // Keep the t best (distance, raster position) pairs in sorted order.
    let mut best: Vec<(f64, PatchPos)> = Vec::with_capacity(t + 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if (r, c) == reference {
                continue;
            }
            let bound = if best.len() == t { best[t - 1].0 } else { f64::INFINITY };
            let d = patch_distance(volume, reference, (r, c), spec, bound);
            if best.len() == t && d >= bound {
                // Candidates arrive in raster order, so an equal distance
                // loses the tie against the one already kept.
                continue;
            }
            let at = best.partition_point(|&(bd, bp)| match bd.total_cmp(&d) {
                Ordering::Less => true,
                Ordering::Equal => bp < (r, c),
                Ordering::Greater => false,
            });
            best.insert(at, (d, (r, c)));
            best.truncate(t);
        }
    }
    Ok(MatchSet {
        reference_pos: reference,
        neighbor_pos: best.iter().map(|&(_, p)| p).collect(),
        distances: best.iter().map(|&(d, _)| d).collect(),
    })
}

/// Block matching for every reference position, in parallel.
pub fn match_all(volume: &Tensor3, refs: &[PatchPos], spec: &PatchGridSpec) -> Result<Vec<MatchSet>> {
    refs.par_iter().map(|&p| match_patches(volume, p, spec)).collect()
}

/// Gather the matched patches of `volume` into a cube.
pub fn extract_cube(volume: &Tensor3, matches: &MatchSet, spec: &PatchGridSpec, scale: f64) -> Result<CubeStack> {
    let [rows, cols, channels] = volume.dims();
    let plen = spec.patch_len();
    let slabs = matches.slab_count();
    let mut cube = Tensor3::zeros([plen, channels, slabs]);
    let src = volume.data();
    let dst = cube.data_mut();
    for (j, (pr, pc)) in matches.positions().enumerate() {
        if pr + spec.patch_h > rows || pc + spec.patch_w > cols {
            return Err(NlctfError::Dimension(format!(
                "patch at ({pr}, {pc}) outside {rows}x{cols} image"
            )));
        }
        for s in 0..channels {
            let base = (j * channels + s) * plen;
            for dc in 0..spec.patch_w {
                let from = s * rows * cols + (pc + dc) * rows + pr;
                let to = base + dc * spec.patch_h;
                dst[to..to + spec.patch_h].copy_from_slice(&src[from..from + spec.patch_h]);
            }
        }
    }
    Ok(CubeStack {
        data: cube,
        origin: matches.clone(),
        scale,
    })
}

/// Scatter-added patches and per-pixel contribution counts.
#[derive(Debug, Clone)]
pub struct Aggregate {
    /// Sum of all scattered values, dims `(rows, cols, channels)`.
    pub sum: Tensor3,
    /// Number of patches covering each pixel, column-major `(rows, cols)`.
    /// Every patch spans all channels, so the count is channel independent.
    pub counts: Vec<u32>,
}

impl Aggregate {
    pub fn count(&self, row: usize, col: usize) -> u32 {
        self.counts[row + self.sum.dims()[0] * col]
    }

    /// `sum / count`, with zero where nothing was scattered.
    pub fn averaged(&self) -> Tensor3 {
        let [rows, cols, channels] = self.sum.dims();
        let plane = rows * cols;
        let mut out = self.sum.clone();
        let data = out.data_mut();
        for s in 0..channels {
            for (p, &n) in self.counts.iter().enumerate() {
                let v = &mut data[s * plane + p];
                *v = if n == 0 { 0.0 } else { *v / f64::from(n) };
            }
        }
        out
    }
}

fn cube_order(a: &(&Tensor3, &MatchSet), b: &(&Tensor3, &MatchSet)) -> Ordering {
    a.1.reference_pos
        .cmp(&b.1.reference_pos)
        .then_with(|| a.1.neighbor_pos.cmp(&b.1.neighbor_pos))
        .then_with(|| {
            a.0.data()
                .iter()
                .zip(b.0.data())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Scatter-add cube contents back into a `(rows, cols, channels)` volume.
///
/// Cubes are accumulated in a canonical order (by origin, then content) so
/// the output does not depend on the order of `cubes`.
pub fn aggregate(
    cubes: &[(&Tensor3, &MatchSet)],
    rows: usize,
    cols: usize,
    channels: usize,
    spec: &PatchGridSpec,
) -> Result<Aggregate> {
    let plen = spec.patch_len();
    let mut order: Vec<&(&Tensor3, &MatchSet)> = cubes.iter().collect();
    order.sort_by(|a, b| cube_order(a, b));

    let mut sum = Tensor3::zeros([rows, cols, channels]);
    let mut counts = vec![0u32; rows * cols];
    let plane = rows * cols;
    for (cube, matches) in order {
        let want = [plen, channels, matches.slab_count()];
        if cube.dims() != want {
            return Err(NlctfError::Dimension(format!(
                "cube dims {:?}, expected {want:?}",
                cube.dims()
            )));
        }
        let src = cube.data();
        for (j, (pr, pc)) in matches.positions().enumerate() {
            if pr + spec.patch_h > rows || pc + spec.patch_w > cols {
                return Err(NlctfError::Dimension(format!(
                    "patch at ({pr}, {pc}) outside {rows}x{cols} image"
                )));
            }
            for dc in 0..spec.patch_w {
                let col0 = (pc + dc) * rows + pr;
                for n in &mut counts[col0..col0 + spec.patch_h] {
                    *n += 1;
                }
            }
            let dst = sum.data_mut();
            for s in 0..channels {
                let base = (j * channels + s) * plen;
                for dc in 0..spec.patch_w {
                    let to = s * plane + (pc + dc) * rows + pr;
                    let from = base + dc * spec.patch_h;
                    for (d, v) in dst[to..to + spec.patch_h].iter_mut().zip(&src[from..from + spec.patch_h]) {
                        *d += v;
                    }
                }
            }
        }
    }
    Ok(Aggregate { sum, counts })
}

/// Scale a volume into `[0, 1]`.
///
/// The scale is the smallest power of two not below the global maximum, so
/// that [`denormalize`] inverts the division bit-for-bit. Volumes without a
/// positive entry keep scale 1.
pub fn normalize(volume: &Tensor3) -> (Tensor3, f64) {
    let max = volume.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return (volume.clone(), 1.0);
    }
    let scale = 2f64.powi(max.log2().ceil() as i32);
    let scale = if scale < max { scale * 2.0 } else { scale };
    (volume.map(|v| v / scale), scale)
}

pub fn denormalize(tensor: &Tensor3, scale: f64) -> Tensor3 {
    tensor.map(|v| v * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(patch: usize, stride: usize, window: usize, t: usize) -> PatchGridSpec {
        PatchGridSpec {
            patch_w: patch,
            patch_h: patch,
            stride,
            search_window: window,
            neighbors: t,
        }
    }

    fn random_volume(rng: &mut impl Rng, dims: [usize; 3]) -> Tensor3 {
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0))
    }

    /// Exhaustive oracle: every position of the image, kept when the whole
    /// patch lies inside the W-pixel window that starts floor((W - p) / 2)
    /// pixels before the reference, sorted by (distance, raster position).
    fn brute_force(volume: &Tensor3, reference: PatchPos, sp: &PatchGridSpec) -> Vec<(f64, PatchPos)> {
        let [rows, cols, ch] = volume.dims();
        let p = sp.patch_h;
        let w = sp.search_window as isize;
        let start = |refp: usize| refp as isize - ((sp.search_window - p) / 2) as isize;
        let inside = |pos: usize, refp: usize| pos as isize >= start(refp) && pos as isize + p as isize <= start(refp) + w;
        let mut all = Vec::new();
        for r in 0..=rows - p {
            for c in 0..=cols - p {
                if (r, c) == reference || !inside(r, reference.0) || !inside(c, reference.1) {
                    continue;
                }
                let mut d = 0.0;
                for s in 0..ch {
                    for dc in 0..p {
                        for dr in 0..p {
                            let x = volume.get(reference.0 + dr, reference.1 + dc, s) - volume.get(r + dr, c + dc, s);
                            d += x * x;
                        }
                    }
                }
                all.push((d, (r, c)));
            }
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(sp.neighbors);
        all
    }

    #[test]
    fn grid_counts_and_last_valid_inclusion() {
        assert_eq!(build_grid(512, 512, &spec(6, 1, 80, 50)).unwrap().len(), 507 * 507);
        assert_eq!(
            build_grid(8, 8, &spec(6, 4, 8, 1)).unwrap(),
            vec![(0, 0), (0, 2), (2, 0), (2, 2)]
        );
        assert_eq!(build_grid(8, 8, &spec(6, 9, 8, 1)).unwrap(), vec![(0, 0)]);
        assert!(matches!(build_grid(4, 8, &spec(6, 1, 8, 1)), Err(NlctfError::Config(_))));
    }

    #[test]
    fn constant_volume_ties_break_in_raster_order() {
        let v = Tensor3::from_fn([12, 12, 2], |_, _, _| 0.5);
        let sp = spec(3, 1, 7, 5);
        let m = match_patches(&v, (4, 4), &sp).unwrap();
        assert_eq!(m.distances, vec![0.0; 5]);
        assert_eq!(m.neighbor_pos, vec![(2, 2), (2, 3), (2, 4), (2, 5), (2, 6)]);
    }

    #[test]
    fn exact_copy_is_first_neighbor() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut v = random_volume(&mut rng, [16, 16, 2]);
        for s in 0..2 {
            for dr in 0..4 {
                for dc in 0..4 {
                    let x = v.get(3 + dr, 5 + dc, s);
                    v.set(9 + dr, 8 + dc, s, x);
                }
            }
        }
        let m = match_patches(&v, (3, 5), &spec(4, 1, 16, 3)).unwrap();
        assert_eq!(m.neighbor_pos[0], (9, 8));
        assert_eq!(m.distances[0], 0.0);
    }

    #[test]
    fn matching_equals_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let v = random_volume(&mut rng, [20, 20, 2]);
        let sp = spec(4, 1, 12, 3);
        for reference in [(0, 0), (7, 9), (16, 16), (3, 15)] {
            let m = match_patches(&v, reference, &sp).unwrap();
            let want = brute_force(&v, reference, &sp);
            assert_eq!(m.neighbor_pos, want.iter().map(|x| x.1).collect::<Vec<_>>());
            assert!(m.distances.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn tiny_window_returns_what_exists() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let v = random_volume(&mut rng, [5, 5, 1]);
        let m = match_patches(&v, (0, 0), &spec(4, 1, 5, 10)).unwrap();
        assert_eq!(m.neighbor_pos.len(), 3);
    }

    #[test]
    fn extract_single_patch_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let v = random_volume(&mut rng, [6, 6, 8]);
        let m = MatchSet {
            reference_pos: (0, 0),
            neighbor_pos: vec![],
            distances: vec![],
        };
        let cube = extract_cube(&v, &m, &spec(6, 1, 6, 1), 1.0).unwrap();
        assert_eq!(cube.data.dims(), [36, 8, 1]);
        assert_eq!(cube.data.data(), v.data());
    }

    #[test]
    fn distinct_patches_give_distinct_slabs() {
        let v = Tensor3::from_fn([4, 8, 1], |_, c, _| if c < 4 { 1.0 } else { 2.0 });
        let m = MatchSet {
            reference_pos: (0, 0),
            neighbor_pos: vec![(0, 4)],
            distances: vec![16.0],
        };
        let cube = extract_cube(&v, &m, &spec(4, 1, 8, 1), 1.0).unwrap();
        assert!(cube.data.slice3(0).iter().all(|&x| x == 1.0));
        assert!(cube.data.slice3(1).iter().all(|&x| x == 2.0));
    }

    #[test]
    fn extract_then_aggregate_is_identity_on_covered_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let v = random_volume(&mut rng, [14, 11, 3]);
        let sp = spec(4, 2, 8, 4);
        let refs = build_grid(14, 11, &sp).unwrap();
        let sets = match_all(&v, &refs, &sp).unwrap();
        let cubes: Vec<CubeStack> = sets.iter().map(|m| extract_cube(&v, m, &sp, 1.0).unwrap()).collect();
        let pairs: Vec<(&Tensor3, &MatchSet)> = cubes.iter().map(|c| (&c.data, &c.origin)).collect();
        let agg = aggregate(&pairs, 14, 11, 3, &sp).unwrap();
        let avg = agg.averaged();
        for r in 0..14 {
            for c in 0..11 {
                assert!(agg.count(r, c) >= 1);
                for s in 0..3 {
                    // sum-then-divide of repeated copies is exact up to rounding
                    let (a, b) = (avg.get(r, c, s), v.get(r, c, s));
                    assert!((a - b).abs() <= 1e-14 * b.abs(), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn overlap_counts_match_hand_count() {
        // One 3x3 reference at (0,0) matched with itself shifted by one column.
        let sp = spec(3, 1, 4, 1);
        let cube = Tensor3::from_fn([9, 1, 2], |_, _, _| 1.0);
        let m = MatchSet {
            reference_pos: (0, 0),
            neighbor_pos: vec![(0, 1)],
            distances: vec![0.0],
        };
        let agg = aggregate(&[(&cube, &m)], 3, 4, 1, &sp).unwrap();
        for r in 0..3 {
            assert_eq!(
                (0..4).map(|c| agg.count(r, c)).collect::<Vec<_>>(),
                vec![1, 2, 2, 1]
            );
            assert_eq!(agg.sum.get(r, 1, 0), 2.0);
        }
    }

    #[test]
    fn empty_aggregate_is_zero() {
        let agg = aggregate(&[], 5, 4, 2, &spec(2, 1, 4, 1)).unwrap();
        assert!(agg.sum.data().iter().all(|&v| v == 0.0));
        assert!(agg.counts.iter().all(|&n| n == 0));
        assert!(agg.averaged().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_rejects_mismatched_cube() {
        let m = MatchSet {
            reference_pos: (0, 0),
            neighbor_pos: vec![],
            distances: vec![],
        };
        let bad = Tensor3::zeros([5, 1, 1]);
        assert!(matches!(
            aggregate(&[(&bad, &m)], 4, 4, 1, &spec(2, 1, 4, 1)),
            Err(NlctfError::Dimension(_))
        ));
    }

    #[test]
    fn normalization_rules() {
        let v = Tensor3::from_vec([2, 2, 1], vec![0.0, 1.0, 4.0, 2.5]).unwrap();
        let (n, s) = normalize(&v);
        assert_eq!(s, 4.0);
        assert!(n.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let z = Tensor3::zeros([2, 2, 1]);
        let (nz, sz) = normalize(&z);
        assert_eq!((sz, nz), (1.0, z));
    }

    proptest! {
        #[test]
        fn normalize_roundtrip_is_exact(seed in any::<u64>(), amp in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Tensor3::from_fn([5, 4, 3], |_, _, _| amp * rng.random_range(0.0..1.0));
            let (n, s) = normalize(&v);
            prop_assert!(n.data().iter().all(|&x| x <= 1.0));
            prop_assert_eq!(denormalize(&n, s), v);
        }

        #[test]
        fn aggregate_is_order_independent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sp = spec(3, 2, 7, 3);
            let v = random_volume(&mut rng, [10, 9, 2]);
            let refs = build_grid(10, 9, &sp).unwrap();
            let sets = match_all(&v, &refs, &sp).unwrap();
            let cubes: Vec<Tensor3> = sets
                .iter()
                .map(|m| {
                    let mut c = extract_cube(&v, m, &sp, 1.0).unwrap().data;
                    c.data_mut().iter_mut().for_each(|x| *x *= rng.random_range(0.5..1.5));
                    c
                })
                .collect();
            let mut pairs: Vec<(&Tensor3, &MatchSet)> = cubes.iter().zip(&sets).collect();
            let a = aggregate(&pairs, 10, 9, 2, &sp).unwrap();
            pairs.reverse();
            let mid = pairs.len() / 2;
            pairs.swap(0, mid);
            let b = aggregate(&pairs, 10, 9, 2, &sp).unwrap();
            prop_assert_eq!(a.sum, b.sum);
            prop_assert_eq!(a.counts, b.counts);
        }
    }
}
