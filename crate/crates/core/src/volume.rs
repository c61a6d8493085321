//! Scalar volumes on regular voxel grids.
//!
//! Voxel data is stored x-fastest, then y, then z. Physical position of
//! voxel `(i, j, k)` is `(i*sx, j*sy, k*sz)`; orientation is not modelled.
//! Out-of-bounds sampling clamps to the border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::Stencil;

/// Voxel counts and millimetre spacing of a 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    dims: [usize; 3],
    spacing: [f32; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::Geometry(format!(
                "every axis needs at least 2 voxels, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spaced grid.
    pub fn isotropic(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Same voxel counts; spacing is allowed to differ.
    pub fn same_shape(&self, other: &GridGeometry) -> bool {
        self.dims == other.dims
    }
}

/// A scalar image. Values are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    geometry: GridGeometry,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFinite(format!("{bad} voxel values")));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: GridGeometry, value: f32) -> Self {
        Self {
            geometry,
            data: vec![value; geometry.len()],
        }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        geometry: GridGeometry,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims();
        let mut data = Vec::with_capacity(geometry.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(geometry, data)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geometry.index(i, j, k)]
    }

    /// Trilinear sample at a continuous voxel coordinate, edge-clamped.
    pub fn sample(&self, pos: [f64; 3]) -> f32 {
        Stencil::new(self.geometry.dims(), pos).apply(&self.data) as f32
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Standalone form of [`Volume3::sample`].
pub fn sample_trilinear(vol: &Volume3, pos: [f64; 3]) -> f32 {
    vol.sample(pos)
}

/// Result of an intensity normalisation.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub volume: Volume3,
    /// Set when the intensity range collapsed and the output is all zeros.
    pub degenerate: bool,
}

/// Quantile with linear interpolation between order statistics,
/// rank `q * (n - 1)`. `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f32], q: f64) -> f64 {
    let n = sorted.len();
    let rank = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

pub const MRI_LOW_QUANTILE: f64 = 0.0001;
pub const MRI_HIGH_QUANTILE: f64 = 0.999;

fn rescale(vol: &Volume3, lo: f64, hi: f64, what: &str) -> Normalized {
    if !(hi > lo) {
        log::warn!("{what}: degenerate intensity range [{lo}, {hi}], output set to zero");
        return Normalized {
            volume: Volume3::filled(*vol.geometry(), 0.0),
            degenerate: true,
        };
    }
    let scale = 1.0 / (hi - lo);
    let data = vol
        .data()
        .iter()
        .map(|&v| ((v as f64).clamp(lo, hi) - lo) * scale)
        .map(|v| v as f32)
        .collect();
    Normalized {
        volume: Volume3 {
            geometry: *vol.geometry(),
            data,
        },
        degenerate: false,
    }
}

/// MRI normalisation: clip to the 0.01th/99.9th percentiles, then map to [0, 1].
pub fn preprocess_mri(vol: &Volume3) -> Normalized {
    let mut sorted = vol.data().to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = quantile_sorted(&sorted, MRI_LOW_QUANTILE);
    let hi = quantile_sorted(&sorted, MRI_HIGH_QUANTILE);
    rescale(vol, lo, hi, "preprocess_mri")
}

/// CT normalisation: plain min-max scaling to [0, 1].
pub fn preprocess_ct(vol: &Volume3) -> Normalized {
    let (lo, hi) = vol.min_max();
    rescale(vol, lo as f64, hi as f64, "preprocess_ct")
}

/// Resamples onto `target` by mapping each target voxel through physical
/// space into source voxel coordinates.
pub fn resample(vol: &Volume3, target: &GridGeometry) -> Volume3 {
    if vol.geometry() == target {
        return vol.clone();
    }
    let src = vol.geometry().spacing();
    let dst = target.spacing();
    let ratio = [
        dst[0] as f64 / src[0] as f64,
        dst[1] as f64 / src[1] as f64,
        dst[2] as f64 / src[2] as f64,
    ];
    let [nx, ny, nz] = target.dims();
    let mut data = Vec::with_capacity(target.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let pos = [
                    i as f64 * ratio[0],
                    j as f64 * ratio[1],
                    k as f64 * ratio[2],
                ];
                data.push(vol.sample(pos));
            }
        }
    }
    Volume3 {
        geometry: *target,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(dims: [usize; 3]) -> GridGeometry {
        GridGeometry::isotropic(dims).unwrap()
    }

    #[test]
    fn rejects_bad_geometry_and_data() {
        assert!(GridGeometry::new([1, 4, 4], [1.0; 3]).is_err());
        assert!(GridGeometry::new([4, 4, 4], [1.0, 0.0, 1.0]).is_err());
        assert!(Volume3::new(geom([2, 2, 2]), vec![0.0; 7]).is_err());
        let mut d = vec![0.0; 8];
        d[3] = f32::NAN;
        assert!(matches!(
            Volume3::new(geom([2, 2, 2]), d),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn mri_percentiles_on_integer_ramp() {
        // order statistic k of 0..9999 is k itself, so the quantiles are the ranks
        let g = GridGeometry::isotropic([100, 10, 10]).unwrap();
        let vol = Volume3::new(g, (0..10_000).map(|v| v as f32).collect()).unwrap();
        let lo = MRI_LOW_QUANTILE * 9999.0;
        let hi = MRI_HIGH_QUANTILE * 9999.0;
        let out = preprocess_mri(&vol);
        assert!(!out.degenerate);
        for (v, o) in vol.data().iter().zip(out.volume.data()) {
            let expect = ((*v as f64).clamp(lo, hi) - lo) / (hi - lo);
            assert!((expect - *o as f64).abs() < 1e-6);
        }
        let inside = out
            .volume
            .data()
            .iter()
            .filter(|&&v| v > 0.0 && v < 1.0)
            .count();
        assert!(inside as f64 >= 0.998 * 10_000.0, "inside = {inside}");
        let (mn, mx) = out.volume.min_max();
        assert_eq!((mn, mx), (0.0, 1.0));
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let vol = Volume3::filled(geom([3, 3, 3]), 7.0);
        for out in [preprocess_mri(&vol), preprocess_ct(&vol)] {
            assert!(out.degenerate);
            assert!(out.volume.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ct_min_max() {
        let g = geom([3, 2, 2]);
        let base = [-1000.0, 0.0, 1000.0];
        let vol = Volume3::from_fn(g, |i, _, _| base[i]).unwrap();
        let out = preprocess_ct(&vol).volume;
        assert_eq!(&out.data()[..3], &[0.0, 0.5, 1.0]);

        let base = [3.0, 5.0, 9.0];
        let vol = Volume3::from_fn(g, |i, _, _| base[i]).unwrap();
        let out = preprocess_ct(&vol).volume;
        assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-7);
        assert_eq!(out.data()[2], 1.0);
    }

    #[test]
    fn mri_unit_range_is_linear_and_order_preserving() {
        // 2% of voxels sit at each extreme, so the percentile cut is inactive
        let g = geom([10, 10, 10]);
        let vol = Volume3::from_fn(g, |i, j, k| {
            let idx = i + 10 * (j + 10 * k);
            match idx {
                0..=19 => 0.0,
                980.. => 1.0,
                _ => 0.5 + 0.4 * ((idx as f32) * 0.01).sin(),
            }
        })
        .unwrap();
        let out = preprocess_mri(&vol).volume;
        for (a, b) in vol.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn trilinear_nodes_midpoints_and_clamp() {
        let g = geom([3, 3, 3]);
        let vol = Volume3::from_fn(g, |i, j, k| (i * 100 + j * 10 + k) as f32).unwrap();
        assert_eq!(vol.sample([2.0, 1.0, 0.0]), 210.0);
        assert_eq!(vol.sample([-5.0, -5.0, -5.0]), vol.get(0, 0, 0));
        assert_eq!(vol.sample([9.0, 9.0, 9.0]), vol.get(2, 2, 2));

        let vol = Volume3::from_fn(geom([2, 2, 2]), |i, _, _| i as f32).unwrap();
        assert_eq!(sample_trilinear(&vol, [0.5, 0.0, 0.0]), 0.5);
    }

    #[test]
    fn identity_and_constant_resample() {
        let g = geom([5, 4, 3]);
        let vol = Volume3::from_fn(g, |i, j, k| (i * j + k) as f32).unwrap();
        assert_eq!(resample(&vol, &g), vol);

        let c = Volume3::filled(g, 2.5);
        let t = GridGeometry::new([7, 3, 9], [0.7, 1.3, 0.4]).unwrap();
        let r = resample(&c, &t);
        assert_eq!(r.geometry(), &t);
        assert!(r.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn ramp_resampled_to_half_spacing() {
        let n = 6;
        let vol = Volume3::from_fn(geom([n, 2, 2]), |i, _, _| i as f32).unwrap();
        let target = GridGeometry::new([2 * n - 1, 2, 2], [0.5, 1.0, 1.0]).unwrap();
        let r = resample(&vol, &target);
        for i in 0..2 * n - 1 {
            assert!((r.get(i, 1, 1) - 0.5 * i as f32).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn trilinear_exact_on_affine(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, d in -5.0f64..5.0,
            x in 0.0f64..5.0, y in 0.0f64..4.0, z in 0.0f64..3.0,
        ) {
            let g = geom([6, 5, 4]);
            let vol = Volume3::from_fn(g, |i, j, k| (a * i as f64 + b * j as f64 + c * k as f64 + d) as f32).unwrap();
            let expect = a * x + b * y + c * z + d;
            let got = vol.sample([x, y, z]) as f64;
            let scale = expect.abs().max(1.0);
            prop_assert!((got - expect).abs() / scale < 1e-6);
        }

        #[test]
        fn ct_idempotent(vals in proptest::collection::vec(-100.0f32..100.0, 8)) {
            let vol = Volume3::new(geom([2, 2, 2]), vals).unwrap();
            let once = preprocess_ct(&vol);
            prop_assume!(!once.degenerate);
            let twice = preprocess_ct(&once.volume).volume;
            for (a, b) in once.volume.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn coarse_round_trip_keeps_constants(v in -10.0f32..10.0) {
            let g = GridGeometry::new([9, 9, 9], [1.0; 3]).unwrap();
            let coarse = GridGeometry::new([5, 5, 5], [2.0; 3]).unwrap();
            let vol = Volume3::filled(g, v);
            let back = resample(&resample(&vol, &coarse), &g);
            prop_assert_eq!(back, vol);
        }
    }
}
