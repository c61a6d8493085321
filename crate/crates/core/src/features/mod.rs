//! Dense multi-channel feature volumes and the extractors that produce them.

pub mod mind;
pub mod pca;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::Stencil;
use crate::volume::GridGeometry;

pub use mind::{mind_ssc, MindConfig};
pub use pca::{fit_pca, project, randomized_svd, reconstruct, PcaBasis, PcaConfig};

/// `channels` planes on a common grid, each plane laid out like [`crate::Volume3`].
///
/// `stride` counts image voxels per feature cell: 1 for voxel-wise
/// descriptors, the token size for patch-based learned features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    geometry: GridGeometry,
    channels: usize,
    stride: usize,
    data: Vec<f32>,
}

impl FeatureVolume {
    pub fn new(
        geometry: GridGeometry,
        channels: usize,
        stride: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config(
                "feature volume needs at least one channel".into(),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("feature stride must be at least 1".into()));
        }
        let expected = channels * geometry.len();
        if data.len() != expected {
            return Err(Error::Geometry(format!(
                "feature data has {} values, expected {expected}",
                data.len()
            )));
        }
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFinite(format!("{bad} feature values")));
        }
        Ok(Self {
            geometry,
            channels,
            stride,
            data,
        })
    }

    /// Builds from per-channel planes.
    pub fn from_planes(
        geometry: GridGeometry,
        stride: usize,
        planes: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let channels = planes.len();
        let data = planes.into_iter().flatten().collect();
        Self::new(geometry, channels, stride, data)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.geometry.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Feature vector of one voxel.
    pub fn voxel(&self, idx: usize) -> Vec<f32> {
        let n = self.geometry.len();
        (0..self.channels).map(|c| self.data[c * n + idx]).collect()
    }

    /// Voxel-major copy: the `channels` values of a voxel are contiguous.
    pub fn interleaved(&self) -> Vec<f32> {
        let n = self.geometry.len();
        let c = self.channels;
        let mut out = vec![0f32; n * c];
        for ch in 0..c {
            let plane = self.plane(ch);
            for (v, &x) in plane.iter().enumerate() {
                out[v * c + ch] = x;
            }
        }
        out
    }

    /// Scales every voxel's feature vector to unit L2 norm (zero vectors stay zero).
    pub fn l2_normalized(&self) -> Self {
        let n = self.geometry.len();
        let mut norms = vec![0f64; n];
        for ch in 0..self.channels {
            for (acc, &x) in norms.iter_mut().zip(self.plane(ch)) {
                *acc += (x as f64) * (x as f64);
            }
        }
        let mut data = self.data.clone();
        for ch in 0..self.channels {
            for (v, x) in data[ch * n..(ch + 1) * n].iter_mut().enumerate() {
                let norm = norms[v].sqrt();
                if norm > 0.0 {
                    *x = (*x as f64 / norm) as f32;
                }
            }
        }
        Self {
            data,
            ..self.clone()
        }
    }

    /// Trilinearly resamples token-resolution features onto an image grid.
    ///
    /// Feature cell `t` covers image voxels `[t*s, (t+1)*s)`, so image voxel
    /// `x` reads feature coordinate `(x + 0.5) / s - 0.5`. Output stride is 1.
    pub fn upsample_to_voxels(&self, image: &GridGeometry) -> Result<Self> {
        if self.stride == 1 {
            if self.geometry.dims() != image.dims() {
                return Err(Error::GeometryMismatch(format!(
                    "stride-1 features on {:?} cannot serve image {:?}",
                    self.geometry.dims(),
                    image.dims()
                )));
            }
            return Ok(Self {
                geometry: *image,
                ..self.clone()
            });
        }
        let s = self.stride as f64;
        let src = self.geometry.dims();
        let [nx, ny, nz] = image.dims();
        let stencils: Vec<Stencil> = (0..image.len())
            .map(|v| {
                let i = v % nx;
                let j = (v / nx) % ny;
                let k = v / (nx * ny);
                let map = |x: usize| (x as f64 + 0.5) / s - 0.5;
                Stencil::new(src, [map(i), map(j), map(k)])
            })
            .collect();
        debug_assert_eq!(stencils.len(), nx * ny * nz);
        let planes: Vec<Vec<f32>> = (0..self.channels)
            .into_par_iter()
            .map(|c| {
                let plane = self.plane(c);
                stencils.iter().map(|st| st.apply(plane) as f32).collect()
            })
            .collect();
        Self::from_planes(*image, 1, planes)
    }
}
