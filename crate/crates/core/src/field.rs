//! Displacement fields in image-voxel units.
//!
//! `u(x)` lives on the fixed grid and points into moving space: the warped
//! moving image is `moving(x + u(x))`. Control-resolution fields place
//! control point `c` at image voxel `c * stride`.

use crate::error::{Error, Result};
use crate::interp::{AxisUpsample, Stencil};
use crate::volume::GridGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Full,
    Control { stride: usize },
}

impl Resolution {
    /// Voxels per grid cell; 1 for full resolution.
    pub fn stride(&self) -> usize {
        match self {
            Resolution::Full => 1,
            Resolution::Control { stride } => *stride,
        }
    }

    pub fn from_stride(stride: usize) -> Self {
        if stride <= 1 {
            Resolution::Full
        } else {
            Resolution::Control { stride }
        }
    }
}

/// Control grid size covering `n` voxels with spacing `stride`: the last
/// control point sits at or beyond voxel `n - 1`.
pub fn control_len(n: usize, stride: usize) -> usize {
    (n + stride - 2) / stride + 1
}

/// Geometry of the control grid over `image` at `stride`.
pub fn control_geometry(image: &GridGeometry, stride: usize) -> Result<GridGeometry> {
    if stride == 0 {
        return Err(Error::Config("grid stride must be >= 1".into()));
    }
    let dims = image.dims().map(|n| control_len(n, stride));
    let spacing = image.spacing().map(|s| s * stride as f32);
    GridGeometry::new(dims, spacing)
}

/// Three component planes `(ux, uy, uz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    geometry: GridGeometry,
    resolution: Resolution,
    data: Vec<f32>,
}

impl DisplacementField {
    pub fn new(geometry: GridGeometry, resolution: Resolution, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * geometry.len() {
            return Err(Error::Geometry(format!(
                "displacement data has {} values, expected {}",
                data.len(),
                3 * geometry.len()
            )));
        }
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFinite(format!("{bad} displacement values")));
        }
        Ok(Self {
            geometry,
            resolution,
            data,
        })
    }

    pub fn zeros(geometry: GridGeometry, resolution: Resolution) -> Self {
        Self {
            geometry,
            resolution,
            data: vec![0.0; 3 * geometry.len()],
        }
    }

    /// Full-resolution field from a closure over voxel indices.
    pub fn from_fn(
        geometry: GridGeometry,
        mut f: impl FnMut(usize, usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let n = geometry.len();
        let mut data = vec![0f32; 3 * n];
        for v in 0..n {
            let [i, j, k] = geometry.coords(v);
            let u = f(i, j, k);
            for c in 0..3 {
                data[c * n + v] = u[c];
            }
        }
        Self::new(geometry, Resolution::Full, data)
    }

    pub fn constant(geometry: GridGeometry, resolution: Resolution, u: [f32; 3]) -> Self {
        let n = geometry.len();
        let mut data = Vec::with_capacity(3 * n);
        for c in u {
            data.extend(std::iter::repeat_n(c, n));
        }
        Self {
            geometry,
            resolution,
            data,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn component(&self, c: usize) -> &[f32] {
        let n = self.geometry.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.geometry.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn vector(&self, idx: usize) -> [f32; 3] {
        let n = self.geometry.len();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    /// Trilinear sample at a continuous grid coordinate, edge-clamped.
    pub fn sample(&self, pos: [f64; 3]) -> [f64; 3] {
        let st = Stencil::new(self.geometry.dims(), pos);
        [0, 1, 2].map(|c| st.apply(self.component(c)))
    }

    /// Mean Euclidean length over all grid points.
    pub fn mean_norm(&self) -> f64 {
        let n = self.geometry.len();
        (0..n)
            .map(|v| {
                let u = self.vector(v);
                u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / n as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0f32, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Component-wise sum; both fields must share a grid.
    pub fn add(&self, other: &DisplacementField) -> Result<Self> {
        if self.geometry.dims() != other.geometry.dims() {
            return Err(Error::GeometryMismatch(
                "cannot add fields on different grids".into(),
            ));
        }
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
            ..self.clone()
        })
    }

    /// Re-expresses this field at control stride `stride` over `image`.
    pub fn to_control(&self, image: &GridGeometry, stride: usize) -> Result<Self> {
        let geom = control_geometry(image, stride)?;
        let full = match self.resolution {
            Resolution::Control { stride: s }
                if s == stride && self.geometry.dims() == geom.dims() =>
            {
                return Ok(self.clone())
            }
            Resolution::Full => {
                if self.geometry.dims() != image.dims() {
                    return Err(Error::GeometryMismatch(format!(
                        "field grid {:?} does not match image {:?}",
                        self.geometry.dims(),
                        image.dims()
                    )));
                }
                self.clone()
            }
            Resolution::Control { .. } => upsample_field(self, image)?,
        };
        let n = geom.len();
        let mut data = vec![0f32; 3 * n];
        for v in 0..n {
            let p = geom.coords(v).map(|c| (c * stride) as f64);
            let u = full.sample(p);
            for c in 0..3 {
                data[c * n + v] = u[c] as f32;
            }
        }
        Self::new(geom, Resolution::Control { stride }, data)
    }
}

/// Separable linear upsampling from a control grid to the image grid.
pub(crate) struct Upsampler {
    coarse: [usize; 3],
    fine: [usize; 3],
    axes: [AxisUpsample; 3],
}

impl Upsampler {
    pub fn new(coarse: [usize; 3], fine: [usize; 3], stride: usize) -> Self {
        let scale = 1.0 / stride as f64;
        let axes = [0, 1, 2].map(|a| AxisUpsample::new(fine[a], coarse[a], scale, 0.0));
        Self { coarse, fine, axes }
    }

    /// Applies the interpolation along one axis: `src` has size `from` on
    /// that axis, the result has the fine size.
    fn pass(&self, src: &[f64], shape: [usize; 3], axis: usize) -> (Vec<f64>, [usize; 3]) {
        let mut out_shape = shape;
        out_shape[axis] = self.fine[axis];
        let ax = &self.axes[axis];
        let mut out = vec![0f64; out_shape.iter().product()];
        let in_stride = [1, shape[0], shape[0] * shape[1]];
        let out_stride = [1, out_shape[0], out_shape[0] * out_shape[1]];
        for k in 0..out_shape[2] {
            for j in 0..out_shape[1] {
                for i in 0..out_shape[0] {
                    let p = [i, j, k];
                    let o = i + out_stride[1] * j + out_stride[2] * k;
                    let mut base = 0;
                    for a in 0..3 {
                        if a != axis {
                            base += p[a] * in_stride[a];
                        }
                    }
                    let x = p[axis];
                    let lo = ax.lo[x];
                    let t = ax.t[x];
                    let s = in_stride[axis];
                    out[o] = (1.0 - t) * src[base + lo * s] + t * src[base + (lo + 1) * s];
                }
            }
        }
        (out, out_shape)
    }

    fn pass_adjoint(&self, src: &[f64], shape: [usize; 3], axis: usize) -> (Vec<f64>, [usize; 3]) {
        let mut out_shape = shape;
        out_shape[axis] = self.coarse[axis];
        let ax = &self.axes[axis];
        let mut out = vec![0f64; out_shape.iter().product()];
        let in_stride = [1, shape[0], shape[0] * shape[1]];
        let out_stride = [1, out_shape[0], out_shape[0] * out_shape[1]];
        for k in 0..shape[2] {
            for j in 0..shape[1] {
                for i in 0..shape[0] {
                    let p = [i, j, k];
                    let g = src[i + in_stride[1] * j + in_stride[2] * k];
                    let mut base = 0;
                    for a in 0..3 {
                        if a != axis {
                            base += p[a] * out_stride[a];
                        }
                    }
                    let x = p[axis];
                    let lo = ax.lo[x];
                    let t = ax.t[x];
                    let s = out_stride[axis];
                    out[base + lo * s] += (1.0 - t) * g;
                    out[base + (lo + 1) * s] += t * g;
                }
            }
        }
        (out, out_shape)
    }

    /// Coarse plane to fine plane.
    pub fn up(&self, coarse: &[f64]) -> Vec<f64> {
        let (a, s) = self.pass(coarse, self.coarse, 0);
        let (b, s) = self.pass(&a, s, 1);
        self.pass(&b, s, 2).0
    }

    /// Transpose of [`Upsampler::up`]: scatters fine values onto the coarse grid.
    pub fn down_adjoint(&self, fine: &[f64]) -> Vec<f64> {
        let (a, s) = self.pass_adjoint(fine, self.fine, 2);
        let (b, s) = self.pass_adjoint(&a, s, 1);
        self.pass_adjoint(&b, s, 0).0
    }
}

/// Per-component trilinear interpolation of a control field onto `target`.
pub fn upsample_field(
    field: &DisplacementField,
    target: &GridGeometry,
) -> Result<DisplacementField> {
    let stride = field.resolution().stride();
    if stride == 1 {
        if field.geometry().dims() != target.dims() {
            return Err(Error::GeometryMismatch(format!(
                "full-resolution field {:?} vs target {:?}",
                field.geometry().dims(),
                target.dims()
            )));
        }
        return Ok(DisplacementField {
            geometry: *target,
            resolution: Resolution::Full,
            data: field.data.clone(),
        });
    }
    let expect = target.dims().map(|n| control_len(n, stride));
    if field.geometry().dims() != expect {
        return Err(Error::GeometryMismatch(format!(
            "control grid {:?} does not cover target {:?} at stride {stride} (expected {expect:?})",
            field.geometry().dims(),
            target.dims()
        )));
    }
    let up = Upsampler::new(expect, target.dims(), stride);
    let mut data = Vec::with_capacity(3 * target.len());
    for c in 0..3 {
        let coarse: Vec<f64> = field.component(c).iter().map(|&v| v as f64).collect();
        data.extend(up.up(&coarse).into_iter().map(|v| v as f32));
    }
    DisplacementField::new(*target, Resolution::Full, data)
}
