//! Trilinear stencils shared by sampling, warping and the refinement gradient.
//!
//! A coordinate is clamped to `[0, n-1]` per axis. The containing cell is the
//! one to the left of an exact node (`i0 = ceil(x) - 1`), which also fixes the
//! sub-gradient used at cell boundaries.

/// Cell origin, fractional offset and whether the axis is unclamped.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisCell {
    pub i0: usize,
    pub t: f64,
    /// False when the coordinate was clamped, in which case the sample is
    /// locally constant along this axis.
    pub live: bool,
}

#[inline]
pub(crate) fn locate(x: f64, n: usize) -> AxisCell {
    let hi = (n - 1) as f64;
    let live = x > 0.0 && x <= hi;
    let xc = x.clamp(0.0, hi);
    let i0 = ((xc.ceil() as isize) - 1).clamp(0, n as isize - 2) as usize;
    AxisCell {
        i0,
        t: xc - i0 as f64,
        live,
    }
}

/// The 8 voxel indices and blend weights for one sample position.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl Stencil {
    #[inline]
    pub fn new(dims: [usize; 3], pos: [f64; 3]) -> Self {
        let cx = locate(pos[0], dims[0]);
        let cy = locate(pos[1], dims[1]);
        let cz = locate(pos[2], dims[2]);
        Self::from_cells(dims, &cx, &cy, &cz)
    }

    #[inline]
    pub fn from_cells(dims: [usize; 3], cx: &AxisCell, cy: &AxisCell, cz: &AxisCell) -> Self {
        let sx = 1;
        let sy = dims[0];
        let sz = dims[0] * dims[1];
        let base = cx.i0 + sy * cy.i0 + sz * cz.i0;
        let wx = [1.0 - cx.t, cx.t];
        let wy = [1.0 - cy.t, cy.t];
        let wz = [1.0 - cz.t, cz.t];
        let mut idx = [0usize; 8];
        let mut w = [0f64; 8];
        for c in 0..8 {
            let (a, b, d) = (c & 1, (c >> 1) & 1, c >> 2);
            idx[c] = base + a * sx + b * sy + d * sz;
            w[c] = wx[a] * wy[b] * wz[d];
        }
        Self { idx, w }
    }

    #[inline]
    pub fn apply(&self, plane: &[f32]) -> f64 {
        let mut acc = 0.0;
        for c in 0..8 {
            acc += self.w[c] * plane[self.idx[c]] as f64;
        }
        acc
    }
}

/// Stencil plus the partial derivatives of every weight with respect to
/// the sample position.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GradStencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 8]; 3],
}

impl GradStencil {
    #[inline]
    pub fn new(dims: [usize; 3], pos: [f64; 3]) -> Self {
        let cx = locate(pos[0], dims[0]);
        let cy = locate(pos[1], dims[1]);
        let cz = locate(pos[2], dims[2]);
        let base = Stencil::from_cells(dims, &cx, &cy, &cz);
        let wx = [1.0 - cx.t, cx.t];
        let wy = [1.0 - cy.t, cy.t];
        let wz = [1.0 - cz.t, cz.t];
        let sign = |live: bool| if live { [-1.0, 1.0] } else { [0.0, 0.0] };
        let (gx, gy, gz) = (sign(cx.live), sign(cy.live), sign(cz.live));
        let mut dw = [[0f64; 8]; 3];
        for c in 0..8 {
            let (a, b, d) = (c & 1, (c >> 1) & 1, c >> 2);
            dw[0][c] = gx[a] * wy[b] * wz[d];
            dw[1][c] = wx[a] * gy[b] * wz[d];
            dw[2][c] = wx[a] * wy[b] * gz[d];
        }
        Self {
            idx: base.idx,
            w: base.w,
            dw,
        }
    }
}

/// Per-axis linear weights used when upsampling a control grid by an
/// integer stride: voxel `x` reads control coordinate `x / stride`.
#[derive(Debug, Clone)]
pub(crate) struct AxisUpsample {
    pub lo: Vec<usize>,
    pub t: Vec<f64>,
}

impl AxisUpsample {
    pub fn new(n_fine: usize, n_coarse: usize, scale: f64, offset: f64) -> Self {
        let mut lo = Vec::with_capacity(n_fine);
        let mut t = Vec::with_capacity(n_fine);
        for x in 0..n_fine {
            let cell = locate(x as f64 * scale + offset, n_coarse);
            lo.push(cell.i0);
            t.push(cell.t);
        }
        Self { lo, t }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_cell_at_nodes() {
        let c = locate(2.0, 5);
        assert_eq!((c.i0, c.t, c.live), (1, 1.0, true));
        let c = locate(0.0, 5);
        assert_eq!((c.i0, c.t, c.live), (0, 0.0, false));
        let c = locate(4.0, 5);
        assert_eq!((c.i0, c.t, c.live), (3, 1.0, true));
        let c = locate(7.5, 5);
        assert_eq!((c.i0, c.t, c.live), (3, 1.0, false));
        let c = locate(2.25, 5);
        assert_eq!((c.i0, c.t), (2, 0.25));
    }

    #[test]
    fn weights_partition_unity() {
        let s = GradStencil::new([4, 5, 6], [1.3, 2.7, 0.4]);
        assert!((s.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for axis in 0..3 {
            assert!(s.dw[axis].iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
