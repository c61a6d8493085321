//! Continuous refinement: Adam on a control-grid displacement field.
//!
//! Objective, with `U` the trilinear upsampling of the control field `u`:
//!
//! ```text
//! L(u) = mean_{voxels, channels} (F(x) - M(x + U(x)))^2
//!        + lambda * mean_{control points} |grad u|_F^2
//! ```
//!
//! The regulariser uses forward differences on the control grid. The data
//! gradient is the exact derivative of the trilinear sample (left cell at
//! nodes, zero along clamped axes), pulled back through the upsampling.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::field::{control_geometry, upsample_field, DisplacementField, Resolution, Upsampler};
use crate::interp::GradStencil;
use crate::volume::GridGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda_reg: f64,
    pub grid_stride: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            iterations: 80,
            learning_rate: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda_reg: 0.5,
            grid_stride: 2,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(
                "adam.beta1 and adam.beta2 must lie in [0, 1)".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam.epsilon must be > 0".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(
                "adam.learning_rate must be finite and >= 0".into(),
            ));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return Err(Error::Config(
                "adam.lambda_reg must be finite and >= 0".into(),
            ));
        }
        if self.grid_stride == 0 {
            return Err(Error::Config("adam.grid_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Double-precision control-grid parameters being optimised.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlParams {
    image: GridGeometry,
    control: GridGeometry,
    stride: usize,
    pub values: [Vec<f64>; 3],
}

impl ControlParams {
    pub fn zeros(image: &GridGeometry, stride: usize) -> Result<Self> {
        let control = control_geometry(image, stride)?;
        Ok(Self {
            image: *image,
            control,
            stride,
            values: [0, 1, 2].map(|_| vec![0.0; control.len()]),
        })
    }

    /// Samples `field` onto the control grid at `stride`.
    pub fn from_field(
        field: &DisplacementField,
        image: &GridGeometry,
        stride: usize,
    ) -> Result<Self> {
        let ctrl = field.to_control(image, stride)?;
        Ok(Self {
            image: *image,
            control: *ctrl.geometry(),
            stride,
            values: [0, 1, 2].map(|c| ctrl.component(c).iter().map(|&v| v as f64).collect()),
        })
    }

    pub fn control_geometry(&self) -> &GridGeometry {
        &self.control
    }

    pub fn image_geometry(&self) -> &GridGeometry {
        &self.image
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control.is_empty()
    }

    pub fn to_field(&self) -> Result<DisplacementField> {
        let data = self
            .values
            .iter()
            .flat_map(|p| p.iter().map(|&v| v as f32))
            .collect();
        DisplacementField::new(
            self.control,
            Resolution::Control {
                stride: self.stride,
            },
            data,
        )
    }

    pub(crate) fn upsampler(&self) -> Upsampler {
        Upsampler::new(self.control.dims(), self.image.dims(), self.stride)
    }
}

/// Loss terms and the gradient with respect to every control parameter.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub data: f64,
    pub reg: f64,
    pub total: f64,
    pub grad: [Vec<f64>; 3],
}

/// Pre-arranged features for repeated loss evaluations.
struct Workspace {
    dims: [usize; 3],
    channels: usize,
    fixed: Vec<f32>,
    moving: Vec<f32>,
}

impl Workspace {
    fn new(fixed: &FeatureVolume, moving: &FeatureVolume) -> Result<Self> {
        if fixed.geometry().dims() != moving.geometry().dims() {
            return Err(Error::GeometryMismatch(format!(
                "fixed features {:?} vs moving features {:?}",
                fixed.geometry().dims(),
                moving.geometry().dims()
            )));
        }
        if fixed.channels() != moving.channels() {
            return Err(Error::ChannelMismatch {
                expected: fixed.channels(),
                found: moving.channels(),
            });
        }
        Ok(Self {
            dims: fixed.geometry().dims(),
            channels: fixed.channels(),
            fixed: fixed.interleaved(),
            moving: moving.interleaved(),
        })
    }

    fn evaluate(&self, params: &ControlParams, lambda: f64) -> LossGrad {
        assert_eq!(
            params.image.dims(),
            self.dims,
            "parameters built for another grid"
        );
        let up = params.upsampler();
        let dense: [Vec<f64>; 3] = [0, 1, 2].map(|a| up.up(&params.values[a]));
        let n = self.dims.iter().product::<usize>();
        let c = self.channels;
        let nx = self.dims[0];
        let ny = self.dims[1];

        // per-voxel squared residual sum and dL/dU (unscaled)
        let per_voxel: Vec<(f64, [f64; 3])> = (0..n)
            .into_par_iter()
            .map(|v| {
                let i = v % nx;
                let j = (v / nx) % ny;
                let k = v / (nx * ny);
                let pos = [
                    i as f64 + dense[0][v],
                    j as f64 + dense[1][v],
                    k as f64 + dense[2][v],
                ];
                let st = GradStencil::new(self.dims, pos);
                let f = &self.fixed[v * c..(v + 1) * c];
                let mut sq = 0.0;
                let mut g = [0.0; 3];
                for (ch, &fv) in f.iter().enumerate() {
                    let mut m = 0.0;
                    let mut dm = [0.0; 3];
                    for corner in 0..8 {
                        let val = self.moving[st.idx[corner] * c + ch] as f64;
                        m += st.w[corner] * val;
                        dm[0] += st.dw[0][corner] * val;
                        dm[1] += st.dw[1][corner] * val;
                        dm[2] += st.dw[2][corner] * val;
                    }
                    let r = fv as f64 - m;
                    sq += r * r;
                    for a in 0..3 {
                        g[a] -= 2.0 * r * dm[a];
                    }
                }
                (sq, g)
            })
            .collect();

        let scale = 1.0 / (n * c) as f64;
        let data = per_voxel.iter().map(|p| p.0).sum::<f64>() * scale;
        let grad_dense: [Vec<f64>; 3] =
            [0, 1, 2].map(|a| per_voxel.iter().map(|p| p.1[a] * scale).collect());
        let mut grad: [Vec<f64>; 3] = [0, 1, 2].map(|a| up.down_adjoint(&grad_dense[a]));

        let (reg, reg_grad) = diffusion_regularizer(&params.values, params.control.dims());
        for a in 0..3 {
            for (g, rg) in grad[a].iter_mut().zip(&reg_grad[a]) {
                *g += lambda * rg;
            }
        }
        LossGrad {
            data,
            reg,
            total: data + lambda * reg,
            grad,
        }
    }
}

/// `mean_{points} sum_{axis, component} (u[p + e_axis] - u[p])^2` over
/// points that have a forward neighbour, normalised by the point count,
/// with its gradient.
pub fn diffusion_regularizer(values: &[Vec<f64>; 3], dims: [usize; 3]) -> (f64, [Vec<f64>; 3]) {
    let n = dims.iter().product::<usize>();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let norm = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad: [Vec<f64>; 3] = [0, 1, 2].map(|_| vec![0.0; n]);
    for comp in 0..3 {
        let u = &values[comp];
        let g = &mut grad[comp];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = [i, j, k];
                    let idx = i + strides[1] * j + strides[2] * k;
                    for axis in 0..3 {
                        if p[axis] + 1 < dims[axis] {
                            let next = idx + strides[axis];
                            let d = u[next] - u[idx];
                            total += d * d;
                            g[next] += 2.0 * d * norm;
                            g[idx] -= 2.0 * d * norm;
                        }
                    }
                }
            }
        }
    }
    (total * norm, grad)
}

/// Loss and gradient of the refinement objective at `params`.
pub fn loss_and_grad(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    params: &ControlParams,
    lambda: f64,
) -> Result<LossGrad> {
    let ws = Workspace::new(fixed, moving)?;
    if params.image.dims() != ws.dims {
        return Err(Error::GeometryMismatch(
            "parameters and features are on different grids".into(),
        ));
    }
    Ok(ws.evaluate(params, lambda))
}

/// First and second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: [Vec<f64>; 3],
    pub second: [Vec<f64>; 3],
    pub step: usize,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            first: [0, 1, 2].map(|_| vec![0.0; len]),
            second: [0, 1, 2].map(|_| vec![0.0; len]),
            step: 0,
        }
    }

    /// One bias-corrected Adam step applied in place.
    pub fn update(&mut self, params: &mut [Vec<f64>; 3], grad: &[Vec<f64>; 3], cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for a in 0..3 {
            for (((p, &g), m), v) in params[a]
                .iter_mut()
                .zip(&grad[a])
                .zip(self.first[a].iter_mut())
                .zip(self.second[a].iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub data_term: f64,
    pub reg_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    /// Full-resolution field.
    pub field: DisplacementField,
    /// Optimised control-grid field.
    pub control: DisplacementField,
    /// Loss after 0, 1, ..., N updates.
    pub trace: Vec<LossRecord>,
}

/// Adam instance optimisation starting from `init` (full or control resolution).
pub fn refine(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    init: &DisplacementField,
    cfg: &AdamConfig,
) -> Result<RefineOutput> {
    cfg.validate()?;
    let ws = Workspace::new(fixed, moving)?;
    let image = *fixed.geometry();
    let mut params = ControlParams::from_field(init, &image, cfg.grid_stride)?;
    let mut state = OptimizerState::new(params.len());
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let lg = ws.evaluate(&params, cfg.lambda_reg);
        if !lg.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                data: lg.data,
                reg: lg.reg,
            });
        }
        trace.push(LossRecord {
            iteration: it,
            data_term: lg.data,
            reg_term: lg.reg,
            total: lg.total,
        });
        log::debug!(
            "adam iteration {it}: data {:.6e} reg {:.6e}",
            lg.data,
            lg.reg
        );
        if it < cfg.iterations {
            state.update(&mut params.values, &lg.grad, cfg);
        }
    }
    let field = if cfg.iterations == 0 {
        upsample_field(init, &image)?
    } else {
        upsample_field(&params.to_field()?, &image)?
    };
    Ok(RefineOutput {
        field,
        control: params.to_field()?,
        trace,
    })
}

/// Writes `iteration,data_term,reg_term,total` rows.
pub fn write_loss_csv(trace: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,data_term,reg_term,total\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            r.iteration, r.data_term, r.reg_term, r.total
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a CSV written by [`write_loss_csv`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad =
        |line: &str| Error::Config(format!("{}: malformed loss row {line:?}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some("iteration,data_term,reg_term,total") {
        return Err(Error::Config(format!(
            "{}: missing loss CSV header",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            Ok(LossRecord {
                iteration: parts[0].parse().map_err(|_| bad(line))?,
                data_term: num(parts[1])?,
                reg_term: num(parts[2])?,
                total: num(parts[3])?,
            })
        })
        .collect()
}
