//! Joint PCA of two feature volumes via randomized range finding.
//!
//! Voxel samples from both volumes are pooled so the fixed and moving
//! features project into one shared basis. The basis comes from a
//! randomized SVD of the centred sample matrix: a Gaussian sketch of the
//! row space, optional power iterations with QR re-orthonormalisation, and
//! an exact SVD of the small projected matrix.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FeatureVolume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    pub enabled: bool,
    pub components: usize,
    pub oversampling: usize,
    pub power_iterations: usize,
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            components: 24,
            oversampling: 8,
            power_iterations: 2,
            sample_cap: 100_000,
            seed: 0,
        }
    }
}

impl PcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Config("pca.components must be >= 1".into()));
        }
        if self.sample_cap == 0 {
            return Err(Error::Config("pca.sample_cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks `k + p <= channels` for a concrete input.
    pub fn validate_for(&self, channels: usize) -> Result<()> {
        self.validate()?;
        if self.components + self.oversampling > channels {
            return Err(Error::Config(format!(
                "pca.components + pca.oversampling = {} exceeds {channels} input channels",
                self.components + self.oversampling
            )));
        }
        Ok(())
    }
}

/// Mean vector and orthonormal components, stored column by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `components[j]` is the j-th principal direction (length = channels).
    pub components: Vec<Vec<f64>>,
    /// Singular values of the centred sample matrix, descending.
    pub singular_values: Vec<f64>,
}

impl PcaBasis {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn project_vector(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|w| {
                w.iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((w, x), m)| w * (x - m))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct_vector(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (w, &coef) in self.components.iter().zip(y) {
            for (xi, wi) in x.iter_mut().zip(w) {
                *xi += coef * wi;
            }
        }
        x
    }

    /// `W` as a channels x k matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.channels(), self.k(), |r, c| self.components[c][r])
    }
}

/// Top-`k` right singular vectors of `x` (rows are samples).
///
/// Returns `(singular_values, V)` with `V` of shape `cols x k`. Each column's
/// largest-magnitude entry is made positive so results are sign-stable.
pub fn randomized_svd(
    x: &DMatrix<f64>,
    k: usize,
    oversampling: usize,
    power_iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (rows, cols) = x.shape();
    let l = k + oversampling;
    if k == 0 || l > cols {
        return Err(Error::Config(format!(
            "rank {k} with oversampling {oversampling} does not fit {cols} columns"
        )));
    }
    if rows < k {
        return Err(Error::Config(format!(
            "{rows} samples cannot support {k} components"
        )));
    }
    let omega = DMatrix::from_fn(cols, l, |_, _| StandardNormal.sample(rng));
    let mut q = (x * omega).qr().q();
    for _ in 0..power_iterations {
        let z = (x.transpose() * &q).qr().q();
        q = (x * z).qr().q();
    }
    let b = q.transpose() * x;
    let svd = b.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::NonFinite("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut v = DMatrix::zeros(cols, k);
    let mut sigma = Vec::with_capacity(k);
    for (j, &src) in order.iter().take(k).enumerate() {
        sigma.push(svd.singular_values[src]);
        let row = v_t.row(src);
        let pivot = row
            .iter()
            .copied()
            .fold(0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for c in 0..cols {
            v[(c, j)] = sign * row[c];
        }
    }
    Ok((sigma, v))
}

/// Fits a joint basis on voxels pooled from `a` and `b`.
pub fn fit_pca(a: &FeatureVolume, b: &FeatureVolume, cfg: &PcaConfig) -> Result<PcaBasis> {
    let channels = a.channels();
    if b.channels() != channels {
        return Err(Error::ChannelMismatch {
            expected: channels,
            found: b.channels(),
        });
    }
    cfg.validate_for(channels)?;
    let na = a.geometry().len();
    let total = na + b.geometry().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = if total <= cfg.sample_cap {
        (0..total).collect()
    } else {
        let mut v = index::sample(&mut rng, total, cfg.sample_cap).into_vec();
        v.sort_unstable();
        v
    };
    let m = picks.len();
    let mut samples = DMatrix::<f64>::zeros(m, channels);
    for c in 0..channels {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for (r, &p) in picks.iter().enumerate() {
            samples[(r, c)] = if p < na { pa[p] } else { pb[p - na] } as f64;
        }
    }
    let mean: Vec<f64> = (0..channels).map(|c| samples.column(c).mean()).collect();
    for c in 0..channels {
        let mu = mean[c];
        samples.column_mut(c).iter_mut().for_each(|v| *v -= mu);
    }
    let (singular_values, v) = randomized_svd(
        &samples,
        cfg.components,
        cfg.oversampling,
        cfg.power_iterations,
        &mut rng,
    )?;
    let components = (0..cfg.components)
        .map(|j| v.column(j).iter().copied().collect())
        .collect();
    Ok(PcaBasis {
        mean,
        components,
        singular_values,
    })
}

/// Per-voxel `y = W^T (x - mean)`; keeps geometry and stride.
pub fn project(fv: &FeatureVolume, basis: &PcaBasis) -> Result<FeatureVolume> {
    if fv.channels() != basis.channels() {
        return Err(Error::ChannelMismatch {
            expected: basis.channels(),
            found: fv.channels(),
        });
    }
    let n = fv.geometry().len();
    let planes: Vec<Vec<f32>> = basis
        .components
        .par_iter()
        .map(|w| {
            let mut out = vec![0f64; n];
            for (c, (&wc, &mu)) in w.iter().zip(&basis.mean).enumerate() {
                for (o, &x) in out.iter_mut().zip(fv.plane(c)) {
                    *o += wc * (x as f64 - mu);
                }
            }
            out.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    FeatureVolume::from_planes(*fv.geometry(), fv.stride(), planes)
}

/// Back-projection `W y + mean` of projected features.
pub fn reconstruct(fv: &FeatureVolume, basis: &PcaBasis) -> Result<FeatureVolume> {
    if fv.channels() != basis.k() {
        return Err(Error::ChannelMismatch {
            expected: basis.k(),
            found: fv.channels(),
        });
    }
    let n = fv.geometry().len();
    let planes: Vec<Vec<f32>> = (0..basis.channels())
        .map(|c| {
            let mut out = vec![basis.mean[c]; n];
            for (j, w) in basis.components.iter().enumerate() {
                for (o, &y) in out.iter_mut().zip(fv.plane(j)) {
                    *o += w[c] * y as f64;
                }
            }
            out.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    FeatureVolume::from_planes(*fv.geometry(), fv.stride(), planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridGeometry;
    use rand::Rng;

    fn volume_from_rows(rows: &[Vec<f64>], dims: [usize; 3]) -> FeatureVolume {
        let g = GridGeometry::isotropic(dims).unwrap();
        let c = rows[0].len();
        let planes = (0..c)
            .map(|ch| rows.iter().map(|r| r[ch] as f32).collect())
            .collect();
        FeatureVolume::from_planes(g, 1, planes).unwrap()
    }

    #[test]
    fn rank_one_direction() {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![i as f64, 2.0 * i as f64, 0.0])
            .collect();
        let a = volume_from_rows(&rows, [2, 2, 2]);
        let cfg = PcaConfig {
            components: 1,
            oversampling: 2,
            ..Default::default()
        };
        let basis = fit_pca(&a, &a, &cfg).unwrap();
        let w = &basis.components[0];
        let s5 = 5f64.sqrt();
        let dot = (w[0] * 1.0 + w[1] * 2.0) / s5;
        assert!((dot.abs() - 1.0).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn config_errors() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 1.0, 0.0]).collect();
        let a = volume_from_rows(&rows, [2, 2, 2]);
        let cfg = PcaConfig {
            components: 2,
            oversampling: 2,
            ..Default::default()
        };
        assert!(matches!(fit_pca(&a, &a, &cfg), Err(Error::Config(_))));

        let rows2: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 1.0]).collect();
        let b = volume_from_rows(&rows2, [2, 2, 2]);
        assert!(matches!(
            fit_pca(&a, &b, &cfg),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn identity_basis_projection() {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![i as f64, -(i as f64), 3.0, 0.5 * i as f64])
            .collect();
        let fv = volume_from_rows(&rows, [2, 2, 2]);
        let basis = PcaBasis {
            mean: vec![0.0; 4],
            components: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
            singular_values: vec![1.0, 1.0],
        };
        let y = project(&fv, &basis).unwrap();
        assert_eq!(y.plane(0), fv.plane(0));
        assert_eq!(y.plane(1), fv.plane(1));

        let basis = PcaBasis {
            mean: vec![1.0, 2.0, 3.0, 4.0],
            ..basis
        };
        let mean_vol = volume_from_rows(&vec![vec![1.0, 2.0, 3.0, 4.0]; 8], [2, 2, 2]);
        let y = project(&mean_vol, &basis).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(project(
            &volume_from_rows(&rows, [2, 2, 2]),
            &PcaBasis {
                mean: vec![0.0; 3],
                ..basis
            }
        )
        .is_err());
    }

    #[test]
    fn deterministic_with_subsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..512)
            .map(|_| (0..6).map(|_| rng.random::<f64>()).collect())
            .collect();
        let a = volume_from_rows(&rows, [8, 8, 8]);
        let cfg = PcaConfig {
            components: 2,
            oversampling: 2,
            sample_cap: 300,
            seed: 11,
            ..Default::default()
        };
        let b1 = fit_pca(&a, &a, &cfg).unwrap();
        let b2 = fit_pca(&a, &a, &cfg).unwrap();
        assert_eq!(b1, b2);
    }
}
