//! Separable smoothing filters on x-fastest 3D arrays, edge-replicated.

/// In-place separable box mean of half-width `r` with edge replication.
pub(crate) fn box_mean(data: &mut [f64], dims: [usize; 3], r: usize) {
    if r == 0 {
        return;
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let norm = 1.0 / (2 * r + 1) as f64;
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (n1, n2) = (dims[others[0]], dims[others[1]]);
        for b in 0..n2 {
            for a in 0..n1 {
                let start = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..len).map(|i| data[start + i * stride]));
                for i in 0..len {
                    let mut acc = 0.0;
                    for o in -(r as isize)..=(r as isize) {
                        let j = (i as isize + o).clamp(0, len as isize - 1) as usize;
                        acc += line[j];
                    }
                    data[start + i * stride] = acc * norm;
                }
            }
        }
    }
}

/// In-place separable Gaussian blur with standard deviation `sigma` voxels,
/// kernel truncated at `ceil(3 sigma)` and renormalised.
pub(crate) fn gaussian_blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    if !(sigma > 0.0) {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|o| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);
    convolve_separable(data, dims, &kernel);
}

fn convolve_separable(data: &mut [f64], dims: [usize; 3], kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for b in 0..dims[others[1]] {
            for a in 0..dims[others[0]] {
                let start = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..len).map(|i| data[start + i * stride]));
                for i in 0..len {
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let j = (i as isize + t as isize - r).clamp(0, len as isize - 1) as usize;
                        acc += w * line[j];
                    }
                    data[start + i * stride] = acc;
                }
            }
        }
    }
}
