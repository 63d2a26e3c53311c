//! Separable Gaussian smoothing and factor-2 resampling on x-fastest grids.

use crate::volume::GridGeometry;

/// Normalized, truncated (±3σ) Gaussian kernel. `sigma <= 0` yields `[1]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// In-place Gaussian smoothing with replicated (clamped) boundaries. `sigma`
/// is in voxels and applied along every axis with more than one voxel.
pub fn gaussian_smooth(values: &mut [f32], dims: [usize; 3], sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return;
    }
    let radius = kernel.len() / 2;
    let strides = [1, dims[0], dims[0] * dims[1]];
    // line padded by `radius` replicated samples on each side
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        if n < 2 {
            continue;
        }
        let stride = strides[axis];
        line.resize(n + 2 * radius, 0.0f64);
        // enumerate the starting index of every line along `axis`
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let start = a * strides[o1] + b * strides[o2];
                for i in 0..n {
                    line[radius + i] = f64::from(values[start + i * stride]);
                }
                let (first, last) = (line[radius], line[radius + n - 1]);
                line[..radius].fill(first);
                line[radius + n..].fill(last);
                for i in 0..n {
                    let window = &line[i..i + kernel.len()];
                    let acc: f64 = window.iter().zip(&kernel).map(|(a, w)| a * w).sum();
                    values[start + i * stride] = acc as f32;
                }
            }
        }
    }
}

/// Halves each axis (rounding up) by averaging 2×2×2 blocks; blocks cut by
/// an odd edge average the voxels they contain.
pub fn downsample2(values: &[f32], geometry: &GridGeometry) -> (Vec<f32>, GridGeometry) {
    let dims = geometry.dims();
    let out_dims = dims.map(|d| d.div_ceil(2));
    let sp = geometry.spacing();
    let org = geometry.origin();
    let out_geom = GridGeometry::new(
        out_dims,
        [0, 1, 2].map(|a| if dims[a] > 1 { sp[a] * 2.0 } else { sp[a] }),
        [0, 1, 2].map(|a| if dims[a] > 1 { org[a] + 0.5 * sp[a] } else { org[a] }),
    )
    .expect("coarser grid is valid");
    let mut out = vec![0f32; out_geom.len()];
    let mut idx = 0;
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let mut acc = 0f64;
                let mut cnt = 0u32;
                for zz in 2 * z..(2 * z + 2).min(dims[2]) {
                    for yy in 2 * y..(2 * y + 2).min(dims[1]) {
                        for xx in 2 * x..(2 * x + 2).min(dims[0]) {
                            acc += f64::from(values[geometry.index(xx, yy, zz)]);
                            cnt += 1;
                        }
                    }
                }
                out[idx] = (acc / f64::from(cnt)) as f32;
                idx += 1;
            }
        }
    }
    (out, out_geom)
}

/// Position of a fine-grid voxel in the coarse grid produced by
/// [`downsample2`] (axes of length 1 stay put).
#[inline]
pub fn fine_to_coarse(fine: usize, fine_len: usize) -> f64 {
    if fine_len > 1 {
        (fine as f64 - 0.5) / 2.0
    } else {
        0.0
    }
}

/// Trilinear upsampling of a coarse field onto `fine` dims, inverting
/// [`downsample2`]'s voxel placement.
pub fn upsample2(coarse: &[f32], coarse_geom: &GridGeometry, fine_dims: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(fine_dims.iter().product());
    for z in 0..fine_dims[2] {
        let cz = fine_to_coarse(z, fine_dims[2]);
        for y in 0..fine_dims[1] {
            let cy = fine_to_coarse(y, fine_dims[1]);
            for x in 0..fine_dims[0] {
                let cx = fine_to_coarse(x, fine_dims[0]);
                out.push(crate::volume::sample_trilinear(coarse, coarse_geom, [cx, cy, cz]) as f32);
            }
        }
    }
    out
}
