//! 64-bin gradient-orientation histogram descriptors (8 spatial octants x 8
//! orientation octants) and organ labelling of keypoints.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::filter::{gaussian_blur, Grid};
use crate::scalespace::Keypoint;
use crate::volume::{LabelVolume, ScalarVolume, BACKGROUND};

pub const DESCRIPTOR_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorConfig {
    /// Edge of the cubic support window, in multiples of the keypoint sigma.
    pub support_factor: f64,
    /// Spatial Gaussian weighting sigma, in multiples of the keypoint sigma.
    pub weight_factor: f64,
    /// Saturation level applied after L2 normalization.
    pub clip: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            support_factor: 8.0,
            weight_factor: 2.0,
            clip: 0.2,
        }
    }
}

impl DescriptorConfig {
    /// Half-edge of the support cube, in voxels.
    pub fn half_width(&self, sigma: f64) -> usize {
        (0.5 * self.support_factor * sigma).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptor64(pub [f32; DESCRIPTOR_LEN]);

impl Descriptor64 {
    pub fn values(&self) -> &[f32; DESCRIPTOR_LEN] {
        &self.0
    }

    /// Euclidean distance, accumulated in index order.
    #[inline]
    pub fn distance(&self, other: &Descriptor64) -> f32 {
        let mut acc = 0.0f32;
        for i in 0..DESCRIPTOR_LEN {
            let d = self.0[i] - other.0[i];
            acc += d * d;
        }
        acc.sqrt()
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

/// Why a keypoint produced no descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    /// The support cube (plus gradient stencil) leaves the volume.
    OutOfBounds,
    /// Every gradient in the support is zero.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescribedKeypoint {
    pub keypoint: Keypoint,
    pub descriptor: Descriptor64,
    pub label: Option<u16>,
}

/// L2-normalizes `hist` and saturates it at `clip`, redistributing the norm
/// over the unsaturated bins until the result has unit length.
///
/// This is the fixed point of repeated clip-then-renormalize, so applying it
/// twice changes nothing. When fewer than `1 / clip^2` bins are non-zero the
/// fixed point is the uniform vector over the non-zero bins. Returns `None`
/// for an all-zero histogram.
pub fn clip_normalize(hist: &[f64; DESCRIPTOR_LEN], clip: f64) -> Option<[f64; DESCRIPTOR_LEN]> {
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    let unit: Vec<f64> = hist.iter().map(|v| v / norm).collect();
    let mut order: Vec<usize> = (0..DESCRIPTOR_LEN).filter(|&i| unit[i] > 0.0).collect();
    order.sort_by(|&a, &b| unit[b].total_cmp(&unit[a]).then(a.cmp(&b)));
    let support = order.len();
    let mut out = [0.0; DESCRIPTOR_LEN];

    if (support as f64) * clip * clip <= 1.0 {
        let v = 1.0 / (support as f64).sqrt();
        for &i in &order {
            out[i] = v;
        }
        return Some(out);
    }

    // tail[j] = sum of squares of the j-th largest and smaller components.
    let mut tail = vec![0.0; support + 1];
    for j in (0..support).rev() {
        tail[j] = tail[j + 1] + unit[order[j]] * unit[order[j]];
    }
    for clipped in 0..support {
        let rest = 1.0 - clipped as f64 * clip * clip;
        let scale = (rest / tail[clipped]).sqrt();
        if scale * unit[order[clipped]] <= clip {
            for (rank, &i) in order.iter().enumerate() {
                out[i] = if rank < clipped { clip } else { scale * unit[i] };
            }
            return Some(out);
        }
    }
    unreachable!("support * clip^2 > 1 guarantees a feasible split")
}

#[inline]
fn octant_split(c: f64) -> [f64; 2] {
    // [weight of negative half, weight of positive half]
    if c > 0.0 {
        [0.0, 1.0]
    } else if c < 0.0 {
        [1.0, 0.0]
    } else {
        [0.5, 0.5]
    }
}

/// Raw (unnormalized) 64-bin histogram of `smoothed` around `center`.
fn histogram(
    smoothed: &Grid<f64>,
    center: [usize; 3],
    sigma: f64,
    cfg: &DescriptorConfig,
) -> Result<[f64; DESCRIPTOR_LEN], Rejection> {
    let h = cfg.half_width(sigma) as isize;
    for a in 0..3 {
        let c = center[a] as isize;
        if c - h - 1 < 0 || c + h + 1 >= smoothed.dims[a] as isize {
            return Err(Rejection::OutOfBounds);
        }
    }
    let sw = cfg.weight_factor * sigma;
    let inv = 1.0 / (2.0 * sw * sw);
    let [nx, ny, _] = smoothed.dims;
    let sx = 1usize;
    let sy = nx;
    let sz = nx * ny;
    let mut hist = [0.0; DESCRIPTOR_LEN];
    let mut any = false;
    for dz in -h..=h {
        for dy in -h..=h {
            for dx in -h..=h {
                let x = (center[0] as isize + dx) as usize;
                let y = (center[1] as isize + dy) as usize;
                let z = (center[2] as isize + dz) as usize;
                let i = smoothed.index(x, y, z);
                let d = &smoothed.data;
                let g = [
                    0.5 * (d[i + sx] - d[i - sx]),
                    0.5 * (d[i + sy] - d[i - sy]),
                    0.5 * (d[i + sz] - d[i - sz]),
                ];
                let mag = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if mag == 0.0 {
                    continue;
                }
                any = true;
                let r2 = (dx * dx + dy * dy + dz * dz) as f64;
                let weight = mag * (-r2 * inv).exp();
                let sp = [octant_split(dx as f64), octant_split(dy as f64), octant_split(dz as f64)];
                let or = [octant_split(g[0]), octant_split(g[1]), octant_split(g[2])];
                for s in 0..8 {
                    let ws = sp[0][s & 1] * sp[1][(s >> 1) & 1] * sp[2][(s >> 2) & 1];
                    if ws == 0.0 {
                        continue;
                    }
                    for o in 0..8 {
                        let wo = or[0][o & 1] * or[1][(o >> 1) & 1] * or[2][(o >> 2) & 1];
                        if wo != 0.0 {
                            hist[s * 8 + o] += weight * ws * wo;
                        }
                    }
                }
            }
        }
    }
    if !any {
        return Err(Rejection::Degenerate);
    }
    Ok(hist)
}

/// Descriptor of `kp` computed on an image already smoothed to `kp.sigma`.
pub fn compute_descriptor(smoothed: &Grid<f64>, kp: &Keypoint, cfg: &DescriptorConfig) -> Result<Descriptor64, Rejection> {
    let mut center = [0usize; 3];
    for a in 0..3 {
        let c = kp.x[a].round();
        if c < 0.0 || c >= smoothed.dims[a] as f64 {
            return Err(Rejection::OutOfBounds);
        }
        center[a] = c as usize;
    }
    let hist = histogram(smoothed, center, kp.sigma, cfg)?;
    let normalized = clip_normalize(&hist, cfg.clip).ok_or(Rejection::Degenerate)?;
    Ok(Descriptor64(normalized.map(|v| v as f32)))
}

/// Computes descriptors for keypoints of one volume, smoothing the base image
/// once per distinct keypoint scale. Output order follows input order;
/// rejected keypoints are dropped.
pub fn describe_keypoints(vol: &ScalarVolume, keypoints: &[Keypoint], cfg: &DescriptorConfig) -> Vec<DescribedKeypoint> {
    let base = Grid::new(vol.dims(), vol.data().iter().map(|&v| v as f64).collect());
    let mut scales: BTreeMap<u64, Grid<f64>> = BTreeMap::new();
    for kp in keypoints {
        scales
            .entry(kp.sigma.to_bits())
            .or_insert_with(|| gaussian_blur(&base, kp.sigma));
    }
    keypoints
        .par_iter()
        .filter_map(|kp| {
            let smoothed = &scales[&kp.sigma.to_bits()];
            compute_descriptor(smoothed, kp, cfg)
                .ok()
                .map(|descriptor| DescribedKeypoint {
                    keypoint: *kp,
                    descriptor,
                    label: None,
                })
        })
        .collect()
}

/// Labels keypoints from a segmentation at their rounded positions and drops
/// those lying in background (or outside the grid).
pub fn assign_labels(kps: Vec<DescribedKeypoint>, seg: &LabelVolume) -> Vec<DescribedKeypoint> {
    kps.into_iter()
        .filter_map(|mut k| match seg.label_at(k.keypoint.x) {
            Some(l) if l != BACKGROUND => {
                k.label = Some(l);
                Some(k)
            }
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn textured(n: usize, shift: [i64; 3]) -> Grid<f64> {
        let blobs = [
            ([20.0, 22.0, 19.0], 2.0, 80.0),
            ([25.0, 18.0, 23.0], 3.0, -50.0),
            ([17.0, 17.0, 26.0], 1.5, 40.0),
        ];
        let mut data = Vec::with_capacity(n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = [
                        x as f64 - shift[0] as f64,
                        y as f64 - shift[1] as f64,
                        z as f64 - shift[2] as f64,
                    ];
                    let v: f64 = blobs
                        .iter()
                        .map(|&(c, s, a): &([f64; 3], f64, f64)| {
                            let d2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                            a * (-d2 / (2.0 * s * s)).exp()
                        })
                        .sum::<f64>()
                        + 0.3 * p[0];
                    data.push(v);
                }
            }
        }
        Grid::new([n, n, n], data)
    }

    fn kp(x: [f64; 3], sigma: f64) -> Keypoint {
        Keypoint { x, sigma, dog_value: 1.0 }
    }

    #[test]
    fn constant_region_is_degenerate() {
        let g = Grid::new([20, 20, 20], vec![5.0; 8000]);
        let cfg = DescriptorConfig::default();
        assert_eq!(compute_descriptor(&g, &kp([10.0; 3], 1.6), &cfg), Err(Rejection::Degenerate));
    }

    #[test]
    fn support_must_fit() {
        let g = textured(40, [0; 3]);
        let cfg = DescriptorConfig::default();
        // half width floor(4 * 2) = 8, plus one voxel of stencil
        assert_eq!(compute_descriptor(&g, &kp([8.0, 20.0, 20.0], 2.0), &cfg), Err(Rejection::OutOfBounds));
        assert!(compute_descriptor(&g, &kp([9.0, 20.0, 20.0], 2.0), &cfg).is_ok());
        assert_eq!(compute_descriptor(&g, &kp([31.0, 20.0, 20.0], 2.0), &cfg), Err(Rejection::OutOfBounds));
    }

    #[test]
    fn unit_norm_and_clipped() {
        let g = gaussian_blur(&textured(40, [0; 3]), 2.0);
        let d = compute_descriptor(&g, &kp([20.0, 20.0, 21.0], 2.0), &DescriptorConfig::default()).unwrap();
        assert!((d.norm() - 1.0).abs() < 1e-5);
        assert!(d.values().iter().all(|&v| (0.0..=0.2 + 1e-6).contains(&v)));
    }

    #[test]
    fn affine_intensity_leaves_descriptor_unchanged() {
        let g = gaussian_blur(&textured(40, [0; 3]), 2.0);
        let mapped = Grid::new(g.dims, g.data.iter().map(|v| 3.5 * v - 120.0).collect());
        let cfg = DescriptorConfig::default();
        let k = kp([21.0, 20.0, 22.0], 2.0);
        let a = compute_descriptor(&g, &k, &cfg).unwrap();
        let b = compute_descriptor(&mapped, &k, &cfg).unwrap();
        assert!(a.distance(&b) < 1e-6, "{}", a.distance(&b));
    }

    #[test]
    fn translation_moves_descriptor() {
        let t = [3i64, -2, 4];
        let a = gaussian_blur(&textured(48, [0; 3]), 2.0);
        let b = gaussian_blur(&textured(48, t), 2.0);
        let cfg = DescriptorConfig::default();
        let p = [21.0, 21.0, 22.0];
        let q = [p[0] + 3.0, p[1] - 2.0, p[2] + 4.0];
        let da = compute_descriptor(&a, &kp(p, 2.0), &cfg).unwrap();
        let db = compute_descriptor(&b, &kp(q, 2.0), &cfg).unwrap();
        assert!(da.distance(&db) < 1e-6, "{}", da.distance(&db));
    }

    #[test]
    fn only_support_matters() {
        let g = gaussian_blur(&textured(40, [0; 3]), 2.0);
        let cfg = DescriptorConfig::default();
        let k = kp([20.0, 20.0, 20.0], 1.6);
        let h = cfg.half_width(1.6) as usize + 1;
        let mut masked = g.clone();
        for z in 0..40 {
            for y in 0..40 {
                for x in 0..40 {
                    let inside = [x, y, z].iter().all(|&c| c + h >= 20 && c <= 20 + h);
                    if !inside {
                        let i = masked.index(x, y, z);
                        masked.data[i] = 0.0;
                    }
                }
            }
        }
        assert_eq!(compute_descriptor(&g, &k, &cfg), compute_descriptor(&masked, &k, &cfg));
    }

    #[test]
    fn clip_normalize_sparse_support_is_uniform() {
        let mut h = [0.0; DESCRIPTOR_LEN];
        h[3] = 10.0;
        h[7] = 1.0;
        let out = clip_normalize(&h, 0.2).unwrap();
        assert!((out[3] - out[7]).abs() < 1e-15);
        assert!((out[3] - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(clip_normalize(&[0.0; DESCRIPTOR_LEN], 0.2), None);
    }

    #[test]
    fn clip_normalize_dense_saturates() {
        let mut h = [1.0; DESCRIPTOR_LEN];
        h[0] = 50.0;
        h[1] = 20.0;
        let out = clip_normalize(&h, 0.2).unwrap();
        let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((out[0] - 0.2).abs() < 1e-15 && (out[1] - 0.2).abs() < 1e-15);
        assert!(out[2] < 0.2);
    }

    #[test]
    fn labels_from_segmentation() {
        let g = Geometry::new([4, 4, 4]);
        let mut data = vec![0u16; 64];
        data[g.index(1, 2, 3)] = 3;
        let seg = LabelVolume::from_data(g, data).unwrap();
        let d = Descriptor64([0.125; DESCRIPTOR_LEN]);
        let mk = |x: [f64; 3]| DescribedKeypoint {
            keypoint: kp(x, 1.6),
            descriptor: d,
            label: None,
        };
        let out = assign_labels(vec![mk([1.0, 2.0, 3.0]), mk([0.0, 0.0, 0.0]), mk([1.2, 1.8, 2.9])], &seg);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|k| k.label == Some(3)));
        assert_eq!(out[1].keypoint.x, [1.2, 1.8, 2.9]);
    }

    /// A smooth pattern sampled at twice the resolution gives nearly the same
    /// descriptor at the corresponding point with doubled sigma.
    #[test]
    fn scale_consistency_under_upsampling() {
        let pattern = |p: [f64; 3]| {
            let blob = |c: [f64; 3], s: f64, a: f64| {
                let d2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                a * (-d2 / (2.0 * s * s)).exp()
            };
            blob([15.0, 16.0, 15.5], 2.5, 90.0) + blob([18.0, 13.0, 17.0], 3.0, -60.0) + 0.8 * p[1]
        };
        let sample = |n: usize, scale: f64| {
            let mut data = Vec::with_capacity(n * n * n);
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        data.push(pattern([x as f64 / scale, y as f64 / scale, z as f64 / scale]));
                    }
                }
            }
            Grid::new([n, n, n], data)
        };
        let cfg = DescriptorConfig::default();
        let s = 2.0;
        let a = gaussian_blur(&sample(32, 1.0), s);
        let b = gaussian_blur(&sample(64, 2.0), 2.0 * s);
        let da = compute_descriptor(&a, &kp([16.0, 15.0, 16.0], s), &cfg).unwrap();
        let db = compute_descriptor(&b, &kp([32.0, 30.0, 32.0], 2.0 * s), &cfg).unwrap();
        assert!(da.distance(&db) < 0.1, "{}", da.distance(&db));
    }
}
