//! Separable Gaussian smoothing on dense 3-D grids.
//!
//! Kernels are sampled Gaussians truncated at `ceil(3 sigma)` and normalized
//! to unit sum. Borders replicate the edge voxel. Each tap is applied to the
//! difference from the centre sample, so constant regions stay exactly
//! constant and the filter commutes exactly with additive offsets.

use std::ops::{Add, Mul, Sub};

use rayon::prelude::*;

/// Scalar types the filters operate on.
pub trait Sample:
    Copy + Send + Sync + Default + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Sample for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Sample for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A dense x-fastest grid without physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Sample> Grid<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims[0] * dims[1] * dims[2], "grid length");
        Self { dims, data }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    /// Keeps every second voxel along each axis, starting at 0.
    pub fn decimate(&self) -> Grid<T> {
        let dims = self.dims.map(|d| d.div_ceil(2));
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(self.get(2 * x, 2 * y, 2 * z));
                }
            }
        }
        Grid { dims, data }
    }
}

/// Half-kernel `[w0, w1, ..., wr]` of a unit-sum Gaussian truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut w: Vec<f64> = (0..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total = w[0] + 2.0 * w[1..].iter().sum::<f64>();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

#[inline]
fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Convolves `grid` with an isotropic Gaussian of standard deviation `sigma` voxels.
pub fn gaussian_blur<T: Sample>(grid: &Grid<T>, sigma: f64) -> Grid<T> {
    let half = gaussian_kernel(sigma);
    if half.len() == 1 {
        return grid.clone();
    }
    let w: Vec<T> = half.iter().map(|&v| T::from_f64(v)).collect();
    let a = blur_x(grid, &w);
    let b = blur_y(&a, &w);
    blur_z(&b, &w)
}

fn blur_x<T: Sample>(g: &Grid<T>, w: &[T]) -> Grid<T> {
    let [nx, _, _] = g.dims;
    let r = w.len() - 1;
    let mut out = vec![T::default(); g.data.len()];
    out.par_chunks_mut(nx)
        .zip(g.data.par_chunks(nx))
        .for_each_init(Vec::new, |padded, (dst, src)| {
            padded.clear();
            padded.extend((0..nx + 2 * r).map(|i| src[clamp(i as isize - r as isize, nx)]));
            for (x, o) in dst.iter_mut().enumerate() {
                let c = padded[x + r];
                let mut acc = T::default();
                for (k, &wk) in w.iter().enumerate().skip(1) {
                    acc = acc + wk * ((padded[x + r + k] - c) + (padded[x + r - k] - c));
                }
                *o = c + acc;
            }
        });
    Grid::new(g.dims, out)
}

/// Weighted sum of row differences: `dst = c + sum_k w_k * ((p_k - c) + (m_k - c))`.
#[inline]
fn combine_rows<'a, T: Sample>(dst: &mut [T], center: &[T], w: &[T], rows: &dyn Fn(usize) -> (&'a [T], &'a [T])) {
    dst.fill(T::default());
    for (k, &wk) in w.iter().enumerate().skip(1) {
        let (p, m) = rows(k);
        for i in 0..dst.len() {
            let c = center[i];
            dst[i] = dst[i] + wk * ((p[i] - c) + (m[i] - c));
        }
    }
    for (d, &c) in dst.iter_mut().zip(center) {
        *d = c + *d;
    }
}

fn blur_y<T: Sample>(g: &Grid<T>, w: &[T]) -> Grid<T> {
    let [nx, ny, _] = g.dims;
    let slice = nx * ny;
    let mut out = vec![T::default(); g.data.len()];
    out.par_chunks_mut(slice)
        .zip(g.data.par_chunks(slice))
        .for_each(|(dst, src)| {
            let row = |y: usize| &src[y * nx..(y + 1) * nx];
            for y in 0..ny {
                let rows = |k: usize| {
                    (
                        row(clamp(y as isize + k as isize, ny)),
                        row(clamp(y as isize - k as isize, ny)),
                    )
                };
                combine_rows(&mut dst[y * nx..(y + 1) * nx], row(y), w, &rows);
            }
        });
    Grid::new(g.dims, out)
}

fn blur_z<T: Sample>(g: &Grid<T>, w: &[T]) -> Grid<T> {
    let [nx, ny, nz] = g.dims;
    let slice = nx * ny;
    let plane = |z: usize| &g.data[z * slice..(z + 1) * slice];
    let mut out = vec![T::default(); g.data.len()];
    out.par_chunks_mut(slice).enumerate().for_each(|(z, dst)| {
        let rows = |k: usize| {
            (
                plane(clamp(z as isize + k as isize, nz)),
                plane(clamp(z as isize - k as isize, nz)),
            )
        };
        combine_rows(dst, plane(z), w, &rows);
    });
    Grid::new(g.dims, out)
}
