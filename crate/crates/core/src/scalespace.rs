//! Gaussian and difference-of-Gaussians scale space, and keypoint detection
//! as strict local extrema of the DoG stack.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{gaussian_blur, Grid};
use crate::volume::ScalarVolume;

#[derive(Debug, Error, PartialEq)]
pub enum ScaleSpaceError {
    #[error("invalid scale-space config: {0}")]
    Config(String),
    #[error("volume {dims:?} too small for {octaves} octave(s): octave {octave} would be {octave_dims:?}")]
    TooSmall {
        dims: [usize; 3],
        octaves: usize,
        octave: usize,
        octave_dims: [usize; 3],
    },
}

/// Minimum voxels per axis of the input volume.
pub const MIN_DIM: usize = 8;
/// Minimum voxels per axis of the coarsest octave.
pub const MIN_OCTAVE_DIM: usize = 4;

/// Extremum magnitude below which DoG responses are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ContrastThreshold {
    /// Absolute DoG magnitude in intensity units.
    Absolute(f64),
    /// Fraction of the input's intensity range (max - min).
    RangeFraction(f64),
}

impl ContrastThreshold {
    pub fn resolve(&self, vol: &ScalarVolume) -> f64 {
        match *self {
            ContrastThreshold::Absolute(v) => v,
            ContrastThreshold::RangeFraction(f) => {
                let (lo, hi) = vol.range();
                f * (hi as f64 - lo as f64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleSpaceConfig {
    /// Blur of the first level, in voxels.
    pub sigma0: f64,
    /// Multiplicative scale step between adjacent levels.
    pub kappa: f64,
    pub levels_per_octave: usize,
    pub num_octaves: usize,
    pub contrast_threshold: ContrastThreshold,
}

impl Default for ScaleSpaceConfig {
    fn default() -> Self {
        Self {
            sigma0: 1.6,
            kappa: 2f64.powf(1.0 / 3.0),
            levels_per_octave: 3,
            num_octaves: 3,
            contrast_threshold: ContrastThreshold::RangeFraction(0.005),
        }
    }
}

impl ScaleSpaceConfig {
    pub fn validate(&self) -> Result<(), ScaleSpaceError> {
        let err = |m: &str| Err(ScaleSpaceError::Config(m.to_string()));
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return err("sigma0 must be positive");
        }
        if !(self.kappa > 1.0 && self.kappa.is_finite()) {
            return err("kappa must exceed 1");
        }
        if self.levels_per_octave == 0 || self.num_octaves == 0 {
            return err("levels_per_octave and num_octaves must be positive");
        }
        let t = match self.contrast_threshold {
            ContrastThreshold::Absolute(v) | ContrastThreshold::RangeFraction(v) => v,
        };
        if !(t >= 0.0 && t.is_finite()) {
            return err("contrast_threshold must be non-negative");
        }
        Ok(())
    }

    /// Absolute blur, in base voxels, of level `level` of octave `octave`.
    pub fn sigma_at(&self, octave: usize, level: usize) -> f64 {
        let k = (octave * self.levels_per_octave + level) as f64;
        self.sigma0 * self.kappa.powf(k)
    }
}

/// A detected scale-space extremum, reported in base-resolution voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: [f64; 3],
    pub sigma: f64,
    pub dog_value: f64,
}

/// One octave: `levels_per_octave + 3` Gaussian levels and their differences.
#[derive(Debug, Clone)]
pub struct Octave {
    pub index: usize,
    /// Base voxels per octave voxel (`2^index`).
    pub step: usize,
    /// Absolute blur of each Gaussian level, in base voxels.
    pub sigmas: Vec<f64>,
    pub gaussians: Vec<Grid<f32>>,
    /// `dogs[j] = gaussians[j + 1] - gaussians[j]`.
    pub dogs: Vec<Grid<f32>>,
}

#[derive(Debug, Clone)]
pub struct ScaleSpace {
    pub octaves: Vec<Octave>,
}

impl ScaleSpace {
    /// All Gaussian levels in order, with their absolute blur.
    pub fn levels(&self) -> impl Iterator<Item = (f64, &Grid<f32>)> {
        self.octaves
            .iter()
            .flat_map(|o| o.sigmas.iter().copied().zip(o.gaussians.iter()))
    }
}

fn octave_dims(dims: [usize; 3], octave: usize) -> [usize; 3] {
    dims.map(|d| (0..octave).fold(d, |n, _| n.div_ceil(2)))
}

/// Builds the scale space of `vol`. The input is treated as unblurred; each
/// level is reached from the previous one by an incremental blur so that
/// variances add up to the level's nominal sigma.
pub fn build_scale_space(vol: &ScalarVolume, cfg: &ScaleSpaceConfig) -> Result<ScaleSpace, ScaleSpaceError> {
    cfg.validate()?;
    let dims = vol.dims();
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(ScaleSpaceError::TooSmall {
            dims,
            octaves: cfg.num_octaves,
            octave: 0,
            octave_dims: dims,
        });
    }
    for o in 1..cfg.num_octaves {
        let od = octave_dims(dims, o);
        if od.iter().any(|&d| d < MIN_OCTAVE_DIM) {
            return Err(ScaleSpaceError::TooSmall {
                dims,
                octaves: cfg.num_octaves,
                octave: o,
                octave_dims: od,
            });
        }
    }

    let s = cfg.levels_per_octave;
    let n_levels = s + 3;
    let mut octaves = Vec::with_capacity(cfg.num_octaves);
    let mut seed = Grid::new(dims, vol.data().to_vec());
    let mut seed_sigma = 0.0f64; // blur already in `seed`, in its own voxel units

    for o in 0..cfg.num_octaves {
        let step = 1usize << o;
        let sigmas: Vec<f64> = (0..n_levels).map(|k| cfg.sigma_at(o, k)).collect();
        let mut gaussians = Vec::with_capacity(n_levels);
        let mut current = seed;
        let mut current_sigma = seed_sigma;
        for &abs_sigma in &sigmas {
            let target = abs_sigma / step as f64;
            let inc = (target * target - current_sigma * current_sigma).max(0.0).sqrt();
            current = gaussian_blur(&current, inc);
            current_sigma = target;
            gaussians.push(current.clone());
        }
        let dogs: Vec<Grid<f32>> = gaussians
            .windows(2)
            .map(|w| {
                let data = w[1].data.iter().zip(&w[0].data).map(|(a, b)| a - b).collect();
                Grid::new(w[0].dims, data)
            })
            .collect();
        // The level with twice the octave's base blur seeds the next octave.
        seed = gaussians[s].decimate();
        seed_sigma = sigmas[s] / (2 * step) as f64;
        octaves.push(Octave {
            index: o,
            step,
            sigmas,
            gaussians,
            dogs,
        });
    }
    Ok(ScaleSpace { octaves })
}

/// True if `v` is a strict maximum or strict minimum over the 80 neighbours
/// of `(x, y, z)` in DoG levels `below`, `level` and `above`.
#[inline]
fn is_strict_extremum(below: &Grid<f32>, level: &Grid<f32>, above: &Grid<f32>, x: usize, y: usize, z: usize, v: f32) -> bool {
    let mut greater = true;
    let mut less = true;
    for (li, g) in [level, below, above].into_iter().enumerate() {
        for dz in 0..3 {
            for dy in 0..3 {
                let row = g.index(x - 1, y + dy - 1, z + dz - 1);
                for dx in 0..3 {
                    if li == 0 && dx == 1 && dy == 1 && dz == 1 {
                        continue;
                    }
                    let u = g.data[row + dx];
                    greater &= v > u;
                    less &= v < u;
                    if !(greater || less) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Extrema of one DoG level `j` (1-based interior level) of an octave.
fn level_extrema(oct: &Octave, j: usize, threshold: f64) -> Vec<Keypoint> {
    let dog = &oct.dogs[j];
    let [nx, ny, nz] = dog.dims;
    let sigma = oct.sigmas[j];
    let step = oct.step as f64;
    (1..nz.saturating_sub(1))
        .into_par_iter()
        .map(|z| {
            let mut found = Vec::new();
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    let v = dog.get(x, y, z);
                    if (v.abs() as f64) <= threshold {
                        continue;
                    }
                    if is_strict_extremum(&oct.dogs[j - 1], dog, &oct.dogs[j + 1], x, y, z, v) {
                        found.push(Keypoint {
                            x: [x as f64 * step, y as f64 * step, z as f64 * step],
                            sigma,
                            dog_value: v as f64,
                        });
                    }
                }
            }
            found
        })
        .flatten()
        .collect()
}

/// Keypoints of a prebuilt scale space, ordered by octave, level, then voxel index.
pub fn detect_in(space: &ScaleSpace, threshold: f64) -> Vec<Keypoint> {
    let mut out = Vec::new();
    for oct in &space.octaves {
        for j in 1..oct.dogs.len() - 1 {
            out.extend(level_extrema(oct, j, threshold));
        }
    }
    out
}

pub fn detect_keypoints(vol: &ScalarVolume, cfg: &ScaleSpaceConfig) -> Result<Vec<Keypoint>, ScaleSpaceError> {
    let space = build_scale_space(vol, cfg)?;
    Ok(detect_in(&space, cfg.contrast_threshold.resolve(vol)))
}
