//! Dense 3-D intensity and label volumes sharing a common voxel geometry.
//!
//! Storage is x-fastest: the voxel `(x, y, z)` lives at
//! `x + dims[0] * (y + dims[1] * z)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label value reserved for unsegmented background.
pub const BACKGROUND: u16 = 0;

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], len: usize },
    #[error("dims must be positive, got {0:?}")]
    ZeroDim([usize; 3]),
    #[error("spacing must be strictly positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("label value {value} exceeds num_labels {num_labels}")]
    LabelOutOfRange { value: u16, num_labels: u16 },
    #[error("invalid crop bounds lo={lo:?} hi={hi:?} for dims {dims:?}")]
    CropBounds {
        lo: [usize; 3],
        hi: [usize; 3],
        dims: [usize; 3],
    },
    #[error("geometry mismatch: {0:?} vs {1:?}")]
    GeometryMismatch(Geometry, Geometry),
}

/// Voxel grid geometry: size, voxel spacing (mm) and world origin (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    /// Unit-spacing geometry at the world origin.
    pub fn new(dims: [usize; 3]) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::ZeroDim(self.dims));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::BadSpacing(self.spacing));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Geometry::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Linear index of a signed voxel position, or `None` when outside.
    #[inline]
    pub fn checked_index(&self, p: [i64; 3]) -> Option<usize> {
        for a in 0..3 {
            if p[a] < 0 || p[a] >= self.dims[a] as i64 {
                return None;
            }
        }
        Some(self.index(p[0] as usize, p[1] as usize, p[2] as usize))
    }

    /// Voxel position rounded to the nearest grid point, if inside.
    pub fn round_index(&self, x: [f64; 3]) -> Option<usize> {
        self.checked_index([
            x[0].round() as i64,
            x[1].round() as i64,
            x[2].round() as i64,
        ])
    }

    fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Geometry, VolumeError> {
        let ok = (0..3).all(|a| lo[a] < hi[a] && hi[a] <= self.dims[a]);
        if !ok {
            return Err(VolumeError::CropBounds {
                lo,
                hi,
                dims: self.dims,
            });
        }
        Ok(Geometry {
            dims: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
            spacing: self.spacing,
            origin: [
                self.origin[0] + lo[0] as f64 * self.spacing[0],
                self.origin[1] + lo[1] as f64 * self.spacing[1],
                self.origin[2] + lo[2] as f64 * self.spacing[2],
            ],
        })
    }
}

fn crop_data<T: Copy>(src: &Geometry, data: &[T], dst: &Geometry, lo: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(dst.len());
    for z in 0..dst.dims[2] {
        for y in 0..dst.dims[1] {
            let start = src.index(lo[0], y + lo[1], z + lo[2]);
            out.extend_from_slice(&data[start..start + dst.dims[0]]);
        }
    }
    out
}

/// Intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self, VolumeError> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(VolumeError::LengthMismatch {
                dims: geometry.dims,
                len: data.len(),
            });
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self, VolumeError> {
        Self::new(geometry, vec![value; geometry.len()])
    }

    pub fn from_fn(
        geometry: Geometry,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, VolumeError> {
        geometry.validate()?;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..geometry.dims[2] {
            for y in 0..geometry.dims[1] {
                for x in 0..geometry.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(geometry, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Minimum and maximum intensity.
    pub fn range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ScalarVolume {
        ScalarVolume {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sub-volume `[lo, hi)`; the origin moves by `lo * spacing`.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<ScalarVolume, VolumeError> {
        let geometry = self.geometry.crop(lo, hi)?;
        let data = crop_data(&self.geometry, &self.data, &geometry, lo);
        Ok(ScalarVolume { geometry, data })
    }
}

/// Integer label volume; `0` is background and foreground labels are `1..=num_labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    data: Vec<u16>,
    num_labels: u16,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, data: Vec<u16>, num_labels: u16) -> Result<Self, VolumeError> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(VolumeError::LengthMismatch {
                dims: geometry.dims,
                len: data.len(),
            });
        }
        if let Some(&value) = data.iter().find(|&&v| v > num_labels) {
            return Err(VolumeError::LabelOutOfRange { value, num_labels });
        }
        Ok(Self {
            geometry,
            data,
            num_labels,
        })
    }

    /// Builds a label volume whose `num_labels` is the largest stored value.
    pub fn from_data(geometry: Geometry, data: Vec<u16>) -> Result<Self, VolumeError> {
        let num_labels = data.iter().copied().max().unwrap_or(0);
        Self::new(geometry, data, num_labels)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn num_labels(&self) -> u16 {
        self.num_labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Label at the voxel nearest to `x`, or `None` outside the grid.
    pub fn label_at(&self, x: [f64; 3]) -> Option<u16> {
        self.geometry.round_index(x).map(|i| self.data[i])
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Linear indices of all voxels carrying `label`, ascending.
    pub fn voxels_of(&self, label: u16) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == label).then_some(i))
            .collect()
    }

    /// Inclusive-exclusive bounding box `[lo, hi)` of `label`, if present.
    pub fn bounding_box(&self, label: u16) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut found = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v == label {
                found = true;
                let c = self.geometry.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a] + 1);
                }
            }
        }
        found.then_some((lo, hi))
    }

    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<LabelVolume, VolumeError> {
        let geometry = self.geometry.crop(lo, hi)?;
        let data = crop_data(&self.geometry, &self.data, &geometry, lo);
        Ok(LabelVolume {
            geometry,
            data,
            num_labels: self.num_labels,
        })
    }

    pub fn ensure_same_grid(&self, other: &Geometry) -> Result<(), VolumeError> {
        if self.geometry.dims != other.dims {
            return Err(VolumeError::GeometryMismatch(self.geometry, *other));
        }
        Ok(())
    }
}
