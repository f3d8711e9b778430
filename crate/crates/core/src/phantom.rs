//! Synthetic labelled subjects: textured ellipsoidal organs on a shared
//! template, varied per subject by organ jitter, a global shift and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{Geometry, LabelVolume, ScalarVolume, VolumeError, BACKGROUND};

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom configuration: {0}")]
    Config(String),
    #[error("organs {0} and {1} overlap")]
    Overlap(u16, u16),
    #[error("organ {0} leaves the volume")]
    OutOfBounds(u16),
    #[error("organ {0} is absent")]
    OrganAbsent(u16),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub num_organs: u16,
    pub seed: u64,
    /// Maximum per-organ centre displacement per axis, in voxels.
    pub subject_jitter: f64,
    /// Maximum global shift per axis, in voxels.
    pub global_shift_range: f64,
    pub noise_sigma: f64,
    pub texture_blob_count: usize,
    /// Blobs placed in the body outside all organs.
    pub background_blob_count: usize,
    pub body_intensity: f64,
    pub organ_intensity_base: f64,
    pub organ_intensity_step: f64,
    /// Organs rendered at body intensity without texture.
    pub featureless_organs: Vec<u16>,
    /// Bounding-box dilation used by [`crop_fov`].
    pub fov_margin: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [96, 96, 96],
            num_organs: 6,
            seed: 0,
            subject_jitter: 3.0,
            global_shift_range: 10.0,
            noise_sigma: 2.0,
            texture_blob_count: 8,
            background_blob_count: 80,
            body_intensity: 40.0,
            organ_intensity_base: 50.0,
            organ_intensity_step: 10.0,
            featureless_organs: Vec::new(),
            fov_margin: 10,
        }
    }
}

const BLOB_SIGMA: (f64, f64) = (2.0, 4.0);
const BLOB_AMPLITUDE: (f64, f64) = (50.0, 90.0);
/// Minimum blob centre distance, in units of the summed blob sigmas.
const BLOB_SEPARATION: f64 = 1.5;
/// Minimum distance from a blob centre to the organ surface, in blob sigmas.
const BLOB_EDGE_CLEARANCE: f64 = 1.0;
const AXIS_FRACTION: (f64, f64) = (0.65, 1.0);
/// Exponent of the superellipsoidal body outline.
const BODY_EXPONENT: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Offset from the owning organ centre (or absolute position for body blobs).
    pub offset: [f64; 3],
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganTemplate {
    pub label: u16,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub intensity: f64,
    pub blobs: Vec<Blob>,
}

/// Geometry shared by every subject generated from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub organs: Vec<OrganTemplate>,
    pub body_blobs: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganPlacement {
    pub label: u16,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub jitter: [i64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub subject_id: u64,
    pub global_shift: [i64; 3],
    pub noise_sigma: f64,
    /// Final organ geometry in voxel coordinates of the emitted volume.
    pub organs: Vec<OrganPlacement>,
    /// Lower corner of the crop in the uncropped volume, if cropped.
    pub crop_origin: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub image: ScalarVolume,
    pub labels: LabelVolume,
    pub provenance: Provenance,
}

/// Per-subject variation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variation {
    pub global_shift: [i64; 3],
    pub jitter_seed: u64,
    pub noise_seed: u64,
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let fail = |m: &str| Err(PhantomError::Config(m.into()));
        if self.dims.iter().any(|&d| d < 16) {
            return fail("dims must be at least 16 per axis");
        }
        if self.num_organs == 0 {
            return fail("num_organs must be positive");
        }
        for v in [self.subject_jitter, self.global_shift_range, self.noise_sigma] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail("jitter, shift range and noise must be finite and non-negative");
            }
        }
        if self.featureless_organs.iter().any(|&l| l == 0 || l > self.num_organs) {
            return fail("featureless_organs must name existing organs");
        }
        Ok(())
    }

    fn jitter_max(&self) -> i64 {
        self.subject_jitter.floor() as i64
    }

    fn shift_max(&self) -> i64 {
        self.global_shift_range.floor() as i64
    }

    fn stream_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Variation drawn for `subject_id`.
    pub fn variation(&self, subject_id: u64) -> Variation {
        let mut rng = self.stream_rng(subject_id.wrapping_mul(2).wrapping_add(1));
        let s = self.shift_max();
        Variation {
            global_shift: [0; 3].map(|_: i64| rng.random_range(-s..=s)),
            jitter_seed: rng.random(),
            noise_seed: rng.random(),
        }
    }
}

/// Lays out organs on a grid of cells inside the body.
pub fn build_template(cfg: &PhantomConfig) -> Result<Template, PhantomError> {
    cfg.validate()?;
    let mut rng = cfg.stream_rng(0);
    let n = cfg.num_organs as usize;
    let per_axis = (1..).find(|c: &usize| c * c * c >= n).unwrap_or(1);
    let cells = [per_axis; 3];
    let margin = (cfg.shift_max() + 2) as f64;
    let jitter = cfg.jitter_max() as f64;

    let mut half = [0.0; 3];
    let mut lo = [0.0; 3];
    for a in 0..3 {
        let span = cfg.dims[a] as f64 - 1.0 - 2.0 * margin;
        half[a] = span / cells[a] as f64 / 2.0;
        lo[a] = margin;
    }
    let avail = half.map(|h| h - jitter - 1.0);
    if avail.iter().any(|&v| v < 3.0) {
        return Err(PhantomError::Config(
            "volume too small for the organ count, jitter and shift range".into(),
        ));
    }
    let cap = avail[0].max(avail[1]);
    let avail = [avail[0], avail[1], avail[2].min(cap)];

    let mut organs = Vec::with_capacity(n);
    for k in 0..n {
        let cell = [k % per_axis, (k / per_axis) % per_axis, k / (per_axis * per_axis)];
        let center = [0, 1, 2].map(|a| lo[a] + half[a] * (2 * cell[a] + 1) as f64);
        let semi_axes = avail.map(|v| v * rng.random_range(AXIS_FRACTION.0..=AXIS_FRACTION.1));
        let blobs = place_blobs(&mut rng, cfg.texture_blob_count, semi_axes);
        organs.push(OrganTemplate {
            label: k as u16 + 1,
            center,
            semi_axes,
            intensity: cfg.organ_intensity_base + cfg.organ_intensity_step * k as f64,
            blobs,
        });
    }
    let body_axes = cfg.dims.map(|d| 0.47 * d as f64);
    let body_center = cfg.dims.map(|d| (d as f64 - 1.0) / 2.0);
    let mut body_blobs = Vec::with_capacity(cfg.background_blob_count);
    for _ in 0..1000 * cfg.background_blob_count {
        if body_blobs.len() == cfg.background_blob_count {
            break;
        }
        let p = [0, 1, 2].map(|a| body_center[a] + rng.random_range(-0.8..=0.8) * body_axes[a]);
        let clear = organs
            .iter()
            .all(|o| ellipsoid_value(p, o.center, o.semi_axes.map(|s| s + 6.0)) > 1.0);
        if clear && body_value(p, body_center, body_axes) <= 0.8 {
            body_blobs.push(random_blob(&mut rng, p));
        }
    }
    Ok(Template { organs, body_blobs })
}

/// Up to `count` blobs inside an ellipsoid, kept apart so that each one
/// yields its own scale-space extremum.
fn place_blobs(rng: &mut ChaCha8Rng, count: usize, semi_axes: [f64; 3]) -> Vec<Blob> {
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for _ in 0..200 * count {
        if blobs.len() == count {
            break;
        }
        let b = random_blob(rng, [0.0; 3]);
        let inner = semi_axes.map(|s| (s - BLOB_EDGE_CLEARANCE * b.sigma).max(0.0));
        let offset = sample_in_ellipsoid(rng, inner);
        let apart = blobs.iter().all(|o| {
            let d2: f64 = (0..3).map(|a| (o.offset[a] - offset[a]).powi(2)).sum();
            d2.sqrt() >= BLOB_SEPARATION * (o.sigma + b.sigma)
        });
        if apart {
            blobs.push(Blob { offset, ..b });
        }
    }
    blobs
}

fn random_blob(rng: &mut ChaCha8Rng, offset: [f64; 3]) -> Blob {
    let sigma = rng.random_range(BLOB_SIGMA.0..=BLOB_SIGMA.1);
    let magnitude = rng.random_range(BLOB_AMPLITUDE.0..=BLOB_AMPLITUDE.1);
    let amplitude = if rng.random::<bool>() { magnitude } else { -magnitude };
    Blob {
        offset,
        sigma,
        amplitude,
    }
}

fn sample_in_ellipsoid(rng: &mut ChaCha8Rng, axes: [f64; 3]) -> [f64; 3] {
    loop {
        let u = [0; 3].map(|_: i32| rng.random_range(-1.0..=1.0));
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return [0, 1, 2].map(|a| u[a] * axes[a]);
        }
    }
}

/// `sum(((p - c) / a)^2)`; a point is inside when this is at most 1.
#[inline]
pub fn ellipsoid_value(p: [f64; 3], center: [f64; 3], semi_axes: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - center[a]) / semi_axes[a]).powi(2)).sum()
}

#[inline]
fn body_value(p: [f64; 3], center: [f64; 3], semi_axes: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - center[a]) / semi_axes[a]).powi(BODY_EXPONENT)).sum()
}

#[inline]
fn blob_value(p: [f64; 3], center: [f64; 3], b: &Blob) -> f64 {
    let d2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
    b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
}

/// Generates subject `subject_id`; deterministic in `(cfg.seed, subject_id)`.
pub fn generate_subject(cfg: &PhantomConfig, subject_id: u64) -> Result<Subject, PhantomError> {
    let template = build_template(cfg)?;
    render(cfg, &template, subject_id, cfg.variation(subject_id))
}

/// Renders `template` under an explicit variation.
pub fn render(cfg: &PhantomConfig, template: &Template, subject_id: u64, var: Variation) -> Result<Subject, PhantomError> {
    let g = Geometry::new(cfg.dims);
    let shift = var.global_shift.map(|s| s as f64);
    let j = cfg.jitter_max();
    let mut jrng = ChaCha8Rng::seed_from_u64(var.jitter_seed);
    let placements: Vec<OrganPlacement> = template
        .organs
        .iter()
        .map(|o| {
            let jitter = [0; 3].map(|_: i64| jrng.random_range(-j..=j));
            OrganPlacement {
                label: o.label,
                center: [0, 1, 2].map(|a| o.center[a] + jitter[a] as f64 + shift[a]),
                semi_axes: o.semi_axes,
                jitter,
            }
        })
        .collect();

    let body_center = cfg.dims.map(|d| (d as f64 - 1.0) / 2.0);
    let body_center = [0, 1, 2].map(|a| body_center[a] + shift[a]);
    let body_axes = cfg.dims.map(|d| 0.47 * d as f64);

    let mut labels = vec![BACKGROUND; g.len()];
    let mut image = vec![0.0f32; g.len()];
    for (k, (o, pl)) in template.organs.iter().zip(&placements).enumerate() {
        let featureless = cfg.featureless_organs.contains(&o.label);
        let (lo, hi) = ellipsoid_bounds(pl.center, pl.semi_axes);
        if (0..3).any(|a| lo[a] < 0 || hi[a] >= cfg.dims[a] as i64) {
            return Err(PhantomError::OutOfBounds(o.label));
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = [x as f64, y as f64, z as f64];
                    if ellipsoid_value(p, pl.center, pl.semi_axes) > 1.0 {
                        continue;
                    }
                    let i = g.index(x as usize, y as usize, z as usize);
                    if labels[i] != BACKGROUND {
                        return Err(PhantomError::Overlap(labels[i], o.label));
                    }
                    labels[i] = o.label;
                    image[i] = if featureless {
                        cfg.body_intensity as f32
                    } else {
                        let tex: f64 = o.blobs.iter().map(|b| blob_value(p, add(pl.center, b.offset), b)).sum();
                        (template.organs[k].intensity + tex) as f32
                    };
                }
            }
        }
    }
    for (i, px) in image.iter_mut().enumerate() {
        if labels[i] != BACKGROUND {
            continue;
        }
        let c = g.coords(i);
        let p = c.map(|v| v as f64);
        if body_value(p, body_center, body_axes) <= 1.0 {
            let tex: f64 = template
                .body_blobs
                .iter()
                .map(|b| blob_value(p, add(b.offset, shift), b))
                .sum();
            *px = (cfg.body_intensity + tex) as f32;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| PhantomError::Config(e.to_string()))?;
        let mut nrng = ChaCha8Rng::seed_from_u64(var.noise_seed);
        for px in image.iter_mut() {
            *px += normal.sample(&mut nrng) as f32;
        }
    }
    let num_labels = template.organs.len() as u16;
    Ok(Subject {
        image: ScalarVolume::new(g, image)?,
        labels: LabelVolume::new(g, labels, num_labels)?,
        provenance: Provenance {
            seed: cfg.seed,
            subject_id,
            global_shift: var.global_shift,
            noise_sigma: cfg.noise_sigma,
            organs: placements,
            crop_origin: None,
        },
    })
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Inclusive integer bounding box of an ellipsoid.
pub fn ellipsoid_bounds(center: [f64; 3], semi_axes: [f64; 3]) -> ([i64; 3], [i64; 3]) {
    let lo = [0, 1, 2].map(|a| (center[a] - semi_axes[a]).ceil() as i64);
    let hi = [0, 1, 2].map(|a| (center[a] + semi_axes[a]).floor() as i64);
    (lo, hi)
}

/// Crops a subject to the bounding box of `organ` dilated by `margin` voxels.
pub fn crop_fov(subject: &Subject, organ: u16, margin: usize) -> Result<Subject, PhantomError> {
    let (lo, hi) = subject
        .labels
        .bounding_box(organ)
        .ok_or(PhantomError::OrganAbsent(organ))?;
    let dims = subject.labels.dims();
    let lo = lo.map(|v| v.saturating_sub(margin));
    let hi = [0, 1, 2].map(|a| (hi[a] + margin).min(dims[a]));
    let image = subject.image.crop(lo, hi)?;
    let labels = subject.labels.crop(lo, hi)?;
    let mut provenance = subject.provenance.clone();
    let prior = provenance.crop_origin.unwrap_or([0; 3]);
    provenance.crop_origin = Some([0, 1, 2].map(|a| prior[a] + lo[a]));
    for o in &mut provenance.organs {
        for a in 0..3 {
            o.center[a] -= lo[a] as f64;
        }
    }
    Ok(Subject {
        image,
        labels,
        provenance,
    })
}
