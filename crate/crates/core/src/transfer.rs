//! Transfer of whole organ masks along keypoint matches and their fusion into
//! per-label probability maps and a final labelling.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::DescribedKeypoint;
use crate::matching::Match;
use crate::volume::{Geometry, LabelVolume, ScalarVolume, VolumeError, BACKGROUND};
use crate::voting::LabelPosterior;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Intensity noise scale used for labels without an entry in `nu`.
    pub nu_default: f64,
    /// Per-label intensity noise scale.
    pub nu: BTreeMap<u16, f64>,
    /// Minimum normalized score for a voxel to leave background.
    pub background_threshold: f64,
    /// Labels a consistent match of a given keypoint label may transfer.
    /// `None` means every label transfers only itself.
    pub cross_label: Option<BTreeMap<u16, Vec<u16>>>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            nu_default: 50.0,
            nu: BTreeMap::new(),
            background_threshold: 0.15,
            cross_label: None,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.nu_default > 0.0) || self.nu.values().any(|&v| !(v > 0.0)) {
            return Err("nu values must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.background_threshold) {
            return Err("background_threshold must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn nu_for(&self, label: u16) -> f64 {
        self.nu.get(&label).copied().unwrap_or(self.nu_default)
    }

    /// Labels transferred by a consistent match whose training keypoint has `label`.
    pub fn transferable(&self, label: u16) -> Vec<u16> {
        match &self.cross_label {
            None => vec![label],
            Some(map) => map.get(&label).cloned().unwrap_or_default(),
        }
    }
}

/// A labelled training subject prepared for transfer.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub image: ScalarVolume,
    pub labels: LabelVolume,
    pub keypoints: Vec<DescribedKeypoint>,
    /// Voxel coordinates of each label; `masks[l - 1]` belongs to label `l`.
    masks: Vec<Vec<[i32; 3]>>,
}

impl Atlas {
    pub fn new(image: ScalarVolume, labels: LabelVolume, keypoints: Vec<DescribedKeypoint>) -> Result<Self, VolumeError> {
        labels.ensure_same_grid(image.geometry())?;
        let g = *labels.geometry();
        let mut masks = vec![Vec::new(); labels.num_labels() as usize];
        for (i, &l) in labels.data().iter().enumerate() {
            if l != BACKGROUND {
                let c = g.coords(i);
                masks[(l - 1) as usize].push([c[0] as i32, c[1] as i32, c[2] as i32]);
            }
        }
        Ok(Self {
            image,
            labels,
            keypoints,
            masks,
        })
    }

    pub fn mask(&self, label: u16) -> &[[i32; 3]] {
        label
            .checked_sub(1)
            .and_then(|i| self.masks.get(i as usize))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn num_labels(&self) -> u16 {
        self.labels.num_labels()
    }
}

/// Accumulated per-label scores on the test grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    pub geometry: Geometry,
    /// `maps[l - 1]` is the score volume of label `l`.
    pub maps: Vec<Vec<f64>>,
    /// Total transfer weight that reached the grid, per label.
    pub z_norm: Vec<f64>,
    pub transfer_counts: Vec<usize>,
}

impl ProbabilityMaps {
    pub fn map_volume(&self, label: u16) -> Option<ScalarVolume> {
        let m = self.maps.get(label.checked_sub(1)? as usize)?;
        ScalarVolume::new(self.geometry, m.iter().map(|&v| v as f32).collect()).ok()
    }

    /// `S^l(x) / z_norm[l]`, or 0 for labels that received nothing.
    pub fn normalized(&self, label: u16, voxel: usize) -> f64 {
        let i = (label - 1) as usize;
        if self.z_norm[i] > 0.0 {
            self.maps[i][voxel] / self.z_norm[i]
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelVolume,
    pub probability_maps: ProbabilityMaps,
}

#[derive(Debug, Clone, Copy)]
struct TransferEvent {
    atlas: usize,
    label: u16,
    shift: [i32; 3],
    weight: f64,
}

/// Intensity-similarity weight in (0, 1].
#[inline]
pub fn intensity_weight(test: f32, train: f32, nu: f64) -> f64 {
    let d = test as f64 - train as f64;
    (-(d * d) / (2.0 * nu * nu)).exp()
}

/// Fuses organ masks from all consistent matches.
///
/// `matches[i]` holds the matches of test keypoint `i` and `votes[i]` its
/// label posterior. A match transfers only if its training keypoint's label
/// equals the keypoint's voted label; it then shifts the masks of
/// `cfg.transferable(label)` by the rounded match translation.
pub fn transfer_segmentation(
    test: &ScalarVolume,
    votes: &[LabelPosterior],
    matches: &[Vec<Match>],
    atlases: &[Atlas],
    num_labels: u16,
    cfg: &TransferConfig,
) -> SegmentationResult {
    let g = *test.geometry();
    let mut events = Vec::new();
    for (post, ms) in votes.iter().zip(matches) {
        let Some(voted) = post.voted_label else { continue };
        let p_label = post.posterior(voted);
        for m in ms {
            let Some(atlas) = atlases.get(m.train_image) else { continue };
            let Some(train_label) = atlas.keypoints.get(m.train_index).and_then(|k| k.label) else {
                continue;
            };
            if train_label != voted {
                continue;
            }
            let shift = m.translation.map(|t| t.round() as i32);
            for label in cfg.transferable(train_label) {
                if label >= 1 && label <= num_labels {
                    events.push(TransferEvent {
                        atlas: m.train_image,
                        label,
                        shift,
                        weight: p_label * m.p_m,
                    });
                }
            }
        }
    }

    let dims = g.dims.map(|d| d as i32);
    let per_label: Vec<(Vec<f64>, f64, usize)> = (1..=num_labels)
        .into_par_iter()
        .map(|label| {
            let mut map = vec![0.0; g.len()];
            let mut z = 0.0;
            let mut count = 0;
            let nu = cfg.nu_for(label);
            for ev in events.iter().filter(|e| e.label == label) {
                let atlas = &atlases[ev.atlas];
                let src = atlas.image.data();
                let sg = atlas.image.geometry();
                let mut reached = false;
                for &v in atlas.mask(label) {
                    let y = [v[0] + ev.shift[0], v[1] + ev.shift[1], v[2] + ev.shift[2]];
                    if (0..3).any(|a| y[a] < 0 || y[a] >= dims[a]) {
                        continue;
                    }
                    reached = true;
                    let yi = g.index(y[0] as usize, y[1] as usize, y[2] as usize);
                    let vi = sg.index(v[0] as usize, v[1] as usize, v[2] as usize);
                    map[yi] += intensity_weight(test.data()[yi], src[vi], nu) * ev.weight;
                }
                if reached {
                    z += ev.weight;
                    count += 1;
                }
            }
            (map, z, count)
        })
        .collect();

    let mut maps = Vec::with_capacity(per_label.len());
    let mut z_norm = Vec::with_capacity(per_label.len());
    let mut transfer_counts = Vec::with_capacity(per_label.len());
    for (m, z, c) in per_label {
        maps.push(m);
        z_norm.push(z);
        transfer_counts.push(c);
    }
    let pm = ProbabilityMaps {
        geometry: g,
        maps,
        z_norm,
        transfer_counts,
    };

    let labels: Vec<u16> = (0..g.len())
        .into_par_iter()
        .map(|x| {
            let mut best = (BACKGROUND, 0.0f64);
            let mut max_q = 0.0f64;
            for label in 1..=num_labels {
                let s = pm.maps[(label - 1) as usize][x];
                if s > best.1 {
                    best = (label, s);
                }
                max_q = max_q.max(pm.normalized(label, x));
            }
            if best.0 != BACKGROUND && max_q >= cfg.background_threshold {
                best.0
            } else {
                BACKGROUND
            }
        })
        .collect();
    let labels = LabelVolume::new(g, labels, num_labels).expect("labels bounded by num_labels");
    SegmentationResult {
        labels,
        probability_maps: pm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{Descriptor64, DESCRIPTOR_LEN};
    use crate::scalespace::Keypoint;

    fn kp(x: [f64; 3], label: u16) -> DescribedKeypoint {
        DescribedKeypoint {
            keypoint: Keypoint { x, sigma: 2.0, dog_value: 1.0 },
            descriptor: Descriptor64([0.125; DESCRIPTOR_LEN]),
            label: Some(label),
        }
    }

    /// 16^3 volume with a cube of label 1 and a cube of label 2.
    fn atlas() -> Atlas {
        let g = Geometry::new([16, 16, 16]);
        let mut labels = vec![0u16; g.len()];
        let mut image = vec![10.0f32; g.len()];
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let i = g.index(x, y, z);
                    if (2..6).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z) {
                        labels[i] = 1;
                        image[i] = 100.0 + x as f32;
                    } else if (9..14).contains(&x) && (8..12).contains(&y) && (3..9).contains(&z) {
                        labels[i] = 2;
                        image[i] = 200.0 - y as f32;
                    }
                }
            }
        }
        let kps = vec![kp([3.0, 3.0, 3.0], 1), kp([11.0, 10.0, 5.0], 2), kp([4.0, 4.0, 4.0], 1)];
        Atlas::new(
            ScalarVolume::new(g, image).unwrap(),
            LabelVolume::new(g, labels, 3).unwrap(),
            kps,
        )
        .unwrap()
    }

    fn self_match(i: usize, p_m: f64) -> Match {
        Match {
            test_index: i,
            train_image: 0,
            train_index: i,
            desc_dist: 0.0,
            translation: [0.0; 3],
            p_m,
        }
    }

    fn vote(label: u16) -> LabelPosterior {
        let mut p = LabelPosterior::unlabeled(3);
        p.scores[(label - 1) as usize] = 1.0;
        p.voted_label = Some(label);
        p
    }

    #[test]
    fn identity_transfer_recovers_segmentation() {
        let a = atlas();
        let votes = vec![vote(1), vote(2), vote(1)];
        let matches = vec![vec![self_match(0, 0.3)], vec![self_match(1, 0.3)], vec![self_match(2, 0.4)]];
        let r = transfer_segmentation(&a.image, &votes, &matches, std::slice::from_ref(&a), 3, &TransferConfig::default());
        assert_eq!(r.labels.data(), a.labels.data());
        assert_eq!(r.probability_maps.transfer_counts, vec![2, 1, 0]);
        assert!(r.probability_maps.maps[2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_matches_all_background() {
        let a = atlas();
        let votes = vec![vote(1)];
        let r = transfer_segmentation(&a.image, &votes, &[vec![]], std::slice::from_ref(&a), 3, &TransferConfig::default());
        assert!(r.labels.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn only_voted_label_map_updated() {
        let a = atlas();
        let votes = vec![vote(2)];
        // Training keypoint 1 is label 2; keypoint 0 (label 1) is inconsistent.
        let ms = vec![vec![self_match(1, 0.5), Match { train_index: 0, ..self_match(0, 0.5) }]];
        let r = transfer_segmentation(&a.image, &votes, &ms, std::slice::from_ref(&a), 3, &TransferConfig::default());
        let pm = &r.probability_maps;
        assert!(pm.maps[0].iter().all(|&v| v == 0.0));
        assert!(pm.maps[1].iter().any(|&v| v > 0.0));
        assert_eq!(pm.z_norm[0], 0.0);
    }

    #[test]
    fn shift_applies_and_weights_intensity() {
        let a = atlas();
        let mut m = self_match(0, 1.0);
        m.translation = [1.4, 0.0, -0.6]; // rounds to (1, 0, -1)
        let r = transfer_segmentation(&a.image, &[vote(1)], &[vec![m]], std::slice::from_ref(&a), 3, &TransferConfig::default());
        let g = r.labels.geometry();
        let src = g.index(3, 3, 3);
        let dst = g.index(4, 3, 2);
        let w = r.probability_maps.maps[0][dst];
        let expect = intensity_weight(a.image.data()[dst], a.image.data()[src], 50.0);
        assert!((w - expect).abs() < 1e-15);
        assert!(w > 0.0 && w <= 1.0);
    }

    #[test]
    fn out_of_bounds_transfer_contributes_nothing() {
        let a = atlas();
        let mut m = self_match(0, 1.0);
        m.translation = [40.0, 0.0, 0.0];
        let r = transfer_segmentation(&a.image, &[vote(1)], &[vec![m]], std::slice::from_ref(&a), 3, &TransferConfig::default());
        assert_eq!(r.probability_maps.z_norm[0], 0.0);
        assert_eq!(r.probability_maps.transfer_counts[0], 0);
        assert!(r.labels.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn cross_label_variants() {
        let a = atlas();
        let votes = vec![vote(1)];
        let ms = vec![vec![self_match(0, 1.0)]];
        let base = transfer_segmentation(&a.image, &votes, &ms, std::slice::from_ref(&a), 3, &TransferConfig::default());

        let identity = TransferConfig {
            cross_label: Some((1..=3).map(|l| (l, vec![l])).collect()),
            ..Default::default()
        };
        let same = transfer_segmentation(&a.image, &votes, &ms, std::slice::from_ref(&a), 3, &identity);
        assert_eq!(same, base);

        let empty = TransferConfig {
            cross_label: Some((1..=3).map(|l| (l, vec![])).collect()),
            ..Default::default()
        };
        let none = transfer_segmentation(&a.image, &votes, &ms, std::slice::from_ref(&a), 3, &empty);
        assert!(none.labels.data().iter().all(|&l| l == 0));

        let across = TransferConfig {
            cross_label: Some(BTreeMap::from([(1, vec![1, 2])])),
            ..Default::default()
        };
        let both = transfer_segmentation(&a.image, &votes, &ms, std::slice::from_ref(&a), 3, &across);
        assert_eq!(both.labels.data(), a.labels.data());
    }

    #[test]
    fn infinite_nu_reduces_to_weighted_counting() {
        let a = atlas();
        let g = *a.image.geometry();
        // A test image unrelated to the atlas intensities.
        let test = ScalarVolume::from_fn(g, |x, y, z| ((x * 7 + y * 3 + z) % 50) as f32).unwrap();
        let mut m1 = self_match(0, 0.6);
        m1.translation = [1.0, 2.0, 0.0];
        let mut m2 = self_match(2, 0.4);
        m2.translation = [0.0, 0.0, 3.0];
        let votes = vec![vote(1), vote(1), vote(1)];
        let ms = vec![vec![m1], vec![], vec![m2]];
        let cfg = TransferConfig {
            nu_default: f64::INFINITY,
            ..Default::default()
        };
        let r = transfer_segmentation(&test, &votes, &ms, std::slice::from_ref(&a), 3, &cfg);
        // Counting oracle.
        let mut expect = vec![0.0; g.len()];
        for (shift, w) in [([1i64, 2, 0], 0.6), ([0, 0, 3], 0.4)] {
            for (i, &l) in a.labels.data().iter().enumerate() {
                if l == 1 {
                    let c = g.coords(i);
                    let p = [c[0] as i64 + shift[0], c[1] as i64 + shift[1], c[2] as i64 + shift[2]];
                    if let Some(j) = g.checked_index(p) {
                        expect[j] += w;
                    }
                }
            }
        }
        for (got, want) in r.probability_maps.maps[0].iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adding_atlas_is_monotone() {
        let a = atlas();
        let b = atlas();
        let votes = vec![vote(1)];
        let one = transfer_segmentation(&a.image, &votes, &[vec![self_match(0, 1.0)]], &[a.clone()], 3, &TransferConfig::default());
        let mut m2 = self_match(0, 1.0);
        m2.train_image = 1;
        m2.translation = [2.0, 1.0, 0.0];
        let two = transfer_segmentation(&a.image, &votes, &[vec![self_match(0, 1.0), m2]], &[a.clone(), b], 3, &TransferConfig::default());
        for (p, q) in one.probability_maps.maps[0].iter().zip(&two.probability_maps.maps[0]) {
            assert!(q >= p);
        }
    }
}
