//! Two-stage keypoint matching against one training image at a time, the
//! Hough estimate of the dominant translation, and the kernel density
//! weighting `p(m)` of the surviving matches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::DescribedKeypoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    /// Maximal scale ratio between matched keypoints.
    pub eps_sigma: f64,
    /// Maximal nearest / second-nearest descriptor distance ratio.
    pub ratio_threshold: f64,
    /// Hough bins along each translation axis.
    pub hough_bins: usize,
    /// Fraction of stage-1 matches whose residual defines the spatial radius.
    pub spatial_keep_fraction: f64,
    /// KDE bandwidth in normalized translation coordinates.
    pub kde_sigma: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            eps_sigma: 2.0,
            ratio_threshold: 0.9,
            hough_bins: 10,
            spatial_keep_fraction: 0.10,
            kde_sigma: 0.2,
        }
    }
}

impl MatchingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eps_sigma > 1.0) {
            return Err("eps_sigma must exceed 1".into());
        }
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold < 1.0) {
            return Err("ratio_threshold must lie in (0, 1)".into());
        }
        if self.hough_bins == 0 {
            return Err("hough_bins must be positive".into());
        }
        if !(self.spatial_keep_fraction > 0.0 && self.spatial_keep_fraction <= 1.0) {
            return Err("spatial_keep_fraction must lie in (0, 1]".into());
        }
        if !(self.kde_sigma > 0.0 && self.kde_sigma.is_finite()) {
            return Err("kde_sigma must be positive".into());
        }
        Ok(())
    }
}

/// A correspondence between a test keypoint and a keypoint of training image
/// `train_image`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub test_index: usize,
    pub train_image: usize,
    pub train_index: usize,
    pub desc_dist: f32,
    /// Test position minus training position, in voxels.
    pub translation: [f64; 3],
    /// Translational consistency weight; sums to 1 over one image's matches.
    pub p_m: f64,
}

/// Relative slack on the scale-ratio bounds so that nominally equal ratios
/// (e.g. three levels of `2^(1/3)`) are not split by rounding.
pub const SCALE_RATIO_SLACK: f64 = 1e-9;

#[inline]
pub fn scale_compatible(test_sigma: f64, train_sigma: f64, eps_sigma: f64) -> bool {
    let r = test_sigma / train_sigma;
    r <= eps_sigma * (1.0 + SCALE_RATIO_SLACK) && r >= (1.0 - SCALE_RATIO_SLACK) / eps_sigma
}

#[inline]
fn translation(test: &DescribedKeypoint, train: &DescribedKeypoint) -> [f64; 3] {
    let a = test.keypoint.x;
    let b = train.keypoint.x;
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// `|| (test - train) - t ||_2`.
#[inline]
pub fn residual(translation: [f64; 3], t: [f64; 3]) -> f64 {
    let d = [translation[0] - t[0], translation[1] - t[1], translation[2] - t[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Outcome of one nearest-neighbour search.
struct Nearest {
    best: (usize, f32),
    second: Option<f32>,
}

/// Nearest and second-nearest candidates by descriptor distance; ties go to
/// the lower training index.
fn nearest_two(test: &DescribedKeypoint, train: &[DescribedKeypoint], admit: impl Fn(usize) -> bool) -> Option<Nearest> {
    let mut best: Option<(usize, f32)> = None;
    let mut second: Option<f32> = None;
    for (j, cand) in train.iter().enumerate() {
        if !admit(j) {
            continue;
        }
        let d = test.descriptor.distance(&cand.descriptor);
        match best {
            Some((_, bd)) if d >= bd => {
                if second.is_none_or(|s| d < s) {
                    second = Some(d);
                }
            }
            _ => {
                second = best.map(|(_, bd)| bd);
                best = Some((j, d));
            }
        }
    }
    best.map(|best| Nearest { best, second })
}

/// Distance-ratio test. A zero second distance (duplicate descriptors) fails.
#[inline]
pub fn passes_ratio(d1: f32, d2: f32, threshold: f64) -> bool {
    d2 > 0.0 && (d1 as f64) / (d2 as f64) <= threshold
}

/// Stage 1: scale-constrained nearest neighbour with the distance-ratio test.
/// Test keypoints with fewer than two candidates are left unmatched.
pub fn stage1_match(test: &[DescribedKeypoint], train: &[DescribedKeypoint], train_image: usize, cfg: &MatchingConfig) -> Vec<Match> {
    test.par_iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let nn = nearest_two(f, train, |j| {
                scale_compatible(f.keypoint.sigma, train[j].keypoint.sigma, cfg.eps_sigma)
            })?;
            let d2 = nn.second?;
            passes_ratio(nn.best.1, d2, cfg.ratio_threshold).then(|| Match {
                test_index: i,
                train_image,
                train_index: nn.best.0,
                desc_dist: nn.best.1,
                translation: translation(f, &train[nn.best.0]),
                p_m: 0.0,
            })
        })
        .collect()
}

/// Mode of the match translations on a `bins^3` histogram spanning their
/// bounding box; returns the mean translation inside the fullest bin (ties to
/// the lowest linear bin index). `None` for an empty match list.
pub fn hough_translation(matches: &[Match], bins: usize) -> Option<[f64; 3]> {
    let first = matches.first()?;
    let bins = bins.max(1);
    let mut lo = first.translation;
    let mut hi = first.translation;
    for m in matches {
        for a in 0..3 {
            lo[a] = lo[a].min(m.translation[a]);
            hi[a] = hi[a].max(m.translation[a]);
        }
    }
    let bin_of = |t: [f64; 3]| -> usize {
        let mut idx = 0;
        for a in (0..3).rev() {
            let span = hi[a] - lo[a];
            let b = if span > 0.0 {
                (((t[a] - lo[a]) / span * bins as f64).floor() as usize).min(bins - 1)
            } else {
                0
            };
            idx = idx * bins + b;
        }
        idx
    };
    let mut counts = vec![0usize; bins * bins * bins];
    for m in matches {
        counts[bin_of(m.translation)] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for m in matches.iter().filter(|m| bin_of(m.translation) == best) {
        for a in 0..3 {
            sum[a] += m.translation[a];
        }
        n += 1;
    }
    Some(sum.map(|s| s / n as f64))
}

/// Spatial radius: the `fraction` quantile of stage-1 residuals about `t`,
/// i.e. the smallest residual that at least `fraction` of matches do not
/// exceed.
pub fn spatial_threshold(stage1: &[Match], t: [f64; 3], fraction: f64) -> Option<f64> {
    if stage1.is_empty() {
        return None;
    }
    let mut r: Vec<f64> = stage1.iter().map(|m| residual(m.translation, t)).collect();
    r.sort_by(f64::total_cmp);
    let n = r.len();
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    Some(r[k - 1])
}

/// Stage 2: stage-1 search restricted to candidates whose implied translation
/// lies within `eps_x` of `t` (inclusive).
///
/// The ratio test uses the second neighbour from the same constrained set; a
/// lone constrained candidate is accepted since the spatial gate already
/// vouches for it.
pub fn stage2_match(
    test: &[DescribedKeypoint],
    train: &[DescribedKeypoint],
    train_image: usize,
    t: [f64; 3],
    eps_x: f64,
    cfg: &MatchingConfig,
) -> Vec<Match> {
    test.par_iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let nn = nearest_two(f, train, |j| {
                scale_compatible(f.keypoint.sigma, train[j].keypoint.sigma, cfg.eps_sigma)
                    && residual(translation(f, &train[j]), t) <= eps_x
            })?;
            if let Some(d2) = nn.second {
                if !passes_ratio(nn.best.1, d2, cfg.ratio_threshold) {
                    return None;
                }
            }
            Some(Match {
                test_index: i,
                train_image,
                train_index: nn.best.0,
                desc_dist: nn.best.1,
                translation: translation(f, &train[nn.best.0]),
                p_m: 0.0,
            })
        })
        .collect()
}

/// Fills `p_m` with a Gaussian kernel density estimate over the matches'
/// translations, normalized per axis to the unit cube of their bounding box
/// (a flat axis maps to 0.5). Weights sum to one.
pub fn estimate_match_distribution(matches: &mut [Match], kde_sigma: f64) {
    if matches.is_empty() {
        return;
    }
    let mut lo = matches[0].translation;
    let mut hi = lo;
    for m in matches.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(m.translation[a]);
            hi[a] = hi[a].max(m.translation[a]);
        }
    }
    let u: Vec<[f64; 3]> = matches
        .iter()
        .map(|m| {
            let mut p = [0.5; 3];
            for a in 0..3 {
                let span = hi[a] - lo[a];
                if span > 0.0 {
                    p[a] = (m.translation[a] - lo[a]) / span;
                }
            }
            p
        })
        .collect();
    let inv = 1.0 / (2.0 * kde_sigma * kde_sigma);
    let density: Vec<f64> = u
        .par_iter()
        .map(|p| {
            u.iter()
                .map(|q| {
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    (-d2 * inv).exp()
                })
                .sum::<f64>()
                / u.len() as f64
        })
        .collect();
    let total: f64 = density.iter().sum();
    for (m, d) in matches.iter_mut().zip(density) {
        m.p_m = d / total;
    }
}

/// Full matching result against one training image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatches {
    pub train_image: usize,
    pub stage1_count: usize,
    /// Hough translation; `None` when stage 1 found nothing.
    pub translation: Option<[f64; 3]>,
    pub eps_x: Option<f64>,
    /// Stage-2 matches with `p_m` filled.
    pub matches: Vec<Match>,
}

pub fn match_training_image(
    test: &[DescribedKeypoint],
    train: &[DescribedKeypoint],
    train_image: usize,
    cfg: &MatchingConfig,
) -> ImageMatches {
    let stage1 = stage1_match(test, train, train_image, cfg);
    let Some(t) = hough_translation(&stage1, cfg.hough_bins) else {
        return ImageMatches {
            train_image,
            stage1_count: 0,
            translation: None,
            eps_x: None,
            matches: Vec::new(),
        };
    };
    let eps_x = spatial_threshold(&stage1, t, cfg.spatial_keep_fraction).unwrap_or(0.0);
    let mut matches = stage2_match(test, train, train_image, t, eps_x, cfg);
    estimate_match_distribution(&mut matches, cfg.kde_sigma);
    ImageMatches {
        train_image,
        stage1_count: stage1.len(),
        translation: Some(t),
        eps_x: Some(eps_x),
        matches,
    }
}

/// Matches against every training image, in training-image order.
pub fn match_all(test: &[DescribedKeypoint], training: &[&[DescribedKeypoint]], cfg: &MatchingConfig) -> Vec<ImageMatches> {
    training
        .par_iter()
        .enumerate()
        .map(|(i, train)| match_training_image(test, train, i, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{Descriptor64, DESCRIPTOR_LEN};
    use crate::scalespace::Keypoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dk(x: [f64; 3], sigma: f64, seed: u64) -> DescribedKeypoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = [0f32; DESCRIPTOR_LEN];
        v.iter_mut().for_each(|c| *c = rng.random::<f32>());
        let n = v.iter().map(|c| c * c).sum::<f32>().sqrt();
        v.iter_mut().for_each(|c| *c /= n);
        DescribedKeypoint {
            keypoint: Keypoint { x, sigma, dog_value: 1.0 },
            descriptor: Descriptor64(v),
            label: Some(1),
        }
    }

    fn random_set(n: usize, seed: u64) -> Vec<DescribedKeypoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x = [0, 1, 2].map(|_| rng.random_range(0..60) as f64);
                let sigma = [2.0, 2.5, 3.2, 4.0, 6.4][rng.random_range(0..5)];
                dk(x, sigma, seed * 1000 + i as u64)
            })
            .collect()
    }

    /// Sorted-list oracle over explicitly enumerated candidates.
    fn oracle(
        test: &[DescribedKeypoint],
        train: &[DescribedKeypoint],
        cfg: &MatchingConfig,
        spatial: Option<([f64; 3], f64)>,
    ) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, f) in test.iter().enumerate() {
            let mut cands: Vec<(f32, usize)> = Vec::new();
            for (j, g) in train.iter().enumerate() {
                let r = f.keypoint.sigma / g.keypoint.sigma;
                if r > 2.0 * (1.0 + 1e-9) || r < (1.0 - 1e-9) / 2.0 {
                    continue;
                }
                if let Some((t, eps)) = spatial {
                    let d: f64 = (0..3)
                        .map(|a| (f.keypoint.x[a] - g.keypoint.x[a] - t[a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if d > eps {
                        continue;
                    }
                }
                let dist: f32 = (0..DESCRIPTOR_LEN)
                    .map(|k| (f.descriptor.0[k] - g.descriptor.0[k]).powi(2))
                    .fold(0.0f32, |a, b| a + b)
                    .sqrt();
                cands.push((dist, j));
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let keep = match (cands.first(), cands.get(1)) {
                (Some(_), None) => spatial.is_some(),
                (Some(a), Some(b)) => b.0 > 0.0 && (a.0 as f64 / b.0 as f64) <= cfg.ratio_threshold,
                _ => false,
            };
            if keep {
                out.push((i, cands[0].1));
            }
        }
        out
    }

    fn pairs(ms: &[Match]) -> Vec<(usize, usize)> {
        ms.iter().map(|m| (m.test_index, m.train_index)).collect()
    }

    #[test]
    fn self_matching() {
        let set = random_set(40, 7);
        let m = stage1_match(&set, &set, 0, &MatchingConfig::default());
        assert_eq!(m.len(), 40);
        for x in &m {
            assert_eq!(x.test_index, x.train_index);
            assert_eq!(x.desc_dist, 0.0);
            assert_eq!(x.translation, [0.0; 3]);
        }
    }

    #[test]
    fn stage1_equals_oracle() {
        let cfg = MatchingConfig::default();
        for seed in 0..5 {
            let test = random_set(50, seed);
            let train = random_set(50, seed + 100);
            let got = stage1_match(&test, &train, 0, &cfg);
            assert_eq!(pairs(&got), oracle(&test, &train, &cfg, None));
        }
    }

    #[test]
    fn stage2_equals_oracle() {
        let cfg = MatchingConfig::default();
        for seed in 0..5 {
            let test = random_set(50, seed + 10);
            let train = random_set(50, seed + 200);
            let t = [3.0, -2.0, 1.5];
            let eps = 25.0;
            let got = stage2_match(&test, &train, 0, t, eps, &cfg);
            assert_eq!(pairs(&got), oracle(&test, &train, &cfg, Some((t, eps))));
        }
    }

    #[test]
    fn no_scale_compatible_candidates() {
        let test = vec![dk([1.0; 3], 5.0, 1)];
        let train = vec![dk([1.0; 3], 1.0, 2), dk([2.0; 3], 1.0, 3)];
        assert!(stage1_match(&test, &train, 0, &MatchingConfig::default()).is_empty());
        assert!(scale_compatible(2.0 * 2f64.powf(1.0 / 3.0).powi(3), 2.0 * 2.0, 2.0));
    }

    #[test]
    fn duplicated_descriptors_fail_ratio() {
        let a = dk([1.0; 3], 2.0, 9);
        let mut b = a;
        b.keypoint.x = [5.0; 3];
        let test = vec![a];
        assert!(stage1_match(&test, &[a, b], 0, &MatchingConfig::default()).is_empty());
    }

    fn with_translations(ts: &[[f64; 3]]) -> Vec<Match> {
        ts.iter()
            .enumerate()
            .map(|(i, &t)| Match {
                test_index: i,
                train_image: 0,
                train_index: i,
                desc_dist: 0.1,
                translation: t,
                p_m: 0.0,
            })
            .collect()
    }

    #[test]
    fn hough_constant_and_single() {
        let ms = with_translations(&[[10.0, -4.0, 2.0]; 7]);
        assert_eq!(hough_translation(&ms, 10), Some([10.0, -4.0, 2.0]));
        assert_eq!(hough_translation(&ms[..1], 10), Some([10.0, -4.0, 2.0]));
        assert_eq!(hough_translation(&[], 10), None);
    }

    #[test]
    fn hough_finds_cluster_among_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ts: Vec<[f64; 3]> = (0..90)
            .map(|_| [20.0 + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
            .collect();
        ts.extend((0..10).map(|_| [0, 1, 2].map(|_| rng.random_range(-40.0..40.0))));
        let ms = with_translations(&ts);
        let t = hough_translation(&ms, 10).unwrap();
        // Oracle: bin width from the bounding box.
        let span: Vec<f64> = (0..3)
            .map(|a| {
                let lo = ts.iter().map(|t| t[a]).fold(f64::INFINITY, f64::min);
                let hi = ts.iter().map(|t| t[a]).fold(f64::NEG_INFINITY, f64::max);
                (hi - lo) / 10.0
            })
            .collect();
        for a in 0..3 {
            let target = if a == 0 { 20.0 } else { 0.0 };
            assert!((t[a] - target).abs() <= span[a], "axis {a}: {t:?}");
        }
    }

    #[test]
    fn spatial_quantile() {
        let ms = with_translations(&(0..20).map(|i| [i as f64, 0.0, 0.0]).collect::<Vec<_>>());
        // residuals 0..19 about the origin; 10% of 20 is 2 matches -> residual 1
        assert_eq!(spatial_threshold(&ms, [0.0; 3], 0.1), Some(1.0));
        assert_eq!(spatial_threshold(&ms, [0.0; 3], 1.0), Some(19.0));
        assert_eq!(spatial_threshold(&ms[..1], [0.0; 3], 0.1), Some(0.0));
    }

    #[test]
    fn far_keypoint_excluded_by_spatial_gate() {
        let a = dk([10.0; 3], 2.0, 1);
        let mut near = a;
        near.keypoint.x = [10.0, 10.0, 11.0];
        let mut far = a;
        far.keypoint.x = [30.0; 3];
        let test = vec![a];
        let got = stage2_match(&test, &[far], 0, [0.0; 3], 5.0, &MatchingConfig::default());
        assert!(got.is_empty());
        let got = stage2_match(&test, &[far, near], 0, [0.0; 3], 5.0, &MatchingConfig::default());
        assert_eq!(pairs(&got), vec![(0, 1)]);
    }

    #[test]
    fn kde_uniform_single_and_outlier() {
        let mut ms = with_translations(&[[1.0, 2.0, 3.0]; 5]);
        estimate_match_distribution(&mut ms, 0.2);
        assert!(ms.iter().all(|m| (m.p_m - 0.2).abs() < 1e-15));

        let mut one = with_translations(&[[4.0, 4.0, 4.0]]);
        estimate_match_distribution(&mut one, 0.2);
        assert_eq!(one[0].p_m, 1.0);

        let mut ts = vec![[0.0, 0.0, 0.0]; 10];
        ts.extend(vec![[40.0, 40.0, 40.0]; 10]);
        ts.push([0.0, 40.0, 20.0]);
        let mut ms = with_translations(&ts);
        estimate_match_distribution(&mut ms, 0.2);
        let total: f64 = ms.iter().map(|m| m.p_m).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let outlier = ms[20].p_m;
        assert!(ms[..20].iter().all(|m| m.p_m > outlier));
        // Direct evaluation: each cluster member sees 10 coincident points plus
        // two far ones; the outlier sees only itself plus far points.
        let k = |d2: f64| (-d2 / (2.0 * 0.04)).exp();
        let member = 10.0 + 10.0 * k(3.0) + k(0.0 + 1.0 + 0.25);
        let lone = 1.0 + 10.0 * k(1.0 + 0.25) + 10.0 * k(1.0 + 0.25);
        assert!((ms[0].p_m / outlier - member / lone).abs() < 1e-9);
    }

    #[test]
    fn kde_ignores_global_translation() {
        let ts = [[0.0, 1.0, 2.0], [3.0, 1.0, 0.0], [5.0, 5.0, 5.0], [2.0, 2.0, 2.0]];
        let mut a = with_translations(&ts);
        let mut b = with_translations(&ts.map(|t| [t[0] + 17.0, t[1] - 3.0, t[2] + 0.5]));
        estimate_match_distribution(&mut a, 0.2);
        estimate_match_distribution(&mut b, 0.2);
        for (x, y) in a.iter().zip(&b) {
            assert!((x.p_m - y.p_m).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_copy_rematches_through_stage2() {
        let base = random_set(60, 42);
        let shift = [4.0, -3.0, 2.0];
        let test: Vec<_> = base
            .iter()
            .map(|k| {
                let mut k = *k;
                for a in 0..3 {
                    k.keypoint.x[a] += shift[a];
                }
                k
            })
            .collect();
        let r = match_training_image(&test, &base, 0, &MatchingConfig::default());
        assert_eq!(r.translation, Some(shift));
        assert_eq!(r.eps_x, Some(0.0));
        assert_eq!(r.matches.len(), 60);
        for m in &r.matches {
            assert_eq!(m.test_index, m.train_index);
            assert_eq!(residual(m.translation, shift), 0.0);
        }
    }
}
