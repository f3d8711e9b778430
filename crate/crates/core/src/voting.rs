//! Organ-label inference for test keypoints by marginalizing over their
//! matches: each match votes for its training keypoint's label with weight
//! `p(F | F', m) * p(m)`.

use crate::descriptor::DescribedKeypoint;
use crate::matching::{ImageMatches, Match};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelPosterior {
    /// Unnormalized joint score per label; `scores[l - 1]` belongs to label `l`.
    pub scores: Vec<f64>,
    pub voted_label: Option<u16>,
    /// Largest squared descriptor distance among the keypoint's matches.
    pub tau_sq: f64,
}

impl LabelPosterior {
    pub fn unlabeled(num_labels: u16) -> Self {
        Self {
            scores: vec![0.0; num_labels as usize],
            voted_label: None,
            tau_sq: 0.0,
        }
    }

    pub fn score(&self, label: u16) -> f64 {
        label
            .checked_sub(1)
            .and_then(|i| self.scores.get(i as usize))
            .copied()
            .unwrap_or(0.0)
    }

    /// `p(L = label)` normalized over all labels; 0 when nothing was voted.
    pub fn posterior(&self, label: u16) -> f64 {
        let total: f64 = self.scores.iter().sum();
        if total > 0.0 {
            self.score(label) / total
        } else {
            0.0
        }
    }
}

/// Gaussian descriptor likelihood with variance `tau_sq`; constant when
/// `tau_sq == 0` (all matched descriptors identical).
#[inline]
pub fn descriptor_likelihood(dist_sq: f64, tau_sq: f64) -> f64 {
    if tau_sq > 0.0 {
        (-dist_sq / (2.0 * tau_sq)).exp() / (2.0 * std::f64::consts::PI * tau_sq).sqrt()
    } else {
        1.0
    }
}

/// Votes one test keypoint's label. `label_of` yields the training label of
/// each match; matches whose label is unknown or out of range are ignored.
/// Ties between labels go to the lowest label.
pub fn vote_label(matches: &[Match], label_of: impl Fn(&Match) -> Option<u16>, num_labels: u16) -> LabelPosterior {
    let mut post = LabelPosterior::unlabeled(num_labels);
    let labeled: Vec<(&Match, u16)> = matches
        .iter()
        .filter_map(|m| label_of(m).filter(|&l| l >= 1 && l <= num_labels).map(|l| (m, l)))
        .collect();
    if labeled.is_empty() {
        return post;
    }
    post.tau_sq = labeled
        .iter()
        .map(|(m, _)| (m.desc_dist as f64).powi(2))
        .fold(0.0, f64::max);
    for (m, l) in &labeled {
        let d2 = (m.desc_dist as f64).powi(2);
        post.scores[(*l - 1) as usize] += descriptor_likelihood(d2, post.tau_sq) * m.p_m;
    }
    let mut best: Option<(u16, f64)> = None;
    for (i, &s) in post.scores.iter().enumerate() {
        if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
            best = Some((i as u16 + 1, s));
        }
    }
    post.voted_label = best.map(|(l, _)| l);
    post
}

/// Matches grouped by test keypoint, preserving training-image order.
pub fn matches_by_test_keypoint(num_test: usize, per_image: &[ImageMatches]) -> Vec<Vec<Match>> {
    let mut grouped = vec![Vec::new(); num_test];
    for im in per_image {
        for m in &im.matches {
            grouped[m.test_index].push(*m);
        }
    }
    grouped
}

/// Votes every test keypoint against the labelled training keypoints.
pub fn vote_all(
    num_test: usize,
    per_image: &[ImageMatches],
    training: &[&[DescribedKeypoint]],
    num_labels: u16,
) -> Vec<LabelPosterior> {
    let label_of = |m: &Match| {
        training
            .get(m.train_image)
            .and_then(|kps| kps.get(m.train_index))
            .and_then(|k| k.label)
    };
    matches_by_test_keypoint(num_test, per_image)
        .iter()
        .map(|ms| vote_label(ms, label_of, num_labels))
        .collect()
}
