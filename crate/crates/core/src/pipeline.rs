//! Stage composition: extraction, matching, voting and transfer.

use std::time::Instant;

use crate::config::PipelineConfig;
use crate::descriptor::{assign_labels, describe_keypoints, DescribedKeypoint};
use crate::error::{Error, Result};
use crate::interchange::{ImageSummary, LabelSummary, SegmentSummary, Timings};
use crate::matching::{match_all, ImageMatches, Match};
use crate::scalespace::detect_keypoints;
use crate::transfer::{transfer_segmentation, Atlas, SegmentationResult};
use crate::volume::{LabelVolume, ScalarVolume};
use crate::voting::{matches_by_test_keypoint, vote_all, LabelPosterior};

/// Detects and describes keypoints. Fails only when keypoints were found but
/// none could be described.
pub fn extract(image: &ScalarVolume, cfg: &PipelineConfig) -> Result<Vec<DescribedKeypoint>> {
    let kps = detect_keypoints(image, &cfg.scale_space)?;
    let described = describe_keypoints(image, &kps, &cfg.descriptor);
    if !kps.is_empty() && described.is_empty() {
        return Err(Error::AllKeypointsRejected(kps.len()));
    }
    Ok(described)
}

/// Extracts keypoints and keeps only those inside a labelled organ.
pub fn extract_labeled(image: &ScalarVolume, labels: &LabelVolume, cfg: &PipelineConfig) -> Result<Vec<DescribedKeypoint>> {
    labels.ensure_same_grid(image.geometry())?;
    Ok(assign_labels(extract(image, cfg)?, labels))
}

/// Builds a training atlas, extracting its keypoints.
pub fn prepare_atlas(image: ScalarVolume, labels: LabelVolume, cfg: &PipelineConfig) -> Result<Atlas> {
    let kps = extract_labeled(&image, &labels, cfg)?;
    Ok(Atlas::new(image, labels, kps)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutput {
    pub result: SegmentationResult,
    pub test_keypoints: Vec<DescribedKeypoint>,
    pub votes: Vec<LabelPosterior>,
    pub image_matches: Vec<ImageMatches>,
    pub timings: Timings,
}

impl SegmentOutput {
    pub fn matches(&self) -> Vec<Match> {
        self.image_matches.iter().flat_map(|m| m.matches.iter().copied()).collect()
    }

    pub fn summary(&self) -> SegmentSummary {
        let pm = &self.result.probability_maps;
        SegmentSummary {
            test_keypoints: self.test_keypoints.len(),
            labeled_keypoints: self.votes.iter().filter(|v| v.voted_label.is_some()).count(),
            labels: (1..=pm.maps.len() as u16)
                .map(|l| LabelSummary {
                    label: l,
                    z_norm: pm.z_norm[(l - 1) as usize],
                    transfer_count: pm.transfer_counts[(l - 1) as usize],
                    voxels: self.result.labels.count(l),
                })
                .collect(),
            images: self
                .image_matches
                .iter()
                .map(|m| ImageSummary {
                    train_image: m.train_image,
                    stage1_count: m.stage1_count,
                    stage2_count: m.matches.len(),
                    translation: m.translation,
                    eps_x: m.eps_x,
                })
                .collect(),
            timings: self.timings,
        }
    }
}

/// Segments a test image whose keypoints are already extracted.
pub fn segment_with_keypoints(
    test: &ScalarVolume,
    test_keypoints: Vec<DescribedKeypoint>,
    atlases: &[Atlas],
    cfg: &PipelineConfig,
) -> Result<SegmentOutput> {
    if atlases.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    cfg.validate()?;
    let num_labels = atlases.iter().map(Atlas::num_labels).max().unwrap_or(0);
    let training: Vec<&[DescribedKeypoint]> = atlases.iter().map(|a| a.keypoints.as_slice()).collect();

    let t0 = Instant::now();
    let image_matches = match_all(&test_keypoints, &training, &cfg.matching);
    let t1 = Instant::now();
    let votes = vote_all(test_keypoints.len(), &image_matches, &training, num_labels);
    let grouped = matches_by_test_keypoint(test_keypoints.len(), &image_matches);
    let t2 = Instant::now();
    let result = transfer_segmentation(test, &votes, &grouped, atlases, num_labels, &cfg.transfer);
    let t3 = Instant::now();

    Ok(SegmentOutput {
        result,
        test_keypoints,
        votes,
        image_matches,
        timings: Timings {
            extraction: 0.0,
            matching: (t1 - t0).as_secs_f64(),
            voting: (t2 - t1).as_secs_f64(),
            transfer: (t3 - t2).as_secs_f64(),
        },
    })
}

/// Full pipeline on a raw test image.
pub fn segment(test: &ScalarVolume, atlases: &[Atlas], cfg: &PipelineConfig) -> Result<SegmentOutput> {
    if atlases.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let t0 = Instant::now();
    let kps = extract(test, cfg)?;
    let extraction = t0.elapsed().as_secs_f64();
    let mut out = segment_with_keypoints(test, kps, atlases, cfg)?;
    out.timings.extraction = extraction;
    Ok(out)
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Config("thread count must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Pipeline(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}
