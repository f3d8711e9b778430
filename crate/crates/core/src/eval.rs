//! Dice overlap, keypoint voting statistics and leave-one-out experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::descriptor::DescribedKeypoint;
use crate::error::{Error, Result};
use crate::interchange::Timings;
use crate::phantom::Subject;
use crate::pipeline::{extract, segment_with_keypoints, SegmentOutput};
use crate::transfer::Atlas;
use crate::volume::{LabelVolume, VolumeError, BACKGROUND};
use crate::voting::LabelPosterior;

/// `2|A∩B| / (|A|+|B|)` for the voxels carrying `label`; 1 when both are empty.
pub fn dice(reference: &LabelVolume, seg: &LabelVolume, label: u16) -> Result<f64, VolumeError> {
    reference.ensure_same_grid(seg.geometry())?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&r, &s) in reference.data().iter().zip(seg.data()) {
        let (ir, is) = (r == label, s == label);
        a += ir as usize;
        b += is as usize;
        both += (ir && is) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// Dice of every foreground label present in either volume.
pub fn dice_all(reference: &LabelVolume, seg: &LabelVolume) -> Result<BTreeMap<u16, f64>, VolumeError> {
    let n = reference.num_labels().max(seg.num_labels());
    (1..=n).map(|l| Ok((l, dice(reference, seg, l)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingStats {
    pub label: u16,
    pub keypoints: usize,
    pub fraction_labeled: f64,
    /// Among labelled keypoints; `None` when none was labelled.
    pub fraction_correct: Option<f64>,
}

/// Per-organ voting statistics against the ground-truth label at each
/// keypoint; keypoints lying in background are ignored.
pub fn voting_statistics(keypoints: &[DescribedKeypoint], votes: &[LabelPosterior], truth: &LabelVolume) -> Vec<VotingStats> {
    let n = truth.num_labels() as usize;
    let mut count = vec![0usize; n];
    let mut labeled = vec![0usize; n];
    let mut correct = vec![0usize; n];
    for (k, v) in keypoints.iter().zip(votes) {
        let Some(t) = truth.label_at(k.keypoint.x).filter(|&t| t != BACKGROUND) else {
            continue;
        };
        let i = (t - 1) as usize;
        count[i] += 1;
        if let Some(l) = v.voted_label {
            labeled[i] += 1;
            correct[i] += (l == t) as usize;
        }
    }
    (0..n)
        .map(|i| VotingStats {
            label: i as u16 + 1,
            keypoints: count[i],
            fraction_labeled: if count[i] > 0 { labeled[i] as f64 / count[i] as f64 } else { 0.0 },
            fraction_correct: (labeled[i] > 0).then(|| correct[i] as f64 / labeled[i] as f64),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_label_dice: BTreeMap<u16, f64>,
    pub voting_stats: Vec<VotingStats>,
    pub timings: Timings,
    pub config: PipelineConfig,
}

impl EvalReport {
    pub fn from_output(out: &SegmentOutput, truth: &LabelVolume, cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            per_label_dice: dice_all(truth, &out.result.labels)?,
            voting_stats: voting_statistics(&out.test_keypoints, &out.votes, truth),
            timings: out.timings,
            config: cfg.clone(),
        })
    }

    pub fn mean_dice(&self) -> f64 {
        mean(&self.per_label_dice.values().copied().collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub test_subject: usize,
    pub training_subjects: Vec<usize>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAggregate {
    pub label: u16,
    pub mean: f64,
    pub standard_error: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub training_size: usize,
    pub folds: Vec<Fold>,
    pub aggregate: Vec<LabelAggregate>,
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Standard error of the mean with the sample standard deviation; 0 for
/// fewer than two values.
pub fn standard_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

/// Mean and standard error per label over the successful folds.
pub fn aggregate(folds: &[Fold]) -> Vec<LabelAggregate> {
    let mut per: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
    for r in folds.iter().filter_map(|f| f.report.as_ref()) {
        for (&l, &d) in &r.per_label_dice {
            per.entry(l).or_default().push(d);
        }
    }
    per.into_iter()
        .map(|(label, v)| LabelAggregate {
            label,
            mean: mean(&v),
            standard_error: standard_error(&v),
            folds: v.len(),
        })
        .collect()
}

/// Per-subject extraction shared by all folds.
struct Prepared {
    keypoints: Vec<DescribedKeypoint>,
    extraction: f64,
    atlas: Atlas,
}

fn prepare(subjects: &[Subject], cfg: &PipelineConfig) -> Vec<std::result::Result<Prepared, String>> {
    subjects
        .iter()
        .map(|s| {
            let t = std::time::Instant::now();
            let kps = extract(&s.image, cfg).map_err(|e| e.to_string())?;
            let extraction = t.elapsed().as_secs_f64();
            let labeled = crate::descriptor::assign_labels(kps.clone(), &s.labels);
            let atlas = Atlas::new(s.image.clone(), s.labels.clone(), labeled).map_err(|e| e.to_string())?;
            Ok(Prepared {
                keypoints: kps,
                extraction,
                atlas,
            })
        })
        .collect()
}

fn run_fold(
    subjects: &[Subject],
    prepared: &[std::result::Result<Prepared, String>],
    test: usize,
    training: Vec<usize>,
    cfg: &PipelineConfig,
) -> Fold {
    let outcome = (|| -> std::result::Result<EvalReport, String> {
        let p = prepared[test].as_ref().map_err(Clone::clone)?;
        let atlases: Vec<Atlas> = training
            .iter()
            .map(|&i| prepared[i].as_ref().map(|q| q.atlas.clone()).map_err(Clone::clone))
            .collect::<std::result::Result<_, _>>()?;
        let mut out = segment_with_keypoints(&subjects[test].image, p.keypoints.clone(), &atlases, cfg)
            .map_err(|e| e.to_string())?;
        out.timings.extraction = p.extraction;
        EvalReport::from_output(&out, &subjects[test].labels, cfg).map_err(|e| e.to_string())
    })();
    let (report, error) = match outcome {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e)),
    };
    Fold {
        test_subject: test,
        training_subjects: training,
        report,
        error,
    }
}

/// Each subject is segmented with all others as training set.
pub fn leave_one_out(subjects: &[Subject], cfg: &PipelineConfig) -> Result<ExperimentReport> {
    if subjects.len() < 2 {
        return Err(Error::Config("leave-one-out needs at least two subjects".into()));
    }
    let prepared = prepare(subjects, cfg);
    let folds: Vec<Fold> = (0..subjects.len())
        .map(|t| run_fold(subjects, &prepared, t, (0..subjects.len()).filter(|&i| i != t).collect(), cfg))
        .collect();
    Ok(ExperimentReport {
        training_size: subjects.len() - 1,
        aggregate: aggregate(&folds),
        folds,
    })
}

/// For each size `n`, segments every subject with the first `n` other
/// subjects (in index order) as training set.
pub fn training_size_sweep(subjects: &[Subject], sizes: &[usize], cfg: &PipelineConfig) -> Result<Vec<ExperimentReport>> {
    if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n >= subjects.len()) {
        return Err(Error::Config(format!(
            "training size {n} needs between 1 and {} subjects",
            subjects.len().saturating_sub(1)
        )));
    }
    let prepared = prepare(subjects, cfg);
    Ok(sizes
        .iter()
        .map(|&n| {
            let folds: Vec<Fold> = (0..subjects.len())
                .map(|t| {
                    let training = (0..subjects.len()).filter(|&i| i != t).take(n).collect();
                    run_fold(subjects, &prepared, t, training, cfg)
                })
                .collect();
            ExperimentReport {
                training_size: n,
                aggregate: aggregate(&folds),
                folds,
            }
        })
        .collect())
}

/// One row per fold and label: `training_size,test_subject,label,dice`.
pub fn folds_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("training_size,test_subject,label,dice\n");
    for r in reports {
        for f in &r.folds {
            if let Some(rep) = &f.report {
                for (l, d) in &rep.per_label_dice {
                    let _ = writeln!(out, "{},{},{},{}", r.training_size, f.test_subject, l, d);
                }
            }
        }
    }
    out
}

/// Whitespace-separated per-label mean and standard error, one block per
/// training size, for bar-chart plotting.
pub fn aggregate_tsv(reports: &[ExperimentReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "# training_size {}\n# label\tmean\tstandard_error", r.training_size);
        for a in &r.aggregate {
            let _ = writeln!(out, "{}\t{}\t{}", a.label, a.mean, a.standard_error);
        }
        out.push_str("\n\n");
    }
    out
}
