//! On-disk formats for keypoints, matches, training manifests and run
//! summaries. Parsers take in-memory text and never panic on malformed input.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::descriptor::{DescribedKeypoint, Descriptor64, DESCRIPTOR_LEN};
use crate::matching::Match;
use crate::scalespace::Keypoint;
use crate::voting::LabelPosterior;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{kind}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
pub struct ParseError {
    pub kind: &'static str,
    pub line: Option<usize>,
    pub message: String,
}

fn err(kind: &'static str, line: Option<usize>, message: impl Into<String>) -> ParseError {
    ParseError {
        kind,
        line,
        message: message.into(),
    }
}

const KEYPOINTS: &str = "keypoint csv";
const MATCHES: &str = "match csv";
const MANIFEST: &str = "training manifest";

/// Keypoints of one image, optionally carrying their label votes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointTable {
    pub keypoints: Vec<DescribedKeypoint>,
    pub votes: Option<Vec<LabelPosterior>>,
}

fn keypoint_header(num_labels: Option<u16>) -> Vec<String> {
    let mut h: Vec<String> = ["x", "y", "z", "sigma", "dog_value", "label"].map(String::from).to_vec();
    h.extend((0..DESCRIPTOR_LEN).map(|i| format!("d{i}")));
    if let Some(n) = num_labels {
        h.push("voted_label".into());
        h.push("tau_sq".into());
        h.extend((1..=n).map(|l| format!("score{l}")));
    }
    h
}

fn opt_label(l: Option<u16>) -> String {
    l.map(|v| v.to_string()).unwrap_or_default()
}

/// Serializes keypoints; values use shortest round-trip formatting so a
/// written table parses back bit-identically.
pub fn write_keypoints_csv(table: &KeypointTable) -> String {
    let num_labels = table
        .votes
        .as_ref()
        .map(|v| v.first().map_or(0, |p| p.scores.len() as u16));
    let mut out = keypoint_header(num_labels).join(",");
    out.push('\n');
    for (i, k) in table.keypoints.iter().enumerate() {
        let kp = &k.keypoint;
        let _ = write!(out, "{},{},{},{},{},{}", kp.x[0], kp.x[1], kp.x[2], kp.sigma, kp.dog_value, opt_label(k.label));
        for v in k.descriptor.values() {
            let _ = write!(out, ",{v}");
        }
        if let Some(p) = table.votes.as_ref().and_then(|v| v.get(i)) {
            let _ = write!(out, ",{},{}", opt_label(p.voted_label), p.tau_sq);
            for s in &p.scores {
                let _ = write!(out, ",{s}");
            }
        }
        out.push('\n');
    }
    out
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, kind: &'static str, line: usize) -> Result<&'a str, ParseError> {
    rec.get(i).ok_or_else(|| err(kind, Some(line), format!("missing column {i}")))
}

fn finite<T: std::str::FromStr + Into<f64> + Copy>(s: &str, what: &str, kind: &'static str, line: usize) -> Result<T, ParseError> {
    let v: T = s
        .trim()
        .parse()
        .map_err(|_| err(kind, Some(line), format!("{what}: cannot parse {s:?}")))?;
    if !v.into().is_finite() {
        return Err(err(kind, Some(line), format!("{what} must be finite")));
    }
    Ok(v)
}

fn parse_label(s: &str, kind: &'static str, line: usize) -> Result<Option<u16>, ParseError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<u16>() {
        Ok(0) | Err(_) => Err(err(kind, Some(line), format!("invalid label {s:?}"))),
        Ok(v) => Ok(Some(v)),
    }
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes())
}

pub fn parse_keypoints_csv(text: &str) -> Result<KeypointTable, ParseError> {
    let mut rdr = reader(text);
    let header = rdr
        .headers()
        .map_err(|e| err(KEYPOINTS, Some(1), e.to_string()))?
        .clone();
    let base = keypoint_header(None);
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < base.len() || cols[..base.len()] != base.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(err(KEYPOINTS, Some(1), "unexpected header"));
    }
    let num_labels = if cols.len() == base.len() {
        None
    } else {
        let n = (cols.len() - base.len())
            .checked_sub(2)
            .ok_or_else(|| err(KEYPOINTS, Some(1), "unexpected vote columns"))?;
        let n16 = u16::try_from(n).map_err(|_| err(KEYPOINTS, Some(1), "too many score columns"))?;
        if cols[..] != keypoint_header(Some(n16))[..] {
            return Err(err(KEYPOINTS, Some(1), "unexpected vote columns"));
        }
        Some(n16)
    };

    let mut table = KeypointTable {
        keypoints: Vec::new(),
        votes: num_labels.map(|_| Vec::new()),
    };
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| err(KEYPOINTS, Some(line), e.to_string()))?;
        let f = |i: usize, what: &str| -> Result<f64, ParseError> { finite::<f64>(field(&rec, i, KEYPOINTS, line)?, what, KEYPOINTS, line) };
        let x = [f(0, "x")?, f(1, "y")?, f(2, "z")?];
        let sigma = f(3, "sigma")?;
        if !(sigma > 0.0) {
            return Err(err(KEYPOINTS, Some(line), "sigma must be positive"));
        }
        let dog_value = f(4, "dog_value")?;
        let label = parse_label(field(&rec, 5, KEYPOINTS, line)?, KEYPOINTS, line)?;
        let mut d = [0f32; DESCRIPTOR_LEN];
        for (j, v) in d.iter_mut().enumerate() {
            *v = finite::<f32>(field(&rec, 6 + j, KEYPOINTS, line)?, "descriptor", KEYPOINTS, line)?;
        }
        table.keypoints.push(DescribedKeypoint {
            keypoint: Keypoint { x, sigma, dog_value },
            descriptor: Descriptor64(d),
            label,
        });
        if let (Some(votes), Some(n)) = (table.votes.as_mut(), num_labels) {
            let off = base.len();
            let voted_label = parse_label(field(&rec, off, KEYPOINTS, line)?, KEYPOINTS, line)?;
            if voted_label.is_some_and(|l| l > n) {
                return Err(err(KEYPOINTS, Some(line), "voted label exceeds score columns"));
            }
            let tau_sq = f(off + 1, "tau_sq")?;
            let scores = (0..n as usize)
                .map(|j| f(off + 2 + j, "score"))
                .collect::<Result<Vec<_>, _>>()?;
            if tau_sq < 0.0 || scores.iter().any(|&s| s < 0.0) {
                return Err(err(KEYPOINTS, Some(line), "scores must be non-negative"));
            }
            votes.push(LabelPosterior {
                scores,
                voted_label,
                tau_sq,
            });
        }
    }
    Ok(table)
}

const MATCH_HEADER: [&str; 8] = ["test_index", "train_image", "train_index", "desc_dist", "tx", "ty", "tz", "p_m"];

pub fn write_matches_csv(matches: &[Match]) -> String {
    let mut out = MATCH_HEADER.join(",");
    out.push('\n');
    for m in matches {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.test_index, m.train_image, m.train_index, m.desc_dist, m.translation[0], m.translation[1], m.translation[2], m.p_m
        );
    }
    out
}

pub fn parse_matches_csv(text: &str) -> Result<Vec<Match>, ParseError> {
    let mut rdr = reader(text);
    let header = rdr.headers().map_err(|e| err(MATCHES, Some(1), e.to_string()))?;
    if header.iter().ne(MATCH_HEADER) {
        return Err(err(MATCHES, Some(1), "unexpected header"));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| err(MATCHES, Some(line), e.to_string()))?;
        let idx = |i: usize| -> Result<usize, ParseError> {
            let s = field(&rec, i, MATCHES, line)?;
            s.trim()
                .parse()
                .map_err(|_| err(MATCHES, Some(line), format!("{}: cannot parse {s:?}", MATCH_HEADER[i])))
        };
        let f = |i: usize| finite::<f64>(field(&rec, i, MATCHES, line)?, MATCH_HEADER[i], MATCHES, line);
        let desc_dist = finite::<f32>(field(&rec, 3, MATCHES, line)?, "desc_dist", MATCHES, line)?;
        let p_m = f(7)?;
        if desc_dist < 0.0 || p_m < 0.0 {
            return Err(err(MATCHES, Some(line), "distances and weights must be non-negative"));
        }
        out.push(Match {
            test_index: idx(0)?,
            train_image: idx(1)?,
            train_index: idx(2)?,
            desc_dist,
            translation: [f(4)?, f(5)?, f(6)?],
            p_m,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
    /// Precomputed labelled keypoints; extracted on the fly when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingManifest {
    pub training: Vec<TrainingEntry>,
}

impl TrainingManifest {
    /// Resolves relative paths against `base` (the manifest's directory).
    pub fn resolve(mut self, base: &Path) -> Self {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for e in &mut self.training {
            join(&mut e.image);
            join(&mut e.labels);
            if let Some(k) = e.keypoints.as_mut() {
                join(k);
            }
        }
        self
    }
}

pub fn parse_manifest(text: &str) -> Result<TrainingManifest, ParseError> {
    let m: TrainingManifest = serde_json::from_str(text).map_err(|e| err(MANIFEST, Some(e.line()), e.to_string()))?;
    for e in &m.training {
        if e.image.as_os_str().is_empty() || e.labels.as_os_str().is_empty() {
            return Err(err(MANIFEST, None, "empty path"));
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: u16,
    pub z_norm: f64,
    pub transfer_count: usize,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub train_image: usize,
    pub stage1_count: usize,
    pub stage2_count: usize,
    pub translation: Option<[f64; 3]>,
    pub eps_x: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub extraction: f64,
    pub matching: f64,
    pub voting: f64,
    pub transfer: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.extraction + self.matching + self.voting + self.transfer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub test_keypoints: usize,
    pub labeled_keypoints: usize,
    pub labels: Vec<LabelSummary>,
    pub images: Vec<ImageSummary>,
    pub timings: Timings,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> KeypointTable {
        let mut d = [0f32; DESCRIPTOR_LEN];
        for (i, v) in d.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin() / 7.0;
        }
        let k = |x: f64, label| DescribedKeypoint {
            keypoint: Keypoint {
                x: [x, 2.0 * x, 1.0 / 3.0],
                sigma: 1.6 * 2f64.powf(1.0 / 3.0),
                dog_value: -0.1 - x,
            },
            descriptor: Descriptor64(d),
            label,
        };
        KeypointTable {
            keypoints: vec![k(1.0, Some(3)), k(40.5, None)],
            votes: None,
        }
    }

    #[test]
    fn keypoints_round_trip_exactly() {
        let t = sample();
        assert_eq!(parse_keypoints_csv(&write_keypoints_csv(&t)).unwrap(), t);
    }

    #[test]
    fn votes_round_trip() {
        let mut t = sample();
        t.votes = Some(vec![
            LabelPosterior {
                scores: vec![0.0, 0.1, 2.5e-7],
                voted_label: Some(2),
                tau_sq: 0.04,
            },
            LabelPosterior::unlabeled(3),
        ]);
        assert_eq!(parse_keypoints_csv(&write_keypoints_csv(&t)).unwrap(), t);
    }

    #[test]
    fn empty_table() {
        let t = KeypointTable::default();
        let text = write_keypoints_csv(&t);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(parse_keypoints_csv(&text).unwrap(), t);
    }

    #[test]
    fn keypoint_errors() {
        let good = write_keypoints_csv(&sample());
        let cases = [
            good.replacen("sigma", "scale", 1),
            good.replacen(",3,", ",0,", 1),
            good.replacen(",3,", ",x,", 1),
            good.replacen("40.5", "NaN", 1),
            good.replacen("40.5", "inf", 1),
            format!("{good}1,2,3\n"),
            String::new(),
        ];
        for c in &cases {
            assert!(parse_keypoints_csv(c).is_err(), "{c:.80}");
        }
    }

    #[test]
    fn matches_round_trip() {
        let ms = vec![Match {
            test_index: 3,
            train_image: 1,
            train_index: 9,
            desc_dist: 0.123_456_7,
            translation: [-1.5, 0.1, 1e-9],
            p_m: 0.3,
        }];
        assert_eq!(parse_matches_csv(&write_matches_csv(&ms)).unwrap(), ms);
        assert!(parse_matches_csv("a,b\n").is_err());
        assert!(parse_matches_csv(&write_matches_csv(&ms).replace("0.3", "-0.3")).is_err());
        assert!(parse_matches_csv(&write_matches_csv(&ms).replacen("3,", "-3,", 1)).is_err());
    }

    #[test]
    fn manifest_paths_resolve() {
        let m = parse_manifest(r#"{"training": [{"image": "a.nrrd", "labels": "/abs/b.nrrd", "keypoints": "k.csv"}]}"#).unwrap();
        let m = m.resolve(Path::new("/data"));
        assert_eq!(m.training[0].image, PathBuf::from("/data/a.nrrd"));
        assert_eq!(m.training[0].labels, PathBuf::from("/abs/b.nrrd"));
        assert_eq!(m.training[0].keypoints.as_deref(), Some(Path::new("/data/k.csv")));
        assert!(parse_manifest(r#"{"training": [{"image": "a", "labels": "b", "x": 1}]}"#).is_err());
        assert!(parse_manifest(r#"{"training": [{"image": "", "labels": "b"}]}"#).is_err());
        assert!(parse_manifest("[").is_err());
    }
}
