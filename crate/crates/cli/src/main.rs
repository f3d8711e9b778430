use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kptransfer::descriptor::DescribedKeypoint;
use kptransfer::eval::{aggregate_tsv, dice_all, folds_csv, leave_one_out, mean, training_size_sweep};
use kptransfer::interchange::{
    parse_keypoints_csv, parse_manifest, write_keypoints_csv, write_matches_csv, KeypointTable, TrainingEntry, TrainingManifest,
};
use kptransfer::nrrd::{read_labels, read_scalar, write_labels, write_scalar};
use kptransfer::phantom::{crop_fov, generate_subject, Subject};
use kptransfer::pipeline::{extract, extract_labeled, prepare_atlas, segment_with_keypoints, with_threads};
use kptransfer::transfer::Atlas;
use kptransfer::{parse_config, Error, PipelineConfig, Result};
use log::info;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "kptransfer", version, about = "Whole-body segmentation by keypoint transfer")]
struct Cli {
    /// JSON configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; output does not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the phantom seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic subjects with a training manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// Number of subjects (default: eval.subjects).
        #[arg(long)]
        subjects: Option<usize>,
        /// Crop every subject around this organ.
        #[arg(long)]
        crop_organ: Option<u16>,
        /// Also extract and store labelled keypoints per subject.
        #[arg(long)]
        with_keypoints: bool,
    },
    /// Detect and describe keypoints of one image.
    Extract {
        #[arg(long)]
        image: PathBuf,
        /// Keep only keypoints inside these labels and record them.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a test image against a training manifest.
    Segment {
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Precomputed test keypoints.
        #[arg(long)]
        test_keypoints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        probability_maps: bool,
    },
    /// Dice overlap between a reference and a segmentation.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        segmentation: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-out experiment on generated phantoms.
    Loo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: Option<usize>,
        /// Training-set sizes for the sweep, e.g. 3,8.
        #[arg(long, value_delimiter = ',')]
        training_sizes: Option<Vec<usize>>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = load_config(&cli).and_then(|cfg| with_threads(threads, move || run(cli.command, &cfg)).and_then(|r| r));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(&read_text(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.phantom.seed = seed;
    }
    Ok(cfg)
}

fn run(command: Command, cfg: &PipelineConfig) -> Result<()> {
    match command {
        Command::Phantom {
            out,
            subjects,
            crop_organ,
            with_keypoints,
        } => cmd_phantom(cfg, &out, subjects.unwrap_or(cfg.eval.subjects), crop_organ, with_keypoints),
        Command::Extract { image, labels, out } => cmd_extract(cfg, &image, labels.as_deref(), &out),
        Command::Segment {
            test,
            manifest,
            test_keypoints,
            out,
            probability_maps,
        } => {
            let test = required(test, &cfg.paths.test_image, "test image")?;
            let manifest = required(manifest, &cfg.paths.manifest, "training manifest")?;
            let out = required(out, &cfg.paths.output_dir, "output directory")?;
            let maps = probability_maps || cfg.paths.write_probability_maps;
            cmd_segment(cfg, &test, &manifest, test_keypoints.as_deref(), &out, maps)
        }
        Command::Eval {
            reference,
            segmentation,
            out,
        } => cmd_eval(&reference, &segmentation, out.as_deref()),
        Command::Loo {
            out,
            subjects,
            training_sizes,
        } => cmd_loo(
            cfg,
            &out,
            subjects.unwrap_or(cfg.eval.subjects),
            &training_sizes.unwrap_or_else(|| cfg.eval.training_sizes.clone()),
        ),
    }
}

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given on the command line or in the configuration")))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Pipeline(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_keypoints(path: &Path) -> Result<Vec<DescribedKeypoint>> {
    parse_keypoints_csv(&read_text(path)?)
        .map(|t| t.keypoints)
        .map_err(|source| Error::Parse {
            path: path.into(),
            source,
        })
}

fn cmd_phantom(cfg: &PipelineConfig, out: &Path, n: usize, crop_organ: Option<u16>, with_keypoints: bool) -> Result<()> {
    create_dir(out)?;
    let mut manifest = TrainingManifest::default();
    for id in 0..n {
        let mut subject: Subject = generate_subject(&cfg.phantom, id as u64)?;
        if let Some(organ) = crop_organ {
            subject = crop_fov(&subject, organ, cfg.phantom.fov_margin)?;
        }
        let name = format!("subject_{id:03}");
        let dir = out.join(&name);
        create_dir(&dir)?;
        write_scalar(&subject.image, dir.join("image.nrrd"))?;
        write_labels(&subject.labels, dir.join("labels.nrrd"))?;
        write_json(&dir.join("provenance.json"), &subject.provenance)?;
        let keypoints = if with_keypoints {
            let kps = extract_labeled(&subject.image, &subject.labels, cfg)?;
            write_text(
                &dir.join("keypoints.csv"),
                &write_keypoints_csv(&KeypointTable {
                    keypoints: kps,
                    votes: None,
                }),
            )?;
            Some(PathBuf::from(&name).join("keypoints.csv"))
        } else {
            None
        };
        manifest.training.push(TrainingEntry {
            image: PathBuf::from(&name).join("image.nrrd"),
            labels: PathBuf::from(&name).join("labels.nrrd"),
            keypoints,
        });
        info!("wrote {}", dir.display());
    }
    write_json(&out.join("manifest.json"), &manifest)
}

fn cmd_extract(cfg: &PipelineConfig, image: &Path, labels: Option<&Path>, out: &Path) -> Result<()> {
    let image = read_scalar(image)?;
    let keypoints = match labels {
        Some(l) => extract_labeled(&image, &read_labels(l)?, cfg)?,
        None => extract(&image, cfg)?,
    };
    info!("{} keypoints", keypoints.len());
    write_text(out, &write_keypoints_csv(&KeypointTable { keypoints, votes: None }))
}

fn load_atlas(entry: &TrainingEntry, cfg: &PipelineConfig) -> Result<Atlas> {
    let image = read_scalar(&entry.image)?;
    let labels = read_labels(&entry.labels)?;
    match &entry.keypoints {
        Some(k) => Ok(Atlas::new(image, labels, read_keypoints(k)?)?),
        None => prepare_atlas(image, labels, cfg),
    }
}

fn cmd_segment(
    cfg: &PipelineConfig,
    test: &Path,
    manifest_path: &Path,
    test_keypoints: Option<&Path>,
    out: &Path,
    probability_maps: bool,
) -> Result<()> {
    let manifest = parse_manifest(&read_text(manifest_path)?).map_err(|source| Error::Parse {
        path: manifest_path.into(),
        source,
    })?;
    if manifest.training.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let atlases = manifest
        .resolve(base)
        .training
        .iter()
        .map(|e| load_atlas(e, cfg))
        .collect::<Result<Vec<_>>>()?;
    let image = read_scalar(test)?;

    let t0 = std::time::Instant::now();
    let keypoints = match test_keypoints {
        Some(p) => read_keypoints(p)?,
        None => extract(&image, cfg)?,
    };
    let extraction = t0.elapsed().as_secs_f64();
    let mut output = segment_with_keypoints(&image, keypoints, &atlases, cfg)?;
    output.timings.extraction = extraction;

    create_dir(out)?;
    let result = &output.result;
    write_labels(&result.labels, out.join("segmentation.nrrd"))?;
    write_text(
        &out.join("keypoints.csv"),
        &write_keypoints_csv(&KeypointTable {
            keypoints: output.test_keypoints.clone(),
            votes: Some(output.votes.clone()),
        }),
    )?;
    write_text(&out.join("matches.csv"), &write_matches_csv(&output.matches()))?;
    write_json(&out.join("summary.json"), &output.summary())?;
    write_json(&out.join("config.json"), cfg)?;
    if probability_maps {
        let pm = &result.probability_maps;
        for label in 1..=pm.maps.len() as u16 {
            let data = (0..pm.geometry.len()).map(|v| pm.normalized(label, v) as f32).collect();
            let vol = kptransfer::volume::ScalarVolume::new(pm.geometry, data)?;
            write_scalar(&vol, out.join(format!("probability_{label:02}.nrrd")))?;
        }
    }
    info!(
        "{} test keypoints, {} labelled; {:.2}s total",
        output.test_keypoints.len(),
        output.votes.iter().filter(|v| v.voted_label.is_some()).count(),
        output.timings.total()
    );
    Ok(())
}

#[derive(Serialize)]
struct DiceReport {
    per_label_dice: std::collections::BTreeMap<u16, f64>,
    mean_dice: f64,
}

fn cmd_eval(reference: &Path, segmentation: &Path, out: Option<&Path>) -> Result<()> {
    let per_label_dice = dice_all(&read_labels(reference)?, &read_labels(segmentation)?)?;
    let mean_dice = mean(&per_label_dice.values().copied().collect::<Vec<_>>());
    let report = DiceReport {
        per_label_dice,
        mean_dice,
    };
    match out {
        Some(p) => write_json(p, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Pipeline(e.to_string()))?);
            Ok(())
        }
    }
}

fn cmd_loo(cfg: &PipelineConfig, out: &Path, n: usize, sizes: &[usize]) -> Result<()> {
    let subjects = (0..n as u64)
        .map(|id| generate_subject(&cfg.phantom, id))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = vec![leave_one_out(&subjects, cfg)?];
    if !sizes.is_empty() {
        reports.extend(training_size_sweep(&subjects, sizes, cfg)?);
    }
    create_dir(out)?;
    write_json(&out.join("report.json"), &reports)?;
    write_text(&out.join("folds.csv"), &folds_csv(&reports))?;
    let table = aggregate_tsv(&reports);
    write_text(&out.join("aggregate.tsv"), &table)?;
    print!("{table}");
    Ok(())
}
