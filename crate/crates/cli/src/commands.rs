//! Command implementations. Each returns the process exit code on success;
//! errors map to codes through [`exit_code`].

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use advpatch::data::{generate_pseudo_labels, load_dataset, Split};
use advpatch::detector::darknet::load_detector;
use advpatch::detector::fixture::fixture_detector;
use advpatch::detector::{ConvDetector, DetectorAdapter};
use advpatch::evaluator::{evaluate_condition, pr_curve, report, ConditionKind, ConditionResult, EvalCondition};
use advpatch::fsutil::write_atomic;
use advpatch::patch::{Patch, PrintableColorSet};
use advpatch::synthetic::write_scenes;
use advpatch::trainer::{
    load_checkpoint, load_verified_patch, save_checkpoint, save_patch_with_manifest, total_steps, train_until,
    TrainHistory, TrainState,
};
use advpatch::{Error, Result};
use log::info;

use crate::config::{DetectorKind, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn stdout_err(source: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source,
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    config.apply_overrides(overrides)?;
    Ok(config)
}

pub fn build_detector(config: &RunConfig) -> Result<ConvDetector> {
    let detector = match config.detector_kind()? {
        DetectorKind::Fixture => fixture_detector(config.u64("detector.seed")?),
        DetectorKind::Darknet => load_detector(
            &config.existing_path("detector.cfg")?,
            &config.existing_path("detector.weights")?,
            &config.existing_path("detector.names")?,
        )?,
    };
    let size = config.input_size()?;
    if size % detector.stride() != 0 {
        return Err(Error::Config(format!(
            "detector.input_size {size} is not a multiple of the detector stride {}",
            detector.stride()
        )));
    }
    Ok(detector)
}

fn colors(config: &RunConfig) -> Result<PrintableColorSet> {
    match config.path("paths.colors") {
        Some(p) if !p.is_file() => Err(Error::MissingFile(p)),
        Some(p) => PrintableColorSet::load(&p),
        None => Ok(PrintableColorSet::lattice()),
    }
}

/// `paths.run_dir` when set, otherwise `<paths.runs>/<config hash>-<timestamp>`.
pub fn run_dir(config: &RunConfig) -> PathBuf {
    config.path("paths.run_dir").unwrap_or_else(|| {
        let runs = config.path("paths.runs").unwrap_or_else(|| PathBuf::from("runs"));
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        runs.join(format!("{}-{stamp}", config.hash8()))
    })
}

fn prepare_run_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = run_dir(config);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_atomic(&dir.join("config.txt"), config.to_text().as_bytes())?;
    Ok(dir)
}

pub fn cmd_label(
    config_path: &Path,
    overrides: &[String],
    image_dir: &Path,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<u8> {
    let config = load_config(config_path, overrides)?;
    if !image_dir.is_dir() {
        return Err(Error::MissingFile(image_dir.to_path_buf()));
    }
    let detector = build_detector(&config)?;
    let summary = generate_pseudo_labels(
        &detector,
        image_dir,
        out_dir,
        config.input_size()?,
        config.f64("label.conf_threshold")?,
        config.f64("label.nms_iou")?,
    )?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    writeln!(out, "labeled {} images, {} boxes", summary.images, summary.boxes).map_err(stdout_err)?;
    writeln!(out, "{}", summary.to_json_line()).map_err(stdout_err)?;
    Ok(if summary.warnings.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}

/// History rows already on disk for steps up to `step`, used when resuming
/// into the same run directory.
fn history_prefix(path: &Path, step: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("step"))
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn cmd_train(config_path: &Path, overrides: &[String], resume: Option<&Path>, out: &mut dyn Write) -> Result<u8> {
    let config = load_config(config_path, overrides)?;
    let train = config.train_config()?;
    let images = config.existing_path("paths.train_images")?;
    let labels = config.existing_path("paths.train_labels")?;
    let colors = colors(&config)?;
    let mut state = match resume {
        Some(p) if !p.is_file() => return Err(Error::MissingFile(p.to_path_buf())),
        Some(p) => load_checkpoint(p)?,
        None => TrainState::initial(&train)?,
    };
    if state.patch.height() != train.patch_size || state.patch.width() != train.patch_size {
        return Err(Error::Config(format!(
            "checkpoint patch is {}x{} but train.patch_size is {}",
            state.patch.height(),
            state.patch.width(),
            train.patch_size
        )));
    }
    let detector = build_detector(&config)?;
    let dataset = load_dataset(&images, &labels, config.input_size()?, Split::Train, train.seed)?;
    if dataset.is_empty() {
        return Err(Error::Config(format!("no images found in {}", images.display())));
    }
    let dir = prepare_run_dir(&config)?;
    info!("run directory {}", dir.display());

    let full = total_steps(&train, &dataset);
    let max_steps = config.u64("train.max_steps")?;
    let until = if max_steps > 0 { max_steps.min(full) } else { full };

    let history_path = dir.join("history.csv");
    let kept = if resume.is_some() {
        history_prefix(&history_path, state.step)
    } else {
        Vec::new()
    };
    let file = File::create(&history_path).map_err(io_err(&history_path))?;
    let mut history = BufWriter::new(file);
    let write_err = io_err(&history_path);
    let header_and_prefix = TrainHistory::csv_header(train.mode) + &kept.concat();
    history.write_all(header_and_prefix.as_bytes()).map_err(write_err)?;

    let checkpoint_path = dir.join("checkpoint.apc");
    let every = train.checkpoint_every;
    let mut last = None;
    let outcome = train_until(
        &train,
        &detector,
        &dataset,
        &colors,
        &mut state,
        until,
        &mut |s, record| {
            history
                .write_all(TrainHistory::csv_row(record).as_bytes())
                .map_err(io_err(&history_path))?;
            if every > 0 && s.step % every == 0 {
                history.flush().map_err(io_err(&history_path))?;
                save_checkpoint(s, &checkpoint_path)?;
            }
            last = Some(record.loss);
            Ok(())
        },
    );
    history.flush().map_err(io_err(&history_path))?;
    outcome?;

    save_checkpoint(&state, &checkpoint_path)?;
    state.patch.save_png(&dir.join("patch.png"))?;
    save_patch_with_manifest(&state.patch, &dir.join("patch.apf"), train.mode, state.step, train.seed)?;
    match last {
        Some(l) => writeln!(
            out,
            "final step {}: nps={} tv={} obj={} total={}",
            state.step, l.nps, l.tv, l.obj, l.total
        ),
        None => writeln!(out, "no steps run (already at step {})", state.step),
    }
    .map_err(stdout_err)?;
    writeln!(out, "run directory: {}", dir.display()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

/// Parses `NAME` or `NAME=patch_path` condition arguments. CLEAN is always
/// present; naming it again is allowed once.
pub fn parse_conditions(args: &[String]) -> Result<BTreeMap<ConditionKind, Option<PathBuf>>> {
    let mut seen = BTreeMap::new();
    seen.insert(ConditionKind::Clean, None);
    let mut explicit_clean = false;
    for arg in args {
        let (name, path) = match arg.split_once('=') {
            Some((n, p)) => (n, Some(PathBuf::from(p))),
            None => (arg.as_str(), None),
        };
        let kind: ConditionKind = name.parse()?;
        if kind.is_trained() && path.is_none() {
            return Err(Error::invalid(format!(
                "condition {kind} needs a patch: {kind}=<sidecar path>"
            )));
        }
        if !kind.is_trained() && path.is_some() {
            return Err(Error::invalid(format!("condition {kind} does not take a patch")));
        }
        let duplicate = if kind == ConditionKind::Clean {
            std::mem::replace(&mut explicit_clean, true)
        } else {
            seen.insert(kind, path.clone()).is_some()
        };
        if duplicate {
            return Err(Error::invalid(format!("condition {kind} given more than once")));
        }
    }
    Ok(seen)
}

pub fn cmd_eval(config_path: &Path, overrides: &[String], conditions: &[String], out: &mut dyn Write) -> Result<u8> {
    let config = load_config(config_path, overrides)?;
    let requested = parse_conditions(conditions)?;
    let images = config.existing_path("paths.test_images")?;
    let labels = config.existing_path("paths.test_labels")?;
    let mut resolved = Vec::new();
    for (kind, path) in &requested {
        let condition = match kind {
            ConditionKind::Clean => EvalCondition::clean(),
            ConditionKind::Noise => EvalCondition::noise(config.usize("train.patch_size")?, config.u64("eval.seed")?)?,
            _ => {
                let p = path.as_ref().expect("checked while parsing");
                if !p.is_file() {
                    return Err(Error::MissingFile(p.clone()));
                }
                EvalCondition::trained(*kind, Some(load_verified_patch(p)?))?
            }
        };
        resolved.push(condition);
    }
    let detector = build_detector(&config)?;
    let dataset = load_dataset(&images, &labels, config.input_size()?, Split::Test, 0)?;
    let transform = config.transform()?;
    let options = config.eval_options()?;
    let iou = config.f64("eval.iou_threshold")?;
    let mut results = Vec::new();
    for condition in &resolved {
        let images = evaluate_condition(&detector, &dataset, condition, &transform, &options)?;
        let curve = pr_curve(&images, iou)?;
        info!("{}: AP {:.4}", condition.kind(), curve.ap);
        results.push(ConditionResult {
            kind: condition.kind(),
            images,
            curve,
        });
    }
    let dir = prepare_run_dir(&config)?;
    let rows = report(&results, &dir, iou)?;
    writeln!(out, "{:<8} {:>10} {:>10}", "condition", "recall_pct", "threshold").map_err(stdout_err)?;
    for r in &rows {
        writeln!(
            out,
            "{:<9} {:>10.2} {:>10.4}",
            r.condition.name(),
            r.recall_pct,
            r.threshold_used
        )
        .map_err(stdout_err)?;
    }
    writeln!(out, "run directory: {}", dir.display()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

pub fn cmd_export(sidecar: &Path, out_png: &Path, dpi: f64, size_cm: f64, out: &mut dyn Write) -> Result<u8> {
    if !sidecar.is_file() {
        return Err(Error::MissingFile(sidecar.to_path_buf()));
    }
    let patch = Patch::load_sidecar(sidecar)?;
    let side = patch.export_print(out_png, dpi, size_cm)?;
    writeln!(out, "wrote {} ({side}x{side} px at {dpi} dpi)", out_png.display()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

pub fn cmd_synth(out_dir: &Path, count: usize, size: usize, seed: u64, out: &mut dyn Write) -> Result<u8> {
    let paths = write_scenes(out_dir, seed, count, size)?;
    writeln!(out, "wrote {} scenes to {}", paths.len(), out_dir.display()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}
