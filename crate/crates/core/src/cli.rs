//! Subcommand implementations behind the `rfssl` binary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use rfssl_numerics::{Checkpoint, Exec};

use crate::augment::AugmentConfig;
use crate::config::ExperimentConfig;
use crate::datastore::{make_splits, FrameSet, Manifest, Splits};
use crate::downstream::{run_matrix, MatrixContext, MatrixReport};
use crate::error::{Error, Result};
use crate::sigsynth::{synthesize_dataset, RecordingMeta};
use crate::ssl::moco::checkpoint_encoder_config;
use crate::ssl::pretrain::{trace_deciles, write_trace};
use crate::ssl::{load_backbone, pretrain, PretrainSetup};

pub const SPLITS_FILE: &str = "splits.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const MATRIX_FILE: &str = "matrix.json";

/// Where each subcommand writes inside the output directory.
pub fn pretrain_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.out_dir.join("pretrain")
}

pub fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.out_dir.join("eval")
}

pub fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    pretrain_dir(cfg).join(CHECKPOINT_FILE)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutcome {
    pub manifest: Manifest,
    pub splits: Splits,
    pub paths: Vec<PathBuf>,
}

/// Recording counts per modulation and per (azimuth, elevation) cell.
pub fn cell_counts(metas: &[RecordingMeta]) -> (BTreeMap<String, usize>, BTreeMap<(i64, i64), usize>) {
    let mut by_mod = BTreeMap::new();
    let mut by_angle = BTreeMap::new();
    for m in metas {
        *by_mod.entry(m.modulation.name().to_string()).or_insert(0) += 1;
        let key = (
            (m.azimuth_deg * 1000.0).round() as i64,
            (m.elevation_deg * 1000.0).round() as i64,
        );
        *by_angle.entry(key).or_insert(0) += 1;
    }
    (by_mod, by_angle)
}

/// Synthesizes the dataset into the data directory and writes the splits.
pub fn cmd_synth(cfg: &ExperimentConfig, exec: Exec, out: &mut dyn Write) -> Result<SynthOutcome> {
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    let manifest = synthesize_dataset(&cfg.dataset.grid, cfg.dataset.per_cell, dir, exec)?;
    let metas: Vec<RecordingMeta> = manifest.entries.iter().map(|e| e.meta()).collect();
    let splits = make_splits(&metas, &cfg.split)?;
    let splits_path = dir.join(SPLITS_FILE);
    splits.write(&splits_path)?;

    let (by_mod, by_angle) = cell_counts(&metas);
    let w = |e: std::io::Error| Error::io("<stdout>", e);
    writeln!(out, "{} recordings, checksum {}", manifest.len(), manifest.checksum()?).map_err(w)?;
    for (m, n) in &by_mod {
        writeln!(out, "  modulation {m}: {n}").map_err(w)?;
    }
    for ((az, el), n) in &by_angle {
        writeln!(
            out,
            "  azimuth {:.1} elevation {:.1}: {n}",
            *az as f64 / 1000.0,
            *el as f64 / 1000.0
        )
        .map_err(w)?;
    }
    writeln!(
        out,
        "  dev {} / test {} / labeled {}",
        splits.dev.len(),
        splits.test.len(),
        splits.labeled.len()
    )
    .map_err(w)?;
    let mut paths: Vec<PathBuf> = manifest.entries.iter().map(|e| dir.join(&e.path)).collect();
    paths.push(dir.join(Manifest::FILE_NAME));
    paths.push(splits_path);
    Ok(SynthOutcome {
        manifest,
        splits,
        paths,
    })
}

/// Frames of the dataset on disk, grouped by split.
pub struct LoadedData {
    pub dev: FrameSet,
    pub test: FrameSet,
    pub labeled: FrameSet,
    pub splits: Splits,
}

pub fn load_data(cfg: &ExperimentConfig, exec: Exec) -> Result<LoadedData> {
    let dir = &cfg.paths.data_dir;
    let manifest = Manifest::read(&dir.join(Manifest::FILE_NAME))?;
    let splits = Splits::read(&dir.join(SPLITS_FILE))?;
    if splits.dev.iter().chain(&splits.test).any(|&id| id >= manifest.len()) {
        return Err(Error::Mismatch(
            "splits reference recordings missing from the manifest".into(),
        ));
    }
    let recordings = Arc::new(manifest.load_recordings(dir, exec)?);
    let stride = cfg.dataset.frame_stride;
    Ok(LoadedData {
        dev: FrameSet::new(recordings.clone(), &splits.dev, stride)?,
        test: FrameSet::new(recordings.clone(), &splits.test, stride)?,
        labeled: FrameSet::new(recordings, &splits.labeled, stride)?,
        splits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub seconds: f64,
    pub interrupted: bool,
}

/// Pretrains on the dev split. A raised `cancel` flag stops at the next
/// step boundary; the partial state is still checkpointed.
pub fn cmd_pretrain(
    cfg: &ExperimentConfig,
    no_augment: bool,
    cancel: Option<&AtomicBool>,
    exec: Exec,
    out: &mut dyn Write,
) -> Result<PretrainSummary> {
    let data = load_data(cfg, exec)?;
    let setup = PretrainSetup {
        encoder: cfg.pretrain.encoder.clone(),
        moco: cfg.pretrain.moco.clone(),
        augment: if no_augment {
            AugmentConfig::none()
        } else {
            cfg.pretrain.augment.clone()
        },
        seed: cfg.pretrain_seed(),
        exec,
    };
    let outcome = pretrain(&data.dev, &setup, cancel)?;
    let dir = pretrain_dir(cfg);
    create_dir(&dir)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    outcome.checkpoint().save(&ck_path)?;
    let trace_path = dir.join(TRACE_FILE);
    write_trace(&trace_path, &outcome.trace)?;

    let final_loss = outcome.trace.last().map(|r| r.loss);
    let w = |e: std::io::Error| Error::io("<stdout>", e);
    if outcome.interrupted {
        writeln!(out, "interrupted after {} steps; state saved", outcome.trace.len()).map_err(w)?;
    }
    if let Some(l) = final_loss {
        writeln!(out, "final loss {l:.4} after {} steps", outcome.trace.len()).map_err(w)?;
    }
    if let Some((first, last)) = trace_deciles(&outcome.trace) {
        writeln!(out, "mean loss first/last tenth {first:.4} / {last:.4}").map_err(w)?;
    }
    writeln!(out, "wall time {:.1}s", outcome.seconds).map_err(w)?;
    Ok(PretrainSummary {
        checkpoint: ck_path,
        trace: trace_path,
        steps: outcome.trace.len(),
        final_loss,
        seconds: outcome.seconds,
        interrupted: outcome.interrupted,
    })
}

/// Runs the downstream matrix with the backbone from `checkpoint`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    ratios: Option<&[f64]>,
    exec: Exec,
    out: &mut dyn Write,
) -> Result<(MatrixReport, Vec<PathBuf>)> {
    let mut section = cfg.downstream.matrix.clone();
    if let Some(r) = ratios {
        section.ratios = r.to_vec();
        section.cells.clear();
        section.comparisons.clear();
    }
    let spec = section.spec();
    spec.validate()?;
    let ck_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_checkpoint(cfg));
    let ck = Checkpoint::<f32>::load(&ck_path).map_err(|e| match e {
        rfssl_numerics::NumericsError::Io { .. } => Error::Numerics(e),
        other => Error::Mismatch(format!("{}: {other}", ck_path.display())),
    })?;
    let stored = checkpoint_encoder_config(&ck)?;
    if stored != cfg.pretrain.encoder {
        return Err(Error::Mismatch(format!(
            "checkpoint encoder {stored:?} differs from configured {:?}",
            cfg.pretrain.encoder
        )));
    }
    let backbone = load_backbone(&ck, Some(&cfg.pretrain.encoder))?;
    let data = load_data(cfg, exec)?;
    let ctx = MatrixContext {
        train: &data.labeled,
        test: &data.test,
        pretrained: Some(&backbone),
        encoder: cfg.pretrain.encoder.clone(),
        base: cfg.downstream.finetune.clone(),
        seed: cfg.downstream_seed(),
        exec,
    };
    let report = run_matrix(&spec, &ctx)?;
    let paths = report.write(&eval_dir(cfg))?;
    write!(out, "{}", report.summary()).map_err(|e| Error::io("<stdout>", e))?;
    Ok((report, paths))
}

/// Re-emits tables from a saved matrix report.
pub fn cmd_report(input: &Path, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<(MatrixReport, Vec<PathBuf>)> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let report: MatrixReport = serde_json::from_str(&text)?;
    let paths = match out_dir {
        Some(d) => report.write(d)?,
        None => Vec::new(),
    };
    write!(out, "{}", report.summary()).map_err(|e| Error::io("<stdout>", e))?;
    Ok((report, paths))
}
