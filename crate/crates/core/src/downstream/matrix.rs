//! Experiment matrix: many downstream runs over shared data, compared in
//! pairs and written out as tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfssl_numerics::{Exec, Init};
use serde::{Deserialize, Serialize};

use crate::datastore::{stratified_frame_indices, FrameSet};
use crate::downstream::head::{attach_head, HeadConfig, Standardizer, Task, TaskHead};
use crate::downstream::metrics::{fingerprint, improvement_pct, EvalReport};
use crate::downstream::train::{
    default_encoder_lr_factor, evaluate, extract_features, head_outputs, report_from_outputs, train_head_on_features,
    train_task, FineTuneConfig, FineTuneMode, InitKind, ReportOptions, Targets,
};
use crate::error::{Error, Result};
use crate::sigsynth::derive_seed;
use crate::ssl::{Encoder, EncoderConfig};

/// One downstream run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub task: Task,
    pub init: InitKind,
    pub mode: FineTuneMode,
    pub head_layers: usize,
    pub label_ratio: f64,
    /// Overrides the task default for fine-tuned cells.
    #[serde(default)]
    pub encoder_lr_factor: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
}

impl CellSpec {
    pub fn new(task: Task, init: InitKind, mode: FineTuneMode, head_layers: usize, label_ratio: f64) -> Self {
        let init_name = match init {
            InitKind::Pretrained => "ssl",
            InitKind::RandomXavier => "random",
            InitKind::SupervisedScratch => "supervised",
        };
        let mode_name = match mode {
            FineTuneMode::Frozen => "frozen",
            FineTuneMode::Finetune => "finetune",
        };
        CellSpec {
            name: format!(
                "{}_{mode_name}_{init_name}_L{head_layers}_r{label_ratio}",
                task.name().to_lowercase()
            ),
            task,
            init,
            mode,
            head_layers,
            label_ratio,
            encoder_lr_factor: None,
            epochs: None,
        }
    }

    /// Method label shared by every ratio of the same setup.
    pub fn method(&self) -> String {
        self.name
            .rsplit_once("_r")
            .map_or(self.name.clone(), |(m, _)| m.to_string())
    }

    pub fn encoder_lr_factor(&self) -> f64 {
        match (self.mode, self.init) {
            (FineTuneMode::Frozen, _) => 0.0,
            (FineTuneMode::Finetune, InitKind::SupervisedScratch) => self.encoder_lr_factor.unwrap_or(1.0),
            (FineTuneMode::Finetune, _) => self
                .encoder_lr_factor
                .unwrap_or_else(|| default_encoder_lr_factor(self.task, self.label_ratio)),
        }
    }

    /// Effective fine-tuning configuration for this cell.
    pub fn finetune_config(&self, base: &FineTuneConfig, seed: u64) -> FineTuneConfig {
        let mut cfg = base.clone();
        cfg.mode = self.mode;
        cfg.head_layers = self.head_layers;
        cfg.encoder_lr_factor = self.encoder_lr_factor();
        if let Some(e) = self.epochs {
            cfg.epochs = e;
            cfg.warmup_epochs = cfg.warmup_epochs.min(e);
        }
        cfg.seed = derive_seed(seed, fingerprint_seed(&self.name));
        cfg
    }
}

fn fingerprint_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// `ours` against `base`, both cell names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    pub name: String,
    pub base: String,
    pub ours: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub cells: Vec<CellSpec>,
    pub comparisons: Vec<ComparisonSpec>,
}

impl MatrixSpec {
    /// Frozen SSL against frozen random backbones, optionally fine-tuned SSL
    /// against supervised training from scratch, for every head depth and
    /// label ratio.
    pub fn standard(tasks: &[Task], ratios: &[f64], head_layers: &[usize], finetune: bool) -> Self {
        let mut cells = Vec::new();
        let mut comparisons = Vec::new();
        for &task in tasks {
            for &r in ratios {
                for &l in head_layers {
                    let ours = CellSpec::new(task, InitKind::Pretrained, FineTuneMode::Frozen, l, r);
                    let base = CellSpec::new(task, InitKind::RandomXavier, FineTuneMode::Frozen, l, r);
                    comparisons.push(ComparisonSpec {
                        name: format!("{} frozen L{l} r{r}: SSL vs random", task.name()),
                        base: base.name.clone(),
                        ours: ours.name.clone(),
                    });
                    cells.push(ours);
                    cells.push(base);
                }
                if !finetune {
                    continue;
                }
                for &l in head_layers {
                    let ours = CellSpec::new(task, InitKind::Pretrained, FineTuneMode::Finetune, l, r);
                    let base = CellSpec::new(task, InitKind::SupervisedScratch, FineTuneMode::Finetune, l, r);
                    comparisons.push(ComparisonSpec {
                        name: format!("{} finetune L{l} r{r}: SSL vs supervised", task.name()),
                        base: base.name.clone(),
                        ours: ours.name.clone(),
                    });
                    cells.push(ours);
                    cells.push(base);
                }
            }
        }
        MatrixSpec { cells, comparisons }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cells {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::config(format!("duplicate cell name {}", c.name)));
            }
            if !(c.label_ratio > 0.0 && c.label_ratio <= 1.0) {
                return Err(Error::config(format!(
                    "cell {}: label ratio {} outside (0, 1]",
                    c.name, c.label_ratio
                )));
            }
            if c.mode == FineTuneMode::Frozen && c.init == InitKind::SupervisedScratch {
                return Err(Error::config(format!(
                    "cell {}: supervised training cannot be frozen",
                    c.name
                )));
            }
        }
        for cmp in &self.comparisons {
            let task_of = |name: &str| {
                self.cells
                    .iter()
                    .find(|c| c.name == name)
                    .map(|c| c.task)
                    .ok_or_else(|| Error::config(format!("comparison {} names unknown cell {name}", cmp.name)))
            };
            if task_of(&cmp.base)? != task_of(&cmp.ours)? {
                return Err(Error::config(format!("comparison {} mixes tasks", cmp.name)));
            }
        }
        Ok(())
    }
}

/// Shared inputs for every cell of a matrix.
pub struct MatrixContext<'a> {
    /// Labeled pool; cells subsample it by label ratio.
    pub train: &'a FrameSet,
    pub test: &'a FrameSet,
    pub pretrained: Option<&'a Encoder<f32>>,
    /// Architecture of randomly initialized backbones.
    pub encoder: EncoderConfig,
    pub base: FineTuneConfig,
    pub seed: u64,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    pub config: FineTuneConfig,
    pub n_train: usize,
    pub final_loss: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub name: String,
    pub task: Task,
    pub metric: String,
    pub base_cell: String,
    pub ours_cell: String,
    pub base: f64,
    pub ours: f64,
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cells: Vec<CellResult>,
    pub comparisons: Vec<ComparisonResult>,
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Aoa => "mae_deg",
        Task::Amc => "accuracy",
    }
}

struct CachedFeatures {
    train: Vec<f32>,
    test: Vec<f32>,
    dim: usize,
}

fn backbone_for(ctx: &MatrixContext<'_>, init: InitKind) -> Result<Encoder<f32>> {
    match init {
        InitKind::Pretrained => ctx
            .pretrained
            .cloned()
            .ok_or_else(|| Error::config("a pretrained cell needs a checkpoint")),
        InitKind::RandomXavier => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, 1));
            Encoder::new(&ctx.encoder, Init::XavierUniform, &mut rng)
        }
        InitKind::SupervisedScratch => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, 2));
            Encoder::new(&ctx.encoder, Init::KaimingUniform, &mut rng)
        }
    }
}

fn gather(features: &[f32], dim: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&features[i * dim..(i + 1) * dim]);
    }
    out
}

fn select<T: Clone>(targets: &Targets, idx: &[usize], f: impl Fn(&Targets) -> &[T]) -> Vec<T> {
    let all = f(targets);
    idx.iter().map(|&i| all[i].clone()).collect()
}

fn subset_targets(targets: &Targets, idx: &[usize]) -> Targets {
    match targets {
        Targets::Aoa(_) => Targets::Aoa(select(targets, idx, |t| match t {
            Targets::Aoa(v) => v.as_slice(),
            Targets::Amc(_) => unreachable!(),
        })),
        Targets::Amc(_) => Targets::Amc(select(targets, idx, |t| match t {
            Targets::Amc(v) => v.as_slice(),
            Targets::Aoa(_) => unreachable!(),
        })),
    }
}

/// Runs every cell in order. Frozen cells sharing a backbone reuse one pass
/// of feature extraction.
pub fn run_matrix(spec: &MatrixSpec, ctx: &MatrixContext<'_>) -> Result<MatrixReport> {
    spec.validate()?;
    ctx.base.validate()?;
    let mut cache: BTreeMap<&'static str, CachedFeatures> = BTreeMap::new();
    let mut subsets: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut cells = Vec::with_capacity(spec.cells.len());

    for cell in &spec.cells {
        let started = Instant::now();
        let cfg = cell.finetune_config(&ctx.base, ctx.seed);
        cfg.validate()?;
        let fp = fingerprint(&(cell, &cfg, ctx.encoder.clone()));
        let opts = ReportOptions::from_config(&cfg, cell.label_ratio, fp);
        let idx = match subsets.get(&cell.label_ratio.to_bits()) {
            Some(v) => v.clone(),
            None => {
                let v = stratified_frame_indices(ctx.train, cell.label_ratio, derive_seed(ctx.seed, 3))?;
                subsets.insert(cell.label_ratio.to_bits(), v.clone());
                v
            }
        };
        let test_targets = Targets::of(ctx.test, cell.task);
        let (report, final_loss) = if cell.mode == FineTuneMode::Frozen {
            let key = match cell.init {
                InitKind::Pretrained => "pretrained",
                _ => "random",
            };
            if !cache.contains_key(key) {
                let mut backbone = backbone_for(ctx, cell.init)?;
                log::info!("extracting {key} features");
                let train = extract_features(&mut backbone, ctx.train, 256, ctx.exec)?;
                let test = extract_features(&mut backbone, ctx.test, 256, ctx.exec)?;
                cache.insert(
                    key,
                    CachedFeatures {
                        train,
                        test,
                        dim: backbone.embedding_dim(),
                    },
                );
            }
            let feats = &cache[key];
            let mut train_x = gather(&feats.train, feats.dim, &idx);
            let mut test_x = feats.test.clone();
            if cfg.standardize {
                let s = Standardizer::fit(&train_x, feats.dim);
                s.apply(&mut train_x);
                s.apply(&mut test_x);
            }
            let targets = subset_targets(&Targets::of(ctx.train, cell.task), &idx);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut head = TaskHead::new(&HeadConfig::new(cell.task, cell.head_layers), feats.dim, &mut rng)?;
            let curves = train_head_on_features(&mut head, &train_x, &targets, &cfg, ctx.exec)?;
            let outputs = head_outputs(&head, &test_x, ctx.exec)?;
            (
                report_from_outputs(&outputs, &test_targets, &opts)?,
                curves.epoch_loss.last().copied().unwrap_or(f64::NAN),
            )
        } else {
            let backbone = backbone_for(ctx, cell.init)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = attach_head(backbone, &HeadConfig::new(cell.task, cell.head_layers), false, &mut rng)?;
            let train = ctx.train.subset(&idx);
            let curves = train_task(&mut model, &train, &cfg, ctx.exec)?;
            (
                evaluate(&mut model, ctx.test, &opts, ctx.exec)?,
                curves.epoch_loss.last().copied().unwrap_or(f64::NAN),
            )
        };
        let seconds = started.elapsed().as_secs_f64();
        log::info!(
            "{}: {} = {:.4} ({} train frames, {seconds:.0}s)",
            cell.name,
            metric_name(cell.task),
            report.primary(),
            idx.len()
        );
        cells.push(CellResult {
            spec: cell.clone(),
            config: cfg,
            n_train: idx.len(),
            final_loss,
            report,
        });
    }

    let find = |name: &str| cells.iter().find(|c| c.spec.name == name).expect("validated");
    let comparisons = spec
        .comparisons
        .iter()
        .map(|cmp| {
            let (b, o) = (find(&cmp.base), find(&cmp.ours));
            let task = b.spec.task;
            let (base, ours) = (b.report.primary(), o.report.primary());
            ComparisonResult {
                name: cmp.name.clone(),
                task,
                metric: metric_name(task).to_string(),
                base_cell: cmp.base.clone(),
                ours_cell: cmp.ours.clone(),
                base,
                ours,
                improvement_pct: improvement_pct(task, base, ours),
            }
        })
        .collect();
    Ok(MatrixReport { cells, comparisons })
}

#[derive(Serialize)]
struct CellRow<'a> {
    cell: &'a str,
    task: &'static str,
    init: InitKind,
    mode: FineTuneMode,
    head_layers: usize,
    label_ratio: f64,
    n_train: usize,
    n_test: usize,
    mae_deg: Option<f64>,
    accuracy: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
    fingerprint: &'a str,
}

#[derive(Serialize)]
struct EfficiencyRow<'a> {
    method: String,
    task: &'static str,
    label_ratio: f64,
    metric: &'static str,
    value: f64,
    cell: &'a str,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", x * scale))
}

impl MatrixReport {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.spec.name == name)
    }

    /// Per-task tables of every cell at each label ratio followed by one
    /// IMPROVEMENT row per comparison.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for task in [Task::Aoa, Task::Amc] {
            let cells: Vec<&CellResult> = self.cells.iter().filter(|c| c.spec.task == task).collect();
            if cells.is_empty() {
                continue;
            }
            let _ = writeln!(s, "== {} ==", task.name());
            match task {
                Task::Aoa => {
                    let _ = writeln!(s, "{:<44} {:>8} {:>10}", "method", "ratio", "MAE (deg)");
                }
                Task::Amc => {
                    let _ = writeln!(
                        s,
                        "{:<44} {:>8} {:>8} {:>10} {:>8}",
                        "method", "ratio", "acc (%)", "prec (%)", "rec (%)"
                    );
                }
            }
            for c in &cells {
                let r = &c.report;
                match task {
                    Task::Aoa => {
                        let _ = writeln!(
                            s,
                            "{:<44} {:>8} {:>10}",
                            c.spec.method(),
                            c.spec.label_ratio,
                            fmt_opt(r.mae_deg, 1.0)
                        );
                    }
                    Task::Amc => {
                        let _ = writeln!(
                            s,
                            "{:<44} {:>8} {:>8} {:>10} {:>8}",
                            c.spec.method(),
                            c.spec.label_ratio,
                            fmt_opt(r.accuracy, 100.0),
                            fmt_opt(r.precision, 100.0),
                            fmt_opt(r.recall, 100.0)
                        );
                    }
                }
            }
            for cmp in self.comparisons.iter().filter(|c| c.task == task) {
                let _ = writeln!(s, "IMPROVEMENT {:<32} {:>+8.2}%", cmp.name, cmp.improvement_pct);
            }
            s.push('\n');
        }
        s
    }

    /// Writes JSON, CSV and text outputs into `dir` and returns their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();

        let p = dir.join("matrix.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        paths.push(p);

        let p = dir.join("cells.csv");
        let mut w = csv_writer(&p)?;
        for c in &self.cells {
            w.serialize(CellRow {
                cell: &c.spec.name,
                task: c.spec.task.name(),
                init: c.spec.init,
                mode: c.spec.mode,
                head_layers: c.spec.head_layers,
                label_ratio: c.spec.label_ratio,
                n_train: c.n_train,
                n_test: c.report.n_examples,
                mae_deg: c.report.mae_deg,
                accuracy: c.report.accuracy,
                precision: c.report.precision,
                recall: c.report.recall,
                fingerprint: &c.report.fingerprint,
            })?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        paths.push(p);

        let p = dir.join("comparisons.csv");
        let mut w = csv_writer(&p)?;
        for c in &self.comparisons {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        paths.push(p);

        let p = dir.join("data_efficiency.csv");
        let mut w = csv_writer(&p)?;
        let mut rows: Vec<&CellResult> = self.cells.iter().collect();
        rows.sort_by(|a, b| {
            (a.spec.task, a.spec.method())
                .cmp(&(b.spec.task, b.spec.method()))
                .then(a.spec.label_ratio.total_cmp(&b.spec.label_ratio))
        });
        for c in rows {
            w.serialize(EfficiencyRow {
                method: c.spec.method(),
                task: c.spec.task.name(),
                label_ratio: c.spec.label_ratio,
                metric: metric_name(c.spec.task),
                value: c.report.primary(),
                cell: &c.spec.name,
            })?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        paths.push(p);

        for c in self.cells.iter().filter(|c| c.spec.task == Task::Aoa) {
            let p = dir.join(format!("quiver_{}.csv", c.spec.name));
            write_quiver(&p, &c.report)?;
            paths.push(p);
        }

        let p = dir.join("summary.txt");
        std::fs::write(&p, self.summary()).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
        Ok(paths)
    }
}

/// Per-direction mean errors as `theta,phi,mean_dtheta,mean_dphi,count`.
pub fn write_quiver(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    for e in &report.per_angle_errors {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
