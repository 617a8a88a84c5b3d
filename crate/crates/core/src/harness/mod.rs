//! Experiment orchestration: configuration, checkpoints, the command
//! implementations behind the CLI and the ablation drivers.

pub mod checkpoint;
pub mod config;

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignContext, AlignError, AlignState, StagePlan};
use crate::data::{Dataset, Split};
use crate::experts::{ExpertKind, FeatureBank};
use crate::metrics::{write_csv, MetricsError, MetricsRecord, Phase};
use crate::moe::{DecoderLm, RouterMode};
use crate::params::ParamStore;
use crate::training::{evaluate, train, EvalReport, MoeModel, Task, TrainContext, TrainError};

pub use checkpoint::{Checkpoint, CheckpointKind, RngState};
pub use config::{EvalConfig, ExperimentConfig, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Whether the error stems from invalid user input rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

/// A config with its dataset and expert features, ready to run.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub bank: FeatureBank,
}

impl Workspace {
    /// Uses `data` when given (its generation settings must match the
    /// config), otherwise generates the dataset from the config.
    pub fn new(cfg: ExperimentConfig, data: Option<Dataset>) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let data = match data {
            Some(d) => {
                if d.config != cfg.data || d.master_seed != cfg.seed {
                    return Err(HarnessError::Config(format!(
                        "dataset was generated with seed {} and different settings than the config (seed {})",
                        d.master_seed, cfg.seed
                    )));
                }
                d
            }
            None => Dataset::generate(cfg.seed, &cfg.data)?,
        };
        let bank = FeatureBank::new(&data);
        Ok(Self { cfg, data, bank })
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", &self.cfg.hash()[..12], self.cfg.seed)
    }

    pub fn lm(&self) -> DecoderLm {
        DecoderLm::new(self.cfg.lm.clone())
    }

    pub fn model(&self) -> MoeModel {
        MoeModel {
            lm: self.lm(),
            moe: self.cfg.moe.clone(),
            grid_size: self.cfg.data.grid_size,
        }
    }

    fn plan(&self) -> Result<StagePlan, HarnessError> {
        Ok(StagePlan::parse(&self.cfg.align.order, &self.cfg.align.stage_budgets)?)
    }

    fn align_checkpoint(&self, st: &AlignState, metrics: &[MetricsRecord]) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Align,
            config: self.cfg.clone(),
            rng: RngState {
                master_seed: self.cfg.seed,
                stages_completed: st.completed,
                train_steps_completed: 0,
            },
            params: st.store.clone(),
            cache: Some(st.cache.clone()),
            metrics: metrics.to_vec(),
        }
    }

    /// Runs (or resumes) the stage plan. `on_stage` sees a checkpoint after
    /// every completed stage.
    pub fn align(
        &self,
        resume: Option<Checkpoint>,
        mut on_stage: impl FnMut(&Checkpoint) -> Result<(), HarnessError>,
    ) -> Result<Checkpoint, HarnessError> {
        let plan = self.plan()?;
        let lm = self.lm();
        let run_id = self.run_id();
        let (mut st, mut metrics) = match resume {
            None => (AlignState::new(plan, &lm, self.bank.len(), self.cfg.seed)?, Vec::new()),
            Some(ck) => {
                if ck.kind != CheckpointKind::Align {
                    return Err(HarnessError::Checkpoint("resume needs an alignment checkpoint".into()));
                }
                if ck.config.hash() != self.cfg.hash() {
                    return Err(HarnessError::Config(
                        "resume checkpoint was written under a different config hash".into(),
                    ));
                }
                let cache = ck
                    .cache
                    .ok_or_else(|| HarnessError::Checkpoint("alignment checkpoint lacks a cache".into()))?;
                let st = AlignState {
                    plan,
                    store: ck.params,
                    cache,
                    completed: ck.rng.stages_completed,
                };
                (st, ck.metrics)
            }
        };
        let ctx = AlignContext {
            cfg: &self.cfg.align,
            optim: &self.cfg.optim,
            lm: &lm,
            data: &self.data,
            bank: &self.bank,
            seed: self.cfg.seed,
            run_id: &run_id,
        };
        for stage in st.completed..st.plan.len() {
            let report = st.run_stage(&ctx, stage)?;
            metrics.extend(report.records);
            on_stage(&self.align_checkpoint(&st, &metrics))?;
        }
        Ok(self.align_checkpoint(&st, &metrics))
    }

    /// Instruction tuning from a complete alignment checkpoint, followed
    /// by the final evaluation.
    pub fn train(&self, align: &Checkpoint) -> Result<(Checkpoint, EvalReport), HarnessError> {
        if align.kind != CheckpointKind::Align {
            return Err(HarnessError::Checkpoint("training needs an alignment checkpoint".into()));
        }
        if align.config.align_hash() != self.cfg.align_hash() {
            return Err(HarnessError::Config(
                "alignment checkpoint was produced under different seed, data, model, alignment or optimizer settings"
                    .into(),
            ));
        }
        let plan = self.plan()?;
        if align.rng.stages_completed != plan.len() {
            return Err(HarnessError::Checkpoint(format!(
                "alignment checkpoint has {} of {} stages",
                align.rng.stages_completed,
                plan.len()
            )));
        }
        let model = self.model();
        let mut store = align.params.clone();
        model.extend_store(&mut store, self.cfg.seed)?;
        let run_id = self.run_id();
        let ctx = TrainContext {
            cfg: &self.cfg.train,
            optim: &self.cfg.optim,
            moco: &self.cfg.moco,
            model: &model,
            data: &self.data,
            bank: &self.bank,
            seed: self.cfg.seed,
            run_id: &run_id,
        };
        let out = train(&mut store, &ctx)?;
        let report = self.evaluate(&store, &Task::ALL)?;
        let mut metrics = out.records;
        metrics.extend(report_records(&report, &run_id, self.cfg.seed));
        let ck = Checkpoint {
            kind: CheckpointKind::Train,
            config: self.cfg.clone(),
            rng: RngState {
                master_seed: self.cfg.seed,
                stages_completed: align.rng.stages_completed,
                train_steps_completed: self.cfg.train.steps,
            },
            params: store,
            cache: align.cache.clone(),
            metrics,
        };
        Ok((ck, report))
    }

    /// Scores `store` on the first `eval.images` scenes of the eval split.
    pub fn evaluate(&self, store: &ParamStore, tasks: &[Task]) -> Result<EvalReport, HarnessError> {
        let n = self.cfg.eval.images.min(self.data.eval.len());
        let ids: Vec<usize> = (0..n).collect();
        Ok(evaluate(store, &self.model(), &self.data, &self.bank, Split::Eval, &ids, tasks)?)
    }

    /// A model with freshly initialized weights and no training.
    pub fn untrained_store(&self) -> Result<ParamStore, HarnessError> {
        let st = AlignState::new(self.plan()?, &self.lm(), self.bank.len(), self.cfg.seed)?;
        let mut store = st.store;
        self.model().extend_store(&mut store, self.cfg.seed)?;
        Ok(store)
    }
}

/// One eval-phase metric record per task.
pub fn report_records(report: &EvalReport, run_id: &str, seed: u64) -> Vec<MetricsRecord> {
    report
        .tasks
        .iter()
        .map(|s| {
            let mut r = MetricsRecord::new(run_id, Phase::Eval, "final", 1, seed);
            r.stage = format!("final.{}", s.task);
            r.task = Some(s.task.clone());
            r.set("accuracy", s.accuracy);
            r.set("token_accuracy", s.token_accuracy);
            for k in ExpertKind::ALL {
                r.set(&format!("gate_{}", k.short()), s.gate_means[k.index()]);
            }
            r
        })
        .collect()
}

/// Every metric name present in `records`, sorted.
pub fn metric_columns(records: &[MetricsRecord]) -> Vec<String> {
    records
        .iter()
        .flat_map(|r| r.values.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Writes `records` as CSV with one column per metric they carry.
pub fn write_metrics(path: &Path, records: &[MetricsRecord], config_hash: &str) -> Result<(), HarnessError> {
    let cols = metric_columns(records);
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_csv(std::io::BufWriter::new(f), records, &cols, config_hash)?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)
        .map_err(|e| HarnessError::io(path, std::io::Error::other(e)))?;
    f.write_all(b"\n").map_err(|e| HarnessError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

pub const DATASET_FILE: &str = "dataset.jsonl";

/// Writes the dataset described by the config; returns its path.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, HarnessError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let ds = Dataset::generate(cfg.seed, &cfg.data)?;
    let path = out.join(DATASET_FILE);
    ds.save(&path)?;
    println!(
        "wrote {}: {} train / {} eval scenes, vocab {}",
        path.display(),
        ds.train.len(),
        ds.eval.len(),
        crate::data::Vocab::get().len()
    );
    Ok(path)
}

fn load_data(path: Option<&Path>) -> Result<Option<Dataset>, HarnessError> {
    path.map(|p| Dataset::load(p).map_err(HarnessError::from)).transpose()
}

pub fn align_checkpoint_path(out: &Path, stage: usize) -> PathBuf {
    out.join(format!("align_stage{stage}.ckpt"))
}

#[derive(Serialize)]
struct RunSummary<'a> {
    run_id: String,
    config_hash: String,
    seed: u64,
    wall_clock_seconds: f64,
    stages: Vec<String>,
    report: Option<&'a EvalReport>,
}

/// Alignment command. With `resume`, continues from the latest stage
/// checkpoint in `out`.
pub fn cmd_align(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    out: &Path,
    resume: bool,
) -> Result<Checkpoint, HarnessError> {
    let start = Instant::now();
    let ws = Workspace::new(cfg.clone(), load_data(data)?)?;
    ensure_dir(out)?;
    let plan = ws.plan()?;
    let previous = if resume {
        (1..=plan.len())
            .rev()
            .map(|s| align_checkpoint_path(out, s))
            .find(|p| p.exists())
            .map(|p| Checkpoint::load(&p))
            .transpose()?
    } else {
        None
    };
    let ck = ws.align(previous, |ck| ck.save(&align_checkpoint_path(out, ck.rng.stages_completed)))?;
    ck.save(&out.join("align.ckpt"))?;
    write_metrics(&out.join("align_metrics.csv"), &ck.metrics, &cfg.hash())?;
    let summary = RunSummary {
        run_id: ws.run_id(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        stages: (0..plan.len()).map(|s| plan.label(s)).collect(),
        report: None,
    };
    write_json(&out.join("align_summary.json"), &summary)?;
    println!("alignment {} complete: {}", plan.describe(), out.display());
    Ok(ck)
}

/// Training command: needs a finished alignment checkpoint.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    align: &Path,
    out: &Path,
) -> Result<(Checkpoint, EvalReport), HarnessError> {
    let start = Instant::now();
    if !align.exists() {
        return Err(HarnessError::Checkpoint(format!("alignment checkpoint {} not found", align.display())));
    }
    let align_ck = Checkpoint::load(align)?;
    let ws = Workspace::new(cfg.clone(), load_data(data)?)?;
    ensure_dir(out)?;
    let (ck, report) = ws.train(&align_ck)?;
    ck.save(&out.join("train.ckpt"))?;
    write_metrics(&out.join("train_metrics.csv"), &ck.metrics, &cfg.hash())?;
    let summary = RunSummary {
        run_id: ws.run_id(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        stages: vec!["main".into()],
        report: Some(&report),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    println!("training complete: mixed score {:.4}", report.mixed_score());
    Ok((ck, report))
}

pub fn parse_tasks(list: &str) -> Result<Vec<Task>, HarnessError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Task::parse(s).ok_or_else(|| HarnessError::Config(format!("unknown task {s:?}"))))
        .collect()
}

/// Evaluation command. The checkpoint's own config decides the model and
/// data; the report goes to `out/eval_report.json`.
pub fn cmd_eval(
    checkpoint: &Path,
    data: Option<&Path>,
    tasks: &[Task],
    out: &Path,
) -> Result<EvalReport, HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.kind != CheckpointKind::Train {
        return Err(HarnessError::Checkpoint("evaluation needs a training checkpoint".into()));
    }
    let ws = Workspace::new(ck.config.clone(), load_data(data)?)?;
    let report = ws.evaluate(&ck.params, tasks)?;
    ensure_dir(out)?;
    write_json(&out.join("eval_report.json"), &report)?;
    for s in &report.tasks {
        println!(
            "{:<9} accuracy {:.4}  token accuracy {:.4}  gates {:?}",
            s.task, s.accuracy, s.token_accuracy, s.gate_means
        );
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Topk,
    ResidualContrast,
    StageOrder,
}

impl std::str::FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "topk" => Ok(Axis::Topk),
            "residual_contrast" => Ok(Axis::ResidualContrast),
            "stage_order" => Ok(Axis::StageOrder),
            _ => Err(HarnessError::Config(format!(
                "unknown axis {s:?} (topk|residual_contrast|stage_order)"
            ))),
        }
    }
}

impl Axis {
    /// The table rows of the axis as (label, config).
    pub fn variants(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Axis::Topk => {
                let mut rows: Vec<_> = (1..=4)
                    .map(|k| {
                        (
                            format!("top-{k}"),
                            with(&|c| {
                                c.moe.router_mode = RouterMode::Topk;
                                c.moe.top_k = k;
                            }),
                        )
                    })
                    .collect();
                rows.push(("average".into(), with(&|c| c.moe.router_mode = RouterMode::Average)));
                rows
            }
            Axis::ResidualContrast => vec![
                ("full".into(), base.clone()),
                ("w/o residual".into(), with(&|c| c.align.residual = false)),
                ("w/o contrast".into(), with(&|c| c.train.contrast = false)),
            ],
            Axis::StageOrder => vec![
                ("cap->all".into(), with(&|c| c.align.order = "cap,all".into())),
                ("seg->det->cls->cap".into(), with(&|c| c.align.order = "seg,det,cls,cap".into())),
                ("cap->cls->det->seg".into(), with(&|c| c.align.order = "cap,cls,det,seg".into())),
            ],
        }
    }
}

/// Result of one (config, seed) pipeline run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config_hash: String,
    pub report: EvalReport,
    pub metrics: Vec<MetricsRecord>,
    /// Stage-1 eval loss and score after the full alignment.
    pub stage1_eval: (f64, f64),
}

/// Memo of alignment checkpoints and finished runs, so that grid cells
/// sharing a prefix of the pipeline reuse it.
#[derive(Default)]
pub struct RunCache {
    aligns: HashMap<String, Arc<Checkpoint>>,
    runs: HashMap<String, Arc<RunOutcome>>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alignment(&mut self, ws: &Workspace) -> Result<Arc<Checkpoint>, HarnessError> {
        let key = ws.cfg.align_hash();
        if let Some(ck) = self.aligns.get(&key) {
            return Ok(Arc::clone(ck));
        }
        let ck = Arc::new(ws.align(None, |_| Ok(()))?);
        self.aligns.insert(key, Arc::clone(&ck));
        Ok(ck)
    }

    /// Full gen-data, align, train and eval pipeline for `cfg`.
    pub fn run(&mut self, cfg: &ExperimentConfig) -> Result<Arc<RunOutcome>, HarnessError> {
        let key = cfg.hash();
        if let Some(r) = self.runs.get(&key) {
            return Ok(Arc::clone(r));
        }
        let ws = Workspace::new(cfg.clone(), None)?;
        let align = self.alignment(&ws)?;
        let stage1_eval = stage_one_eval(&ws, &align)?;
        let (ck, report) = ws.train(&align)?;
        let out = Arc::new(RunOutcome {
            config_hash: key.clone(),
            report,
            metrics: ck.metrics,
            stage1_eval,
        });
        self.runs.insert(key, Arc::clone(&out));
        Ok(out)
    }
}

/// Stage-1 eval loss and token accuracy of an alignment checkpoint,
/// measured on the alignment eval subset.
pub fn stage_one_eval(ws: &Workspace, align: &Checkpoint) -> Result<(f64, f64), HarnessError> {
    let lm = ws.lm();
    let run_id = ws.run_id();
    let ctx = AlignContext {
        cfg: &ws.cfg.align,
        optim: &ws.cfg.optim,
        lm: &lm,
        data: &ws.data,
        bank: &ws.bank,
        seed: ws.cfg.seed,
        run_id: &run_id,
    };
    let st = AlignState {
        plan: ws.plan()?,
        store: align.params.clone(),
        cache: align
            .cache
            .clone()
            .ok_or_else(|| HarnessError::Checkpoint("alignment checkpoint lacks a cache".into()))?,
        completed: align.rng.stages_completed,
    };
    let ids = AlignState::eval_images(&ctx, ws.cfg.eval.images);
    Ok(st.evaluate(&ctx, 0, &ids)?)
}

/// One row of an ablation table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub mixed: Vec<f64>,
    pub per_task: Vec<(String, Vec<f64>)>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every variant of `axis` for every seed.
pub fn ablate(
    base: &ExperimentConfig,
    axis: Axis,
    seeds: &[u64],
    cache: &mut RunCache,
) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for (label, cfg) in axis.variants(base) {
        let mut row = AblationRow {
            variant: label,
            seeds: seeds.to_vec(),
            mixed: Vec::new(),
            per_task: Task::ALL.iter().map(|t| (t.name().to_string(), Vec::new())).collect(),
        };
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let out = cache.run(&c)?;
            row.mixed.push(out.report.mixed_score());
            for (name, vals) in row.per_task.iter_mut() {
                let acc = out.report.tasks.iter().find(|s| &s.task == name).map_or(f64::NAN, |s| s.accuracy);
                vals.push(acc);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Mean ± sample standard deviation per cell.
pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["variant".to_string(), "seeds".into(), "mixed".into()];
    if let Some(r) = rows.first() {
        header.extend(r.per_task.iter().map(|(n, _)| n.clone()));
    }
    out.write_record(&header).map_err(MetricsError::from)?;
    let cell = |xs: &[f64]| {
        let (m, s) = mean_std(xs);
        format!("{m:.4} ± {s:.4}")
    };
    for r in rows {
        let mut rec = vec![r.variant.clone(), r.seeds.len().to_string(), cell(&r.mixed)];
        rec.extend(r.per_task.iter().map(|(_, v)| cell(v)));
        out.write_record(&rec).map_err(MetricsError::from)?;
    }
    out.flush().map_err(MetricsError::from)?;
    Ok(())
}

/// Per-seed raw scores of an ablation.
pub fn write_ablation_runs_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["variant".to_string(), "seed".into(), "mixed".into()];
    if let Some(r) = rows.first() {
        header.extend(r.per_task.iter().map(|(n, _)| n.clone()));
    }
    out.write_record(&header).map_err(MetricsError::from)?;
    for r in rows {
        for (i, seed) in r.seeds.iter().enumerate() {
            let mut rec = vec![r.variant.clone(), seed.to_string(), r.mixed[i].to_string()];
            rec.extend(r.per_task.iter().map(|(_, v)| v[i].to_string()));
            out.write_record(&rec).map_err(MetricsError::from)?;
        }
    }
    out.flush().map_err(MetricsError::from)?;
    Ok(())
}

/// Ablation command: writes `ablate_<axis>.csv` (mean ± stdev) and
/// `ablate_<axis>_runs.csv` (per seed) to `out`.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    axis: Axis,
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<AblationRow>, HarnessError> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(HarnessError::Config("at least one seed is required".into()));
    }
    ensure_dir(out)?;
    let mut cache = RunCache::new();
    let rows = ablate(cfg, axis, seeds, &mut cache)?;
    let name = serde_json::to_value(axis).expect("axis serializes");
    let name = name.as_str().expect("axis is a string");
    let path = out.join(format!("ablate_{name}.csv"));
    let f = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    write_ablation_csv(f, &rows)?;
    let path = out.join(format!("ablate_{name}_runs.csv"));
    let f = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    write_ablation_runs_csv(f, &rows)?;
    let mut table = Vec::new();
    write_ablation_csv(&mut table, &rows)?;
    print!("{}", String::from_utf8_lossy(&table));
    Ok(rows)
}
