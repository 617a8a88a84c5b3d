use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{AlignConfig, StagePlan};
use crate::data::{task_text_bound, DatasetConfig};
use crate::experts::ExpertKind;
use crate::moco::{MocoConfig, MocoVariant};
use crate::moe::{GateVariant, LmConfig, MoeConfig};
use crate::optim_config::OptimConfig;
use crate::training::TrainConfig;

use super::HarnessError;

/// Settings of the final evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Eval-split scenes scored by the final report (capped by the split).
    pub images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { images: 512 }
    }
}

/// Every knob of an experiment. Missing sections take their defaults;
/// unknown keys anywhere are an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub lm: LmConfig,
    pub align: AlignConfig,
    pub optim: OptimConfig,
    pub moe: MoeConfig,
    pub moco: MocoConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DatasetConfig::default(),
            lm: LmConfig::default(),
            align: AlignConfig::default(),
            optim: OptimConfig::default(),
            moe: MoeConfig::default(),
            moco: MocoConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line toggles layered over a loaded config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_residual: bool,
    pub no_contrast: bool,
    pub top_k: Option<usize>,
    pub order: Option<String>,
    pub moco_variant: Option<MocoVariant>,
    pub gate_variant: Option<GateVariant>,
}

fn digest(value: &impl Serialize) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: Self = if is_json {
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.no_residual {
            self.align.residual = false;
        }
        if o.no_contrast {
            self.train.contrast = false;
        }
        if let Some(k) = o.top_k {
            self.moe.top_k = k;
        }
        if let Some(order) = &o.order {
            self.align.order = order.clone();
        }
        if let Some(v) = o.moco_variant {
            self.moco.variant = v;
        }
        if let Some(v) = o.gate_variant {
            self.moe.gate_variant = v;
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let wrap = |section: &str, r: Result<(), String>| {
            r.map_err(|e| HarnessError::Config(format!("[{section}] {e}")))
        };
        wrap("data", self.data.validate().map_err(|e| e.to_string()))?;
        wrap("lm", self.lm.validate())?;
        wrap("align", self.align.validate())?;
        wrap("optim", self.optim.validate())?;
        wrap("moe", self.moe.validate())?;
        wrap("moco", self.moco.validate())?;
        wrap("train", self.train.validate())?;
        if self.eval.images == 0 {
            return Err(HarnessError::Config("[eval] images must be positive".into()));
        }
        if self.train.contrast && self.train.batch_size > self.moco.queue_size {
            return Err(HarnessError::Config(format!(
                "[train] batch_size {} exceeds [moco] queue_size {}",
                self.train.batch_size, self.moco.queue_size
            )));
        }
        let (g, m) = (self.data.grid_size, self.data.max_objects);
        let plan = StagePlan::parse(&self.align.order, &self.align.stage_budgets)
            .map_err(|e| HarnessError::Config(format!("[align] {e}")))?;
        let visual: usize = ExpertKind::ALL.iter().map(|k| k.tokens(g)).sum();
        let train_rows = visual + 2 + task_text_bound(0, m) + 3;
        let context = plan.max_rows(g, m).max(train_rows);
        if context > self.lm.max_context {
            return Err(HarnessError::Config(format!(
                "[lm] max_context {} too small for grid {g} with {m} objects (needs {context})",
                self.lm.max_context
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the whole config.
    pub fn hash(&self) -> String {
        digest(self)
    }

    /// Hash of the sections that determine an alignment run; a training
    /// run may only start from an alignment checkpoint with the same value.
    pub fn align_hash(&self) -> String {
        digest(&(self.seed, &self.data, &self.lm, &self.align, &self.optim))
    }
}
