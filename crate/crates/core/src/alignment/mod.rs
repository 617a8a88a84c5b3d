//! Progressive coarse-to-fine pre-alignment: one stage per expert group,
//! each training its projector and the shared decoder, then freezing the
//! projector and recording per-image embeddings in a feature cache that
//! later stages attend to through stochastically gated residual attention.

mod cache;
mod residual;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::{task_text, Dataset, Split, TokenId, Vocab, BOS, SEP};
use crate::experts::{ExpertKind, FeatureBank, Projector};
use crate::metrics::{MetricsRecord, Phase};
use crate::moe::{teacher_batch, DecoderLm, TextExample};
use crate::optim_config::OptimConfig;
use crate::params::{Binding, ParamError, ParamStore};
use crate::seeds::derive_seed;

pub use cache::{expected_query, gated_query, FeatureCache};
pub use residual::ResidualAttention;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlignError {
    #[error("cache entry ({expert}, {image}) is not populated")]
    Unpopulated { expert: usize, image: usize },
    #[error("cache index ({expert}, {image}) out of range")]
    CacheIndex { expert: usize, image: usize },
    #[error("cache row {expert} is sealed")]
    CacheSealed { expert: usize },
    #[error("cache row {expert} is not owned by the active stage")]
    CacheInactive { expert: usize },
    #[error("width {found}, expected {expected}")]
    Width { expected: usize, found: usize },
    #[error("stage {requested} requested but {completed} stages are complete")]
    OutOfOrder { requested: usize, completed: usize },
    #[error("stage plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Comma-separated stages; `+` groups experts into one stage and `all`
    /// stands for every expert not yet named.
    pub order: String,
    /// Step budget of each position in the order; a stage holding several
    /// experts receives the sum of their positions.
    pub stage_budgets: Vec<usize>,
    pub gate_probability: f64,
    pub gamma: f64,
    pub residual: bool,
    pub lm_trainable: bool,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_images: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            order: "cap,cls,det,seg".into(),
            stage_budgets: vec![2000, 500, 200, 200],
            gate_probability: 0.5,
            gamma: 0.1,
            residual: true,
            lm_trainable: true,
            batch_size: 16,
            eval_every: 100,
            eval_images: 64,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gate_probability) {
            return Err(format!("gate_probability {} outside [0,1]", self.gate_probability));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(format!("gamma {} must be nonnegative", self.gamma));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_images == 0 {
            return Err("batch_size, eval_every and eval_images must be positive".into());
        }
        StagePlan::parse(&self.order, &self.stage_budgets).map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Gate probability in effect: zero when the residual path is disabled.
    pub fn effective_gate_probability(&self) -> f64 {
        if self.residual {
            self.gate_probability
        } else {
            0.0
        }
    }
}

/// Ordered stages of expert groups with their step budgets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Vec<ExpertKind>>,
    pub budgets: Vec<usize>,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::parse("cap,cls,det,seg", &[2000, 500, 200, 200]).expect("default plan")
    }
}

impl StagePlan {
    pub fn parse(order: &str, position_budgets: &[usize]) -> Result<Self, AlignError> {
        let bad = |m: String| AlignError::Plan(m);
        if position_budgets.len() != ExpertKind::ALL.len() {
            return Err(bad(format!(
                "need {} stage budgets, got {}",
                ExpertKind::ALL.len(),
                position_budgets.len()
            )));
        }
        let parts: Vec<&str> = order.split(',').map(str::trim).collect();
        let mut seen: Vec<ExpertKind> = Vec::new();
        let mut stages = Vec::new();
        for (n, part) in parts.iter().enumerate() {
            let group: Vec<ExpertKind> = if part.eq_ignore_ascii_case("all") {
                if n + 1 != parts.len() {
                    return Err(bad("`all` must be the last stage".into()));
                }
                ExpertKind::ALL
                    .into_iter()
                    .filter(|k| !seen.contains(k))
                    .collect()
            } else {
                part.split('+')
                    .map(|s| ExpertKind::parse(s).ok_or_else(|| bad(format!("unknown stage {s:?}"))))
                    .collect::<Result<_, _>>()?
            };
            if group.is_empty() {
                return Err(bad(format!("stage {part:?} names no new expert")));
            }
            for k in &group {
                if seen.contains(k) {
                    return Err(bad(format!("expert {k} appears twice")));
                }
                seen.push(*k);
            }
            stages.push(group);
        }
        if seen.len() != ExpertKind::ALL.len() {
            return Err(bad(format!("order {order:?} does not cover every expert")));
        }
        let mut budgets = Vec::new();
        let mut pos = 0;
        for g in &stages {
            budgets.push(position_budgets[pos..pos + g.len()].iter().sum());
            pos += g.len();
        }
        if budgets.iter().any(|&b| b == 0) {
            return Err(bad("stage budgets must be positive".into()));
        }
        Ok(Self { stages, budgets })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn label(&self, stage: usize) -> String {
        self.stages[stage]
            .iter()
            .map(|k| k.short())
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Human-readable order, e.g. `cap>cls>det>seg`.
    pub fn describe(&self) -> String {
        (0..self.len()).map(|s| self.label(s)).collect::<Vec<_>>().join(">")
    }

    /// Experts of all stages up to and including `stage`, in plan order.
    pub fn experts_through(&self, stage: usize) -> Vec<ExpertKind> {
        self.stages[..=stage].iter().flatten().copied().collect()
    }

    /// Experts trained before `stage`.
    pub fn prior(&self, stage: usize) -> Vec<ExpertKind> {
        self.stages[..stage].iter().flatten().copied().collect()
    }

    pub fn stage_of(&self, kind: ExpertKind) -> usize {
        self.stages
            .iter()
            .position(|g| g.contains(&kind))
            .expect("plan covers every expert")
    }

    /// Longest sequence (visual rows plus text inputs) any stage can feed
    /// the LM.
    pub fn max_rows(&self, grid_size: usize, max_objects: usize) -> usize {
        (0..self.len())
            .map(|s| {
                let visual: usize = self.stages[s].iter().map(|k| k.tokens(grid_size)).sum();
                let through = self.experts_through(s);
                let target: usize = through
                    .iter()
                    .map(|k| crate::data::task_text_bound(k.index(), max_objects))
                    .sum::<usize>()
                    + through.len()
                    - 1;
                visual + 2 * through.len() + target
            })
            .max()
            .unwrap_or(0)
    }

    pub fn residual(&self, stage: usize, dim: usize) -> ResidualAttention {
        ResidualAttention::new(&self.label(stage), dim)
    }
}

/// Independent Bernoulli(`prob`) residual gates, one per prior expert.
pub fn sample_gates(rng: &mut ChaCha8Rng, n: usize, prob: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(prob)).collect()
}

/// `[BOS, w_1, SEP, w_2, …]` over the instruction words of every expert up
/// to and including `stage` (0-based).
pub fn build_instruction(plan: &StagePlan, stage: usize) -> Vec<TokenId> {
    let v = Vocab::get();
    let mut out = vec![BOS];
    for (n, k) in plan.experts_through(stage).into_iter().enumerate() {
        if n > 0 {
            out.push(SEP);
        }
        out.push(v.word(k.instruction()));
    }
    out
}

/// Target text of `stage`: the labels of every expert so far, SEP-joined.
pub fn build_target(plan: &StagePlan, stage: usize, sample: &crate::data::Sample) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (n, k) in plan.experts_through(stage).into_iter().enumerate() {
        if n > 0 {
            out.push(SEP);
        }
        out.extend(task_text(k.index(), sample));
    }
    out
}

/// Everything a stage needs besides the mutable state.
pub struct AlignContext<'a> {
    pub cfg: &'a AlignConfig,
    pub optim: &'a OptimConfig,
    pub lm: &'a DecoderLm,
    pub data: &'a Dataset,
    pub bank: &'a FeatureBank,
    pub seed: u64,
    pub run_id: &'a str,
}

impl AlignContext<'_> {
    /// The scene behind a global image id.
    pub fn sample(&self, image: usize) -> &crate::data::Sample {
        if image < self.bank.train_len {
            &self.data.train[image]
        } else {
            &self.data.eval[image - self.bank.train_len]
        }
    }

    fn d(&self) -> usize {
        self.lm.cfg.d_model
    }
}

/// Parameters, cache and progress of an alignment run.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignState {
    pub plan: StagePlan,
    pub store: ParamStore,
    pub cache: FeatureCache,
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub label: String,
    pub records: Vec<MetricsRecord>,
    pub final_eval_loss: f64,
    pub final_eval_score: f64,
}

/// How the residual gates are set for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// Independent Bernoulli draws per (image, prior expert).
    Sample(f64),
    /// All open with weight `γ·p`.
    Expected(f64),
}

impl AlignState {
    pub fn new(plan: StagePlan, lm: &DecoderLm, images: usize, seed: u64) -> Result<Self, AlignError> {
        let d = lm.cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init.align"));
        let mut store = ParamStore::new();
        lm.register(&mut store, &mut rng)?;
        for k in ExpertKind::ALL {
            Projector::new(k, d).register(&mut store, &mut rng)?;
        }
        for s in 0..plan.len() {
            plan.residual(s, d).register(&mut store, &mut rng)?;
        }
        Ok(Self {
            cache: FeatureCache::new(ExpertKind::ALL.len(), images, d),
            plan,
            store,
            completed: 0,
        })
    }

    /// Parameter sets owned by `stage`: its projectors and its residual
    /// attention.
    pub fn stage_sets(&self, stage: usize) -> Vec<String> {
        let mut sets: Vec<String> = self.plan.stages[stage]
            .iter()
            .map(|&k| Projector::prefix(k))
            .collect();
        sets.push(self.plan.residual(stage, 0).prefix);
        sets
    }

    /// Visual rows of `stage` for the given images, with the residual
    /// attention output added to every token. Returns the rows and the
    /// per-image row types.
    pub fn stage_visual(
        &self,
        t: &mut Tape,
        p: &Binding,
        ctx: &AlignContext,
        stage: usize,
        images: &[usize],
        gates: GateMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Vec<u8>>), AlignError> {
        let d = ctx.d();
        let g = ctx.bank.grid_size;
        let kinds = &self.plan.stages[stage];
        let nb = images.len();
        let mut parts = Vec::new();
        let mut per = Vec::new();
        for &k in kinds {
            let x = t.constant(ctx.bank.stacked(images, k));
            parts.push(Projector::new(k, d).forward(t, p, x)?);
            per.push(k.tokens(g));
        }
        let tokens: usize = per.iter().sum();
        let feats = if parts.len() == 1 {
            parts[0]
        } else {
            let all = t.concat_rows(&parts)?;
            let mut order = Vec::with_capacity(nb * tokens);
            let mut offset = 0;
            let offsets: Vec<usize> = per
                .iter()
                .map(|&n| {
                    let o = offset;
                    offset += n * nb;
                    o
                })
                .collect();
            for b in 0..nb {
                for (i, &n) in per.iter().enumerate() {
                    order.extend(offsets[i] + b * n..offsets[i] + (b + 1) * n);
                }
            }
            t.gather_rows(all, &order)?
        };
        let prior: Vec<usize> = self.plan.prior(stage).iter().map(|k| k.index()).collect();
        let mut q = Vec::with_capacity(nb * d);
        for &img in images {
            let row = match gates {
                GateMode::Sample(prob) => {
                    let open = sample_gates(rng, prior.len(), prob);
                    gated_query(&self.cache, &prior, img, &open, ctx.cfg.gamma)?
                }
                GateMode::Expected(prob) => {
                    expected_query(&self.cache, &prior, img, ctx.cfg.gamma, prob)?
                }
            };
            q.extend(row);
        }
        let qin = t.constant(Tensor::matrix(nb, d, q));
        let (_, out) = self.plan.residual(stage, d).attend(t, p, qin, feats, tokens)?;
        let rep: Vec<usize> = (0..nb).flat_map(|b| std::iter::repeat(b).take(tokens)).collect();
        let spread = t.gather_rows(out, &rep)?;
        let visual = t.add(feats, spread)?;
        let ty: Vec<u8> = kinds
            .iter()
            .zip(&per)
            .flat_map(|(k, &n)| std::iter::repeat(k.index() as u8 + 1).take(n))
            .collect();
        Ok((visual, vec![ty; nb]))
    }

    fn stage_loss(
        &self,
        t: &mut Tape,
        p: &Binding,
        ctx: &AlignContext,
        stage: usize,
        images: &[usize],
        gates: GateMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var, Vec<usize>), AlignError> {
        let (visual, types) = self.stage_visual(t, p, ctx, stage, images, gates, rng)?;
        let prompt = build_instruction(&self.plan, stage);
        let examples: Vec<TextExample> = images
            .iter()
            .map(|&i| TextExample::new(prompt.clone(), build_target(&self.plan, stage, ctx.sample(i))))
            .collect();
        let (batch, targets) = teacher_batch(Some(visual), types, &examples);
        let logits = ctx.lm.forward(t, p, &batch)?;
        let mask = vec![true; targets.len()];
        let loss = ctx.lm.token_loss(t, logits, &targets, &mask)?;
        Ok((loss, logits, targets))
    }

    /// Teacher-forced mean loss and token accuracy of `stage` on the given
    /// images, gates at their expected value.
    pub fn evaluate(
        &self,
        ctx: &AlignContext,
        stage: usize,
        images: &[usize],
    ) -> Result<(f64, f64), AlignError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prob = ctx.cfg.effective_gate_probability();
        let (mut nll, mut hits, mut count) = (0.0, 0usize, 0usize);
        for chunk in images.chunks(64) {
            let mut t = Tape::new();
            let p = self.store.bind(&mut t);
            let (_, logits, targets) =
                self.stage_loss(&mut t, &p, ctx, stage, chunk, GateMode::Expected(prob), &mut rng)?;
            let lv = t.value(logits);
            for (r, &y) in targets.iter().enumerate() {
                let row = lv.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                nll += lse - row[y];
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
                hits += usize::from(arg == Some(y));
            }
            count += targets.len();
        }
        Ok((nll / count as f64, hits as f64 / count as f64))
    }

    /// Ids of the first `n` evaluation images.
    pub fn eval_images(ctx: &AlignContext, n: usize) -> Vec<usize> {
        let n = n.min(ctx.data.eval.len());
        (0..n).map(|i| ctx.bank.image_id(Split::Eval, i)).collect()
    }

    /// Trains stage `stage` (0-based), then freezes its parameter sets and
    /// fills its experts' cache rows.
    pub fn run_stage(&mut self, ctx: &AlignContext, stage: usize) -> Result<StageReport, AlignError> {
        if stage != self.completed || stage >= self.plan.len() {
            return Err(AlignError::OutOfOrder {
                requested: stage,
                completed: self.completed,
            });
        }
        let label = self.plan.label(stage);
        let budget = self.plan.budgets[stage];
        let sets = self.stage_sets(stage);
        let lm_trainable = ctx.cfg.lm_trainable;
        let select = |name: &str| {
            (lm_trainable && name.starts_with("lm.")) || sets.iter().any(|s| name.starts_with(s.as_str()))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &format!("align.stage{stage}")));
        let sched = ctx.optim.schedule(budget)?;
        let mut opt = ctx.optim.optimizer();
        let prob = ctx.cfg.effective_gate_probability();
        let eval_ids = Self::eval_images(ctx, ctx.cfg.eval_images);
        let train_len = ctx.bank.train_len;
        let mut records = Vec::with_capacity(budget);
        let (mut eval_loss, mut eval_score) = (f64::NAN, f64::NAN);
        for step in 0..budget {
            let images: Vec<usize> = (0..ctx.cfg.batch_size).map(|_| rng.gen_range(0..train_len)).collect();
            let mut t = Tape::new();
            let p = self.store.bind(&mut t);
            let (loss, _, _) = self.stage_loss(&mut t, &p, ctx, stage, &images, GateMode::Sample(prob), &mut rng)?;
            let loss_value = t.value(loss).item();
            if !loss_value.is_finite() {
                return Err(AlignError::Tensor(TensorError::Invalid(format!(
                    "non-finite loss at stage {label} step {step}"
                ))));
            }
            let grads = t.backward(loss)?;
            let lr = sched.lr_at(step)?;
            self.store.apply_selected(&mut opt, &p, &grads, lr, select)?;
            let mut rec = MetricsRecord::new(ctx.run_id, Phase::Align, &label, step + 1, ctx.seed);
            rec.set("loss", loss_value);
            if (step + 1) % ctx.cfg.eval_every == 0 || step + 1 == budget {
                let (l, s) = self.evaluate(ctx, stage, &eval_ids)?;
                eval_loss = l;
                eval_score = s;
                rec.task = Some(label.clone());
                rec.set("eval_loss", l);
                rec.set("eval_score", s);
            }
            records.push(rec);
        }
        self.finish_stage(ctx, stage)?;
        Ok(StageReport {
            stage,
            label,
            records,
            final_eval_loss: eval_loss,
            final_eval_score: eval_score,
        })
    }

    /// Freezes the stage's parameters and writes its cache rows for every
    /// image: the mean of each expert's projected tokens.
    fn finish_stage(&mut self, ctx: &AlignContext, stage: usize) -> Result<(), AlignError> {
        for set in self.stage_sets(stage) {
            self.store.set_frozen(&set, true)?;
        }
        let d = ctx.d();
        let g = ctx.bank.grid_size;
        let all: Vec<usize> = (0..ctx.bank.len()).collect();
        for &k in &self.plan.stages[stage] {
            self.cache.activate(k.index())?;
            let n = k.tokens(g);
            for chunk in all.chunks(256) {
                let mut t = Tape::new();
                let p = self.store.bind(&mut t);
                let x = t.constant(ctx.bank.stacked(chunk, k));
                let y = Projector::new(k, d).forward(&mut t, &p, x)?;
                let pooled = crate::moe::block_mean(&mut t, y, n)?;
                let pv = t.value(pooled).clone();
                for (r, &img) in chunk.iter().enumerate() {
                    self.cache.write(k.index(), img, pv.row(r))?;
                }
            }
            self.cache.seal(k.index());
        }
        self.completed += 1;
        Ok(())
    }
}
