//! Instruction tuning of the fused model on mixed caption and question
//! tasks, with optional momentum contrast, plus task evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::{make_qa, Dataset, QaKind, Sample, Split, TokenId, Vocab, BOS};
use crate::experts::{ExpertKind, FeatureBank, Projector};
use crate::metrics::{MetricsRecord, Phase};
use crate::moco::{moco_loss, FeatureQueue, MocoConfig, MocoError, MomentumPair};
use crate::moe::{
    block_mean, decode_greedy, fuse, fused_token_stream, teacher_batch, total_loss_var,
    AdapterBank, DecoderLm, GateBatch, MoeConfig, MoeError, Router, RouterMode, TextExample,
    NUM_EXPERTS,
};
use crate::optim_config::OptimConfig;
use crate::params::{Binding, ParamError, ParamStore};
use crate::seeds::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Moco(#[from] MocoError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("{0}")]
    Invalid(String),
}

/// Tasks of the instruction-tuning mix, each answered from the fused
/// visual tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Caption,
    Presence,
    Count,
    Location,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Caption, Task::Presence, Task::Count, Task::Location];

    pub fn name(self) -> &'static str {
        match self {
            Task::Caption => "caption",
            Task::Presence => "presence",
            Task::Count => "count",
            Task::Location => "location",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// The expert whose granularity matches the task.
    pub fn matching_expert(self) -> ExpertKind {
        match self {
            Task::Caption => ExpertKind::Caption,
            Task::Presence => ExpertKind::Classification,
            Task::Location => ExpertKind::Detection,
            Task::Count => ExpertKind::Segmentation,
        }
    }

    fn qa_kind(self) -> Option<QaKind> {
        match self {
            Task::Caption => None,
            Task::Presence => Some(QaKind::Presence),
            Task::Count => Some(QaKind::Count),
            Task::Location => Some(QaKind::Location),
        }
    }
}

/// Prompt and answer for `task` on `sample`; `qa_seed` picks the question.
/// A location question on a scene without a unique shape falls back to a
/// count question.
pub fn task_example(task: Task, sample: &Sample, qa_seed: u64) -> Result<(Task, TextExample), TrainError> {
    let v = Vocab::get();
    let Some(kind) = task.qa_kind() else {
        return Ok((
            task,
            TextExample::new(vec![BOS, v.word("caption")], sample.labels.caption_tokens.clone()),
        ));
    };
    let (task, qa) = match make_qa(&sample.scene, kind, qa_seed) {
        Ok(qa) => (task, qa),
        Err(crate::data::DataError::NoUniqueObject) => {
            (Task::Count, make_qa(&sample.scene, QaKind::Count, qa_seed)?)
        }
        Err(e) => return Err(e.into()),
    };
    let mut prompt = vec![BOS];
    prompt.extend(qa.question_tokens);
    Ok((task, TextExample::new(prompt, qa.answer_tokens)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub contrast: bool,
    pub eval_every: usize,
    pub eval_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            contrast: true,
            eval_every: 500,
            eval_images: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_images == 0 {
            return Err("train steps, batch_size, eval_every and eval_images must be positive".into());
        }
        Ok(())
    }
}

/// Parameter sets making up the contrast encoder `θ_E`.
pub const ENCODER_SETS: [&str; 3] = ["proj.", "adapter.", "router."];

/// The fused model: projectors, router, adapters and decoder.
#[derive(Clone, Debug)]
pub struct MoeModel {
    pub lm: DecoderLm,
    pub moe: MoeConfig,
    pub grid_size: usize,
}

/// Places `x` (`[B × d]`) in column block `block` of a `[B × blocks·d]`
/// matrix of zeros.
fn place_block(t: &mut Tape, x: Var, block: usize, blocks: usize, d: usize) -> Result<Var, TensorError> {
    let mut e = Tensor::zeros(&[d, blocks * d]);
    for j in 0..d {
        e.data_mut()[j * blocks * d + block * d + j] = 1.0;
    }
    let e = t.constant(e);
    t.matmul(x, e)
}

/// Everything produced on the tape for one batch's visual side.
pub struct VisualPass {
    pub visual: Var,
    pub types: Vec<Vec<u8>>,
    pub gate: GateBatch,
    pub pooled: [Option<Var>; NUM_EXPERTS],
}

impl MoeModel {
    pub fn d(&self) -> usize {
        self.lm.cfg.d_model
    }

    /// Router input: the pooled features of every expert side by side,
    /// followed by the mean prompt embedding when prompt routing is on.
    pub fn router_width(&self) -> usize {
        self.d() * (NUM_EXPERTS + usize::from(self.moe.router_prompt))
    }

    /// Adds router and adapter parameters to an aligned store and makes
    /// projectors and decoder trainable.
    pub fn extend_store(&self, store: &mut ParamStore, seed: u64) -> Result<(), TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init.moe"));
        if !store.contains("router.w") {
            Router::register(store, self.router_width(), &mut rng)?;
            AdapterBank::register(store, self.d(), self.moe.adapter_hidden, &mut rng)?;
        }
        store.set_frozen("proj.", false)?;
        store.set_frozen("lm.", false)?;
        Ok(())
    }

    /// Visual tokens for a batch: projected expert tokens, routed and
    /// fused. `prompts` condition the router when enabled.
    pub fn visual(
        &self,
        t: &mut Tape,
        p: &Binding,
        bank: &FeatureBank,
        images: &[usize],
        prompts: &[Vec<TokenId>],
        dense: bool,
    ) -> Result<VisualPass, TrainError> {
        let d = self.d();
        let nb = images.len();
        let mut tokens: [Option<Var>; NUM_EXPERTS] = [None; NUM_EXPERTS];
        let mut pooled: [Option<Var>; NUM_EXPERTS] = [None; NUM_EXPERTS];
        let mut per = [0usize; NUM_EXPERTS];
        for k in ExpertKind::ALL {
            let x = t.constant(bank.stacked(images, k));
            let y = Projector::new(k, d).forward(t, p, x)?;
            per[k.index()] = k.tokens(self.grid_size);
            pooled[k.index()] = Some(block_mean(t, y, per[k.index()])?);
            tokens[k.index()] = Some(y);
        }
        let gate = match self.moe.router_mode {
            RouterMode::Average => Router::dense(t, nb),
            RouterMode::Topk => {
                let blocks = NUM_EXPERTS + usize::from(self.moe.router_prompt);
                let mut summary = None;
                for (i, v) in pooled.iter().enumerate() {
                    let v = v.expect("all experts pooled");
                    let placed = place_block(t, v, i, blocks, d)?;
                    summary = Some(match summary {
                        None => placed,
                        Some(s) => t.add(s, placed)?,
                    });
                }
                let mut summary = summary.expect("at least one expert");
                if self.moe.router_prompt {
                    let ids: Vec<usize> = prompts.iter().flatten().map(|&x| x as usize).collect();
                    let emb = t.gather_rows(p.var("lm.tok"), &ids)?;
                    let mut m = Tensor::zeros(&[nb, ids.len()]);
                    let mut c = 0;
                    for (b, pr) in prompts.iter().enumerate() {
                        for _ in 0..pr.len() {
                            m.data_mut()[b * ids.len() + c] = 1.0 / pr.len() as f64;
                            c += 1;
                        }
                    }
                    let m = t.constant(m);
                    let pe = t.matmul(m, emb)?;
                    let placed = place_block(t, pe, NUM_EXPERTS, blocks, d)?;
                    summary = t.add(summary, placed)?;
                }
                let logits = Router::logits(t, p, summary)?;
                let k = if dense { NUM_EXPERTS } else { self.moe.top_k };
                Router::gate(t, logits, k, self.moe.gate_variant)?
            }
        };
        let (visual, types) = fused_token_stream(t, p, &gate, &tokens, &per)?;
        Ok(VisualPass {
            visual,
            types,
            gate,
            pooled,
        })
    }

    /// Unit-norm pooled fused features `[B × D]` (the contrast view).
    pub fn contrast_view(&self, t: &mut Tape, p: &Binding, pass: &VisualPass) -> Result<Var, TrainError> {
        let f = fuse(t, p, &pass.gate, &pass.pooled)?;
        Ok(t.l2_normalize_rows(f))
    }
}

pub struct TrainContext<'a> {
    pub cfg: &'a TrainConfig,
    pub optim: &'a OptimConfig,
    pub moco: &'a MocoConfig,
    pub model: &'a MoeModel,
    pub data: &'a Dataset,
    pub bank: &'a FeatureBank,
    pub seed: u64,
    pub run_id: &'a str,
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
}

fn mu_of(ctx: &TrainContext) -> f64 {
    if ctx.cfg.contrast {
        ctx.moco.mu
    } else {
        0.0
    }
}

/// Runs the instruction-tuning loop on `store` in place.
pub fn train(store: &mut ParamStore, ctx: &TrainContext) -> Result<TrainOutcome, TrainError> {
    let cfg = ctx.cfg;
    let model = ctx.model;
    let mu = mu_of(ctx);
    let contrast = mu > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, "train"));
    let sched = ctx.optim.schedule(cfg.steps)?;
    let mut opt = ctx.optim.optimizer();
    let mut momentum = MomentumPair::new(store, &ENCODER_SETS, ctx.moco.momentum);
    let mut queue = FeatureQueue::new(ctx.moco.queue_size, model.d());
    if contrast && cfg.batch_size > ctx.moco.queue_size {
        return Err(TrainError::Invalid(format!(
            "batch_size {} exceeds queue_size {}",
            cfg.batch_size, ctx.moco.queue_size
        )));
    }
    let train_len = ctx.bank.train_len;
    let eval_ids: Vec<usize> = (0..cfg.eval_images.min(ctx.data.eval.len())).collect();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let images: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..train_len)).collect();
        let mut examples = Vec::with_capacity(images.len());
        for &i in &images {
            let task = Task::ALL[rng.gen_range(0..Task::ALL.len())];
            let (_, ex) = task_example(task, &ctx.data.train[i], rng.gen())?;
            examples.push(ex);
        }
        let prompts: Vec<Vec<TokenId>> = examples.iter().map(|e| e.prompt.clone()).collect();
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let dense = (step as f64) < model.moe.dense_warmup * cfg.steps as f64;
        let pass = model.visual(&mut t, &p, ctx.bank, &images, &prompts, dense)?;
        let (batch, targets) = teacher_batch(Some(pass.visual), pass.types.clone(), &examples);
        let logits = model.lm.forward(&mut t, &p, &batch)?;
        let mask = vec![true; targets.len()];
        let reg = model.lm.token_loss(&mut t, logits, &targets, &mask)?;
        let mut moco_var = None;
        if contrast {
            let q = model.contrast_view(&mut t, &p, &pass)?;
            let keys = key_view(model, &momentum, store, ctx.bank, &images, &prompts, dense)?;
            let ids: Vec<u64> = images.iter().map(|&i| i as u64).collect();
            let qv = t.value(q).clone();
            let slots = queue.enqueue(&qv, &keys, &ids)?;
            if queue.is_full() {
                moco_var = Some(moco_loss(&mut t, &queue, ctx.moco, q, &slots)?);
            }
        }
        let total = total_loss_var(&mut t, reg, moco_var, mu)?;
        let total_value = t.value(total).item();
        if !total_value.is_finite() {
            return Err(TrainError::Invalid(format!("non-finite loss at train step {step}")));
        }
        let grads = t.backward(total)?;
        let lr = sched.lr_at(step)?;
        let router_lr = lr * model.moe.router_lr_scale;
        store.apply_with(&mut opt, &p, &grads, |name| {
            Some(if name.starts_with("router.") { router_lr } else { lr })
        })?;
        if contrast {
            momentum.update(store)?;
        }
        let mut rec = MetricsRecord::new(ctx.run_id, Phase::Train, "main", step + 1, ctx.seed);
        rec.set("reg_loss", t.value(reg).item());
        if let Some(m) = moco_var {
            rec.set("moco_loss", t.value(m).item());
        }
        rec.set("total_loss", total_value);
        let gp = t.value(pass.gate.probs);
        for k in ExpertKind::ALL {
            let mean = (0..gp.rows()).map(|b| gp.at(b, k.index())).sum::<f64>() / gp.rows() as f64;
            rec.set(&format!("gate_{}", k.short()), mean);
        }
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let report = evaluate(store, model, ctx.data, ctx.bank, Split::Eval, &eval_ids, &Task::ALL)?;
            rec.task = Some("mixed".into());
            rec.set("eval_score", report.mixed_score());
        }
        records.push(rec);
    }
    Ok(TrainOutcome { records })
}

/// Key view of a batch under the momentum parameters, computed off-tape.
fn key_view(
    model: &MoeModel,
    momentum: &MomentumPair,
    store: &ParamStore,
    bank: &FeatureBank,
    images: &[usize],
    prompts: &[Vec<TokenId>],
    dense: bool,
) -> Result<Tensor, TrainError> {
    let shadow = momentum.overlay(store);
    let mut t = Tape::new();
    let p = shadow.bind_constant(&mut t);
    let pass = model.visual(&mut t, &p, bank, images, prompts, dense)?;
    let k = model.contrast_view(&mut t, &p, &pass)?;
    Ok(t.value(k).clone())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub samples: usize,
    /// Exact-match accuracy of the greedy answer.
    pub accuracy: f64,
    /// Teacher-forced per-token accuracy.
    pub token_accuracy: f64,
    /// Mean gate probability of each expert, in expert order.
    pub gate_means: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub tasks: Vec<TaskScore>,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskScore> {
        self.tasks.iter().find(|s| s.task == task.name())
    }

    /// Mean exact-match accuracy over the tasks present.
    pub fn mixed_score(&self) -> f64 {
        if self.tasks.is_empty() {
            return 0.0;
        }
        self.tasks.iter().map(|s| s.accuracy).sum::<f64>() / self.tasks.len() as f64
    }

    /// Whether the expert matching each task has the highest mean gate
    /// probability on that task's samples.
    pub fn specialization(&self) -> Vec<(Task, bool)> {
        Task::ALL
            .into_iter()
            .filter_map(|task| {
                let s = self.task(task)?;
                let want = task.matching_expert().index();
                let best = (0..s.gate_means.len())
                    .max_by(|&a, &b| s.gate_means[a].total_cmp(&s.gate_means[b]).then(b.cmp(&a)))?;
                Some((task, best == want))
            })
            .collect()
    }
}

/// Seed of the evaluation question of `task` about sample `index`.
fn eval_qa_seed(sample: &Sample, task: Task) -> u64 {
    sample.qa_seed(1000 + task as u64)
}

const EVAL_CHUNK: usize = 64;

/// Scores the model on task-pure batches drawn from `split`.
pub fn evaluate(
    store: &ParamStore,
    model: &MoeModel,
    data: &Dataset,
    bank: &FeatureBank,
    split: Split,
    indices: &[usize],
    tasks: &[Task],
) -> Result<EvalReport, TrainError> {
    let samples = data.split(split);
    let mut report = EvalReport {
        split: match split {
            Split::Train => "train".into(),
            Split::Eval => "eval".into(),
        },
        tasks: Vec::new(),
    };
    for &task in tasks {
        let mut score = TaskScore {
            task: task.name().into(),
            gate_means: vec![0.0; NUM_EXPERTS],
            ..Default::default()
        };
        let (mut exact, mut tok_hits, mut tok_total) = (0usize, 0usize, 0usize);
        for chunk in indices.chunks(EVAL_CHUNK) {
            let mut examples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (_, ex) = task_example(task, &samples[i], eval_qa_seed(&samples[i], task))?;
                examples.push(ex);
            }
            let images: Vec<usize> = chunk.iter().map(|&i| bank.image_id(split, i)).collect();
            let prompts: Vec<Vec<TokenId>> = examples.iter().map(|e| e.prompt.clone()).collect();
            let mut t = Tape::new();
            let p = store.bind_constant(&mut t);
            let pass = model.visual(&mut t, &p, bank, &images, &prompts, false)?;
            let gp = t.value(pass.gate.probs).clone();
            for b in 0..gp.rows() {
                for (i, g) in score.gate_means.iter_mut().enumerate() {
                    *g += gp.at(b, i);
                }
            }
            let visual = t.value(pass.visual).clone();
            let (batch, targets) = teacher_batch(Some(pass.visual), pass.types.clone(), &examples);
            let logits = model.lm.forward(&mut t, &p, &batch)?;
            let lv = t.value(logits);
            for (r, &y) in targets.iter().enumerate() {
                let row = lv.row(r);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
                tok_hits += usize::from(arg == Some(y));
            }
            tok_total += targets.len();
            let max_len = examples.iter().map(|e| e.target.len()).max().unwrap_or(1) + 2;
            let decoded = decode_greedy(&model.lm, store, Some(&visual), &pass.types, &prompts, max_len)?;
            for (ex, out) in examples.iter().zip(&decoded) {
                exact += usize::from(out[..] == ex.target[..ex.target.len() - 1]);
            }
            score.samples += chunk.len();
        }
        let n = score.samples.max(1) as f64;
        score.accuracy = exact as f64 / n;
        score.token_accuracy = tok_hits as f64 / tok_total.max(1) as f64;
        score.gate_means.iter_mut().for_each(|g| *g /= n);
        report.tasks.push(score);
    }
    Ok(report)
}
