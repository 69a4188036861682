//! Evaluation protocols: prompt sources, per-task training of each prompt
//! design, and the reports they produce.

pub mod ablation;
pub mod analysis;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cgan::{train_cgan, CganConfig, Generator, TrainLog};
use crate::classify::{self, argmax, ClassifierConfig, NoisePolicy, Prediction};
use crate::error::{Error, Result};
use crate::prompt::{
    mix_domain_prompt, train_all_domain_prompt, train_conditional_prompt, train_domain_prompt_label, AdapterConfig,
    AdapterMode, ConditionalAdapter, DomainPromptLabel, PromptContext, StageOneConfig,
};
use crate::rng::{derive_seed, rng_for, shuffle};
use crate::tensor::Tensor;
use crate::world::{generate_benchmark, split_train_val, BenchmarkSpec, DomainSplit, FrozenWorld};

/// The prompt designs that can be trained and compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Manual,
    Mix,
    All,
    ConditionalResidual,
    ConditionalConcat,
    Spg,
}

impl Method {
    pub const DESIGNS: [Method; 6] = [
        Method::Manual,
        Method::Mix,
        Method::All,
        Method::ConditionalResidual,
        Method::ConditionalConcat,
        Method::Spg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Manual => "manual",
            Method::Mix => "mix",
            Method::All => "all",
            Method::ConditionalResidual => "conditional_residual",
            Method::ConditionalConcat => "conditional_concat",
            Method::Spg => "spg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::DESIGNS
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("method", format!("unknown method {s:?}")))
    }
}

/// Where the prompt for an image comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptSource {
    Fixed { prompt: PromptContext },
    Generator { generator: Generator },
    Adapter { adapter: ConditionalAdapter },
}

fn noise(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

const AVERAGED_NOISE_STREAM: u64 = 0xa7e;

impl PromptSource {
    /// Per-sample prompts `[B × L·d]` for images `x`. Averaged noise reports
    /// the mean prompt over its draws.
    pub fn prompts(&self, x: &Tensor, policy: NoisePolicy) -> Result<Tensor> {
        let b = x.dims2().0;
        match self {
            PromptSource::Fixed { prompt } => {
                let row = prompt.flat()?;
                let mut data = Vec::with_capacity(b * row.len());
                (0..b).for_each(|_| data.extend_from_slice(row.data()));
                Tensor::new(vec![b, row.len()], data)
            }
            PromptSource::Adapter { adapter } => adapter.prompts(x),
            PromptSource::Generator { generator } => match policy {
                NoisePolicy::FixedZero => generator.generate_zero_noise(x),
                NoisePolicy::Sampled { seed } => generator.generate(&noise(&mut rng_for(seed, 0), b, generator.z_dim), x),
                NoisePolicy::Averaged { samples } => {
                    let mut rng = rng_for(AVERAGED_NOISE_STREAM, 0);
                    let mut acc: Option<Tensor> = None;
                    for _ in 0..samples {
                        let p = generator.generate(&noise(&mut rng, b, generator.z_dim), x)?;
                        match acc.as_mut() {
                            None => acc = Some(p),
                            Some(a) => a.data_mut().iter_mut().zip(p.data()).for_each(|(s, v)| *s += v),
                        }
                    }
                    let mut a = acc.ok_or_else(|| Error::invalid("noise policy", "averaged needs a sample"))?;
                    a.data_mut().iter_mut().for_each(|v| *v /= samples as f64);
                    Ok(a)
                }
            },
        }
    }

    /// Class probabilities `[B × K]` for images `x`. Averaged noise averages
    /// the probabilities, not the prompts.
    pub fn probabilities(&self, world: &FrozenWorld, x: &Tensor, cfg: &ClassifierConfig) -> Result<Tensor> {
        cfg.validate()?;
        match (self, cfg.noise) {
            (PromptSource::Fixed { prompt }, _) => {
                let l = classify::logits_fixed(world, &prompt.values, x, cfg.temperature)?;
                Ok(classify::softmax_rows(&l))
            }
            (PromptSource::Generator { generator }, NoisePolicy::Averaged { samples }) => {
                let b = x.dims2().0;
                let mut rng = rng_for(AVERAGED_NOISE_STREAM, 0);
                let mut acc = Tensor::zeros(&[b, world.num_classes()]);
                for _ in 0..samples {
                    let p = generator.generate(&noise(&mut rng, b, generator.z_dim), x)?;
                    let l = classify::logits_per_sample(world, &p, x, cfg.temperature)?;
                    let probs = classify::softmax_rows(&l);
                    acc.data_mut().iter_mut().zip(probs.data()).for_each(|(a, v)| *a += v);
                }
                acc.data_mut().iter_mut().for_each(|v| *v /= samples as f64);
                Ok(acc)
            }
            _ => {
                let p = self.prompts(x, cfg.noise)?;
                let l = classify::logits_per_sample(world, &p, x, cfg.temperature)?;
                Ok(classify::softmax_rows(&l))
            }
        }
    }

    /// Accuracy on the given sample rows.
    pub fn accuracy(&self, world: &FrozenWorld, idx: &[usize], cfg: &ClassifierConfig) -> Result<f64> {
        if idx.is_empty() {
            return Err(Error::Empty("evaluation rows"));
        }
        let p = self.probabilities(world, &world.gather(idx), cfg)?;
        Ok(classify::accuracy_from_logits(&p, &world.labels_of(idx)))
    }
}

/// Classify one embedded image with any prompt source.
pub fn classify(
    world: &FrozenWorld,
    source: &PromptSource,
    embedding: &[f64],
    cfg: &ClassifierConfig,
) -> Result<Prediction> {
    let x = Tensor::new(vec![1, embedding.len()], embedding.to_vec())?;
    if embedding.len() != world.dim() {
        return Err(Error::dim("classify", format!("embedding of length {} in d = {}", embedding.len(), world.dim())));
    }
    let probabilities = source.probabilities(world, &x, cfg)?.into_data();
    let prompt = source.prompts(&x, cfg.noise)?.into_data();
    Ok(Prediction {
        class: argmax(&probabilities),
        probabilities,
        prompt,
    })
}

/// Everything needed to train and evaluate the prompt designs on one world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Share of each domain held back for validation.
    pub val_fraction: f64,
    /// Share of each source domain's training rows actually used.
    pub train_fraction: f64,
    pub stage_one: StageOneConfig,
    pub adapter: AdapterConfig,
    pub cgan: CganConfig,
    pub classifier: ClassifierConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            val_fraction: 0.2,
            train_fraction: 1.0,
            stage_one: StageOneConfig::default(),
            adapter: AdapterConfig::default(),
            cgan: CganConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction", format!("{} is not in (0, 1)", self.val_fraction)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::invalid("train_fraction", format!("{} is not in (0, 1]", self.train_fraction)));
        }
        self.stage_one.validate()?;
        self.cgan.validate()?;
        self.classifier.validate()?;
        if self.adapter.epochs == 0 || self.adapter.hidden == 0 || self.adapter.batch_size == 0 {
            return Err(Error::invalid("adapter", "epochs, hidden and batch_size must be positive"));
        }
        if !(self.adapter.lr > 0.0 && self.adapter.lr.is_finite()) {
            return Err(Error::invalid("adapter", format!("lr {}", self.adapter.lr)));
        }
        Ok(())
    }
}

/// One unit of a protocol: train on `sources`, test on each of `targets`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub seed: u64,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Task {
    /// Seed-independent task name, e.g. `held_out=2` or `source=0`.
    pub fn name(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("+");
        if self.sources.len() == 1 && self.targets.len() > 1 {
            format!("source={}", join(&self.sources))
        } else {
            format!("held_out={}", join(&self.targets))
        }
    }

    /// Unique key including the seed, usable as a file stem.
    pub fn key(&self) -> String {
        format!("seed{}_{}", self.seed, self.name().replace('=', "").replace('+', "-"))
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    Ok(())
}

/// Leave-one-domain-out: each domain is held out once per seed.
pub fn lodo_tasks(num_domains: usize, seeds: &[u64]) -> Result<Vec<Task>> {
    check_seeds(seeds)?;
    if num_domains < 2 {
        return Err(Error::invalid("protocol", format!("leave-one-out needs 2 domains, have {num_domains}")));
    }
    Ok(seeds
        .iter()
        .flat_map(|&seed| {
            (0..num_domains).map(move |t| Task {
                seed,
                sources: (0..num_domains).filter(|&d| d != t).collect(),
                targets: vec![t],
            })
        })
        .collect())
}

/// Single source: train on one domain and test on every other.
pub fn single_source_tasks(num_domains: usize, seeds: &[u64]) -> Result<Vec<Task>> {
    check_seeds(seeds)?;
    if num_domains < 2 {
        return Err(Error::invalid("protocol", format!("single source needs 2 domains, have {num_domains}")));
    }
    Ok(seeds
        .iter()
        .flat_map(|&seed| {
            (0..num_domains).map(move |s| Task {
                seed,
                sources: vec![s],
                targets: (0..num_domains).filter(|&d| d != s).collect(),
            })
        })
        .collect())
}

/// How the trained prompt source was picked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// `none`, `val_ce` (lowest validation cross-entropy) or `val_acc`
    /// (highest pooled validation accuracy).
    pub criterion: String,
    pub epoch: Option<usize>,
    pub checkpoint: Option<usize>,
    pub score: Option<f64>,
}

impl SelectionTrace {
    fn none() -> Self {
        SelectionTrace {
            criterion: "none".into(),
            epoch: None,
            checkpoint: None,
            score: None,
        }
    }
}

/// A prompt design trained for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedMethod {
    pub method: Method,
    pub task: Task,
    pub source: PromptSource,
    pub selection: SelectionTrace,
    #[serde(skip)]
    pub log: Option<TrainLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub name: String,
    pub seed: u64,
    /// Seed of the benchmark draw the task ran on.
    pub world_seed: u64,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    /// Mean over `target_accuracies`.
    pub accuracy: f64,
    pub target_accuracies: Vec<f64>,
    /// Zero-shot manual-prompt accuracy on the same targets.
    pub manual_accuracy: f64,
    pub selection: SelectionTrace,
}

/// Per-task aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub name: String,
    pub mean: f64,
    pub std_error: f64,
    pub manual_mean: f64,
}

/// Quantitative stand-ins for the clustering and retrieval figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisMetrics {
    pub task: String,
    pub domain_silhouette: f64,
    pub class_silhouette: f64,
    pub retrieval_top1_same_domain: f64,
    pub retrieval_chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskResult>,
    pub summary: Vec<TaskSummary>,
    /// Arithmetic mean over every entry of `tasks`.
    pub mean: f64,
    /// Standard error of the per-seed means.
    pub std_error: f64,
    pub manual_mean: f64,
    pub metrics: Option<AnalysisMetrics>,
    pub config_hash: Option<String>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean; zero for fewer than two values.
pub fn std_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

impl EvalReport {
    pub fn from_results(protocol: &str, method: Method, tasks: Vec<TaskResult>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Empty("task results"));
        }
        let mut seeds: Vec<u64> = tasks.iter().map(|t| t.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        let mut by_name: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut order: Vec<&str> = Vec::new();
        for t in &tasks {
            by_seed.entry(t.seed).or_default().push(t.accuracy);
            let e = by_name.entry(&t.name).or_insert_with(|| {
                order.push(&t.name);
                (Vec::new(), Vec::new())
            });
            e.0.push(t.accuracy);
            e.1.push(t.manual_accuracy);
        }
        let summary = order
            .iter()
            .map(|n| {
                let (acc, man) = &by_name[n];
                TaskSummary {
                    name: n.to_string(),
                    mean: mean(acc),
                    std_error: std_error(acc),
                    manual_mean: mean(man),
                }
            })
            .collect();
        let seed_means: Vec<f64> = by_seed.values().map(|v| mean(v)).collect();
        let all: Vec<f64> = tasks.iter().map(|t| t.accuracy).collect();
        let man: Vec<f64> = tasks.iter().map(|t| t.manual_accuracy).collect();
        Ok(EvalReport {
            protocol: protocol.into(),
            method,
            seeds,
            summary,
            mean: mean(&all),
            std_error: std_error(&seed_means),
            manual_mean: mean(&man),
            tasks,
            metrics: None,
            config_hash: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Archive(e.to_string()))
    }

    /// Aligned plain-text table, one row per task plus the mean.
    pub fn table(&self) -> String {
        let width = self.summary.iter().map(|s| s.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "protocol: {}   method: {}   seeds: {:?}", self.protocol, self.method, self.seeds);
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "task", "acc", "stderr", "manual");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
                s.name, s.mean, s.std_error, s.manual_mean
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
            "mean", self.mean, self.std_error, self.manual_mean
        );
        if let Some(m) = &self.metrics {
            let _ = writeln!(
                out,
                "analysis ({}): domain silhouette {:.4}, class silhouette {:.4}, same-domain top-1 {:.4} (chance {:.4})",
                m.task, m.domain_silhouette, m.class_silhouette, m.retrieval_top1_same_domain, m.retrieval_chance
            );
        }
        out
    }
}

/// Keep `fraction` of each class's training rows (at least one per class).
/// A fraction of 1 returns the split untouched.
pub fn subsample_train(split: &DomainSplit, world: &FrozenWorld, fraction: f64, seed: u64) -> DomainSplit {
    if fraction >= 1.0 {
        return split.clone();
    }
    let mut rng = rng_for(seed, 0x5ab + split.domain as u64);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &split.train {
        by_class.entry(world.labels[i]).or_default().push(i);
    }
    let mut train = Vec::new();
    for rows in by_class.values_mut() {
        shuffle(&mut rng, rows);
        let keep = ((rows.len() as f64 * fraction).round() as usize).clamp(1, rows.len());
        train.extend_from_slice(&rows[..keep]);
    }
    train.sort_unstable();
    DomainSplit {
        domain: split.domain,
        train,
        val: split.val.clone(),
    }
}

/// Trains and evaluates prompt designs on one world, caching splits and
/// Stage I prompt labels per (seed, domain).
pub struct Session {
    pub world: FrozenWorld,
    pub cfg: PipelineConfig,
    splits: BTreeMap<u64, Vec<DomainSplit>>,
    labels: BTreeMap<(u64, usize), DomainPromptLabel>,
}

impl Session {
    pub fn new(world: FrozenWorld, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Session {
            world,
            cfg,
            splits: BTreeMap::new(),
            labels: BTreeMap::new(),
        })
    }

    /// Train/validation splits for `seed`, after training-row subsampling.
    pub fn splits(&mut self, seed: u64) -> Result<&[DomainSplit]> {
        if !self.splits.contains_key(&seed) {
            let raw = split_train_val(&self.world, self.cfg.val_fraction, seed)?;
            let s = raw
                .iter()
                .map(|s| subsample_train(s, &self.world, self.cfg.train_fraction, seed))
                .collect();
            self.splits.insert(seed, s);
        }
        Ok(&self.splits[&seed])
    }

    fn split(&mut self, seed: u64, domain: usize) -> Result<DomainSplit> {
        self.splits(seed)?
            .iter()
            .find(|s| s.domain == domain)
            .cloned()
            .ok_or(Error::EmptyDomain(domain))
    }

    /// The Stage I prompt label of `domain` under `seed`, trained on demand.
    pub fn label(&mut self, seed: u64, domain: usize) -> Result<&DomainPromptLabel> {
        if !self.labels.contains_key(&(seed, domain)) {
            let split = self.split(seed, domain)?;
            let l = train_domain_prompt_label(&self.world, &split, &self.cfg.stage_one, seed)?;
            self.labels.insert((seed, domain), l);
        }
        Ok(&self.labels[&(seed, domain)])
    }

    /// Seed the cache with a label trained elsewhere (e.g. loaded from disk).
    pub fn insert_label(&mut self, seed: u64, label: DomainPromptLabel) {
        self.labels.insert((seed, label.domain), label);
    }

    pub fn labels_for(&mut self, seed: u64, domains: &[usize]) -> Result<Vec<DomainPromptLabel>> {
        domains.iter().map(|&d| self.label(seed, d).cloned()).collect()
    }

    /// Train `method` on the task's source domains.
    pub fn train(&mut self, method: Method, task: &Task) -> Result<TrainedMethod> {
        self.train_inner(method, task)
            .map_err(|e| e.in_task(format!("{method} {}", task.name()), task.seed))
    }

    fn train_inner(&mut self, method: Method, task: &Task) -> Result<TrainedMethod> {
        let seed = task.seed;
        let sources: Vec<DomainSplit> = task
            .sources
            .iter()
            .map(|&d| self.split(seed, d))
            .collect::<Result<_>>()?;
        let src: Vec<&DomainSplit> = sources.iter().collect();
        let labels = match method {
            Method::Mix | Method::Spg => self.labels_for(seed, &task.sources)?,
            _ => Vec::new(),
        };
        let world = &self.world;
        let val_ce = |epoch: usize, ce: f64| SelectionTrace {
            criterion: "val_ce".into(),
            epoch: Some(epoch),
            checkpoint: None,
            score: Some(ce),
        };
        let (source, selection, log) = match method {
            Method::Manual => (
                PromptSource::Fixed {
                    prompt: world.manual_prompt(),
                },
                SelectionTrace::none(),
                None,
            ),
            Method::Mix => {
                let prompt = mix_domain_prompt(&labels.iter().collect::<Vec<_>>())?;
                (PromptSource::Fixed { prompt }, SelectionTrace::none(), None)
            }
            Method::All => {
                let (prompt, trace) = train_all_domain_prompt(world, &src, &self.cfg.stage_one, seed)?;
                (
                    PromptSource::Fixed { prompt },
                    val_ce(trace.best_epoch, trace.best_val_ce),
                    None,
                )
            }
            Method::ConditionalResidual | Method::ConditionalConcat => {
                let mode = if method == Method::ConditionalResidual {
                    AdapterMode::Residual
                } else {
                    AdapterMode::Concat
                };
                let (adapter, trace) = train_conditional_prompt(world, &src, mode, &self.cfg.adapter, seed)?;
                (
                    PromptSource::Adapter { adapter },
                    val_ce(trace.best_epoch, trace.best_val_ce),
                    None,
                )
            }
            Method::Spg => {
                let out = train_cgan(world, &src, &labels, &self.cfg.cgan, self.cfg.classifier.temperature, seed)?;
                let chosen = &out.checkpoints[out.log.selected_checkpoint];
                let selection = SelectionTrace {
                    criterion: "val_acc".into(),
                    epoch: Some(chosen.epoch),
                    checkpoint: Some(chosen.id),
                    score: Some(chosen.val_acc),
                };
                (
                    PromptSource::Generator {
                        generator: out.generator,
                    },
                    selection,
                    Some(out.log),
                )
            }
        };
        Ok(TrainedMethod {
            method,
            task: task.clone(),
            source,
            selection,
            log,
        })
    }

    /// Accuracy of a trained source on each target domain of its task.
    pub fn evaluate(&self, trained: &TrainedMethod) -> Result<TaskResult> {
        let task = &trained.task;
        let manual = PromptSource::Fixed {
            prompt: self.world.manual_prompt(),
        };
        let mut accs = Vec::with_capacity(task.targets.len());
        let mut man = Vec::with_capacity(task.targets.len());
        for &t in &task.targets {
            let idx = self.world.domain_indices(t);
            accs.push(trained.source.accuracy(&self.world, &idx, &self.cfg.classifier)?);
            man.push(manual.accuracy(&self.world, &idx, &self.cfg.classifier)?);
        }
        Ok(TaskResult {
            name: task.name(),
            seed: task.seed,
            world_seed: self.world.spec.seed,
            sources: task.sources.clone(),
            targets: task.targets.clone(),
            accuracy: mean(&accs),
            target_accuracies: accs,
            manual_accuracy: mean(&man),
            selection: trained.selection.clone(),
        })
    }

    /// Train and evaluate `method` on every task.
    pub fn run_tasks(&mut self, method: Method, tasks: &[Task]) -> Result<Vec<TaskResult>> {
        let mut results = Vec::with_capacity(tasks.len());
        for task in tasks {
            let trained = self.train(method, task)?;
            results.push(self.evaluate(&trained)?);
        }
        Ok(results)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Lodo,
    SingleSource,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Lodo => "lodo",
            Protocol::SingleSource => "single_source",
        }
    }

    pub fn tasks(self, num_domains: usize, seeds: &[u64]) -> Result<Vec<Task>> {
        match self {
            Protocol::Lodo => lodo_tasks(num_domains, seeds),
            Protocol::SingleSource => single_source_tasks(num_domains, seeds),
        }
    }
}

/// Which benchmark instance each seed runs on.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Worlds {
    /// Every seed shares one world; seeds only change splits and training.
    Fixed(FrozenWorld),
    /// Seed `s` runs on a fresh draw of the benchmark with seed `spec.seed + s`,
    /// so seed means average over benchmark instances as well.
    Replicated(BenchmarkSpec),
}

impl Worlds {
    pub fn spec(&self) -> &BenchmarkSpec {
        match self {
            Worlds::Fixed(w) => &w.spec,
            Worlds::Replicated(s) => s,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.spec().num_domains
    }

    pub fn world_seed(&self, seed: u64) -> u64 {
        match self {
            Worlds::Fixed(w) => w.spec.seed,
            Worlds::Replicated(s) => s.seed.wrapping_add(seed),
        }
    }

    pub fn world(&self, seed: u64) -> Result<FrozenWorld> {
        match self {
            Worlds::Fixed(w) => Ok(w.clone()),
            Worlds::Replicated(s) => generate_benchmark(&BenchmarkSpec {
                seed: self.world_seed(seed),
                ..s.clone()
            }),
        }
    }

    /// The same worlds with a different prompt context length. A fixed
    /// world is regenerated from its spec (samples are drawn before the
    /// encoder, so the images are unchanged).
    pub fn with_context_len(&self, length: usize) -> Result<Worlds> {
        if length == self.spec().context_len {
            return Ok(self.clone());
        }
        let spec = BenchmarkSpec {
            context_len: length,
            ..self.spec().clone()
        };
        Ok(match self {
            Worlds::Fixed(_) => Worlds::Fixed(generate_benchmark(&spec)?),
            Worlds::Replicated(_) => Worlds::Replicated(spec),
        })
    }
}

/// One session per seed over a set of worlds.
pub struct Experiment {
    pub worlds: Worlds,
    pub cfg: PipelineConfig,
    sessions: BTreeMap<u64, Session>,
}

impl Experiment {
    pub fn new(worlds: Worlds, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        worlds.spec().validate()?;
        Ok(Experiment {
            worlds,
            cfg,
            sessions: BTreeMap::new(),
        })
    }

    pub fn session(&mut self, seed: u64) -> Result<&mut Session> {
        if !self.sessions.contains_key(&seed) {
            let s = Session::new(self.worlds.world(seed)?, self.cfg.clone())?;
            self.sessions.insert(seed, s);
        }
        Ok(self.sessions.get_mut(&seed).expect("inserted above"))
    }

    pub fn run(&mut self, protocol: Protocol, method: Method, seeds: &[u64]) -> Result<EvalReport> {
        let mut results = Vec::new();
        for &seed in seeds {
            let tasks = protocol.tasks(self.worlds.num_domains(), &[seed])?;
            results.extend(self.session(seed)?.run_tasks(method, &tasks)?);
        }
        EvalReport::from_results(protocol.name(), method, results)
    }
}

pub fn run_lodo(world: &FrozenWorld, method: Method, cfg: &PipelineConfig, seeds: &[u64]) -> Result<EvalReport> {
    Experiment::new(Worlds::Fixed(world.clone()), cfg.clone())?.run(Protocol::Lodo, method, seeds)
}

pub fn run_single_source(world: &FrozenWorld, method: Method, cfg: &PipelineConfig, seeds: &[u64]) -> Result<EvalReport> {
    Experiment::new(Worlds::Fixed(world.clone()), cfg.clone())?.run(Protocol::SingleSource, method, seeds)
}

/// Train on every domain of `train_world`, select on its pooled validation
/// rows, then evaluate unchanged on each test world with that world's own
/// class tokens. Task `world=i` is test world `i`.
pub fn run_cross_dataset(
    train_world: &FrozenWorld,
    test_worlds: &[FrozenWorld],
    method: Method,
    cfg: &PipelineConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    check_seeds(seeds)?;
    if test_worlds.is_empty() {
        return Err(Error::Empty("test worlds"));
    }
    for w in test_worlds {
        if w.dim() != train_world.dim() || w.context_len() != train_world.context_len() {
            return Err(Error::dim(
                "run_cross_dataset",
                format!(
                    "test world d {} / L {} against d {} / L {}",
                    w.dim(),
                    w.context_len(),
                    train_world.dim(),
                    train_world.context_len()
                ),
            ));
        }
    }
    let mut session = Session::new(train_world.clone(), cfg.clone())?;
    let mut results = Vec::new();
    for &seed in seeds {
        let trained = session.train(method, &all_sources_task(train_world, seed))?;
        results.extend(evaluate_on_worlds(&trained, test_worlds, &cfg.classifier)?);
    }
    EvalReport::from_results("cross_dataset", method, results)
}

/// The cross-dataset training task: every domain is a source.
pub fn all_sources_task(world: &FrozenWorld, seed: u64) -> Task {
    Task {
        seed,
        sources: (0..world.num_domains()).collect(),
        targets: vec![],
    }
}

/// Evaluate a trained source, unchanged, on every sample of each test world.
pub fn evaluate_on_worlds(
    trained: &TrainedMethod,
    test_worlds: &[FrozenWorld],
    classifier: &ClassifierConfig,
) -> Result<Vec<TaskResult>> {
    test_worlds
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let idx: Vec<usize> = (0..w.num_samples()).collect();
            let acc = trained.source.accuracy(w, &idx, classifier)?;
            let man = PromptSource::Fixed { prompt: w.manual_prompt() }.accuracy(w, &idx, classifier)?;
            Ok(TaskResult {
                name: format!("world={i}"),
                seed: trained.task.seed,
                world_seed: w.spec.seed,
                sources: trained.task.sources.clone(),
                targets: vec![i],
                accuracy: acc,
                target_accuracies: vec![acc],
                manual_accuracy: man,
                selection: trained.selection.clone(),
            })
        })
        .collect()
}

/// Stream for per-seed derived quantities that must not collide with the
/// training streams.
pub(crate) fn analysis_seed(seed: u64) -> u64 {
    derive_seed(seed, 0xa4a1)
}
