//! Soft prompts: per-domain prompt labels, pooled and averaged baselines and
//! image-conditional adapters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classify::{self, per_sample_logits, shared_logits};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpVars};
use crate::optim::{sgd_step, AdamW, AdamWConfig, ParamGroup};
use crate::rng::{rng_for, shuffle};
use crate::tensor::{Tape, Tensor, Var};
use crate::world::{DomainSplit, EncoderVars, FrozenWorld};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Start from the world's manual prompt.
    TemplateProxy,
    /// Entries drawn from N(0, 0.02²).
    Gaussian,
}

/// An `L × d` matrix of context vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub values: Tensor,
    pub init_mode: InitMode,
}

impl PromptContext {
    pub fn context_len(&self) -> usize {
        self.values.shape()[0]
    }

    /// The prompt as a single `[1 × L·d]` row.
    pub fn flat(&self) -> Result<Tensor> {
        self.values.reshaped(vec![1, self.values.len()])
    }
}

pub const GAUSSIAN_INIT_STD: f64 = 0.02;

pub fn init_prompt(world: &FrozenWorld, mode: InitMode, context_len: usize, seed: u64) -> Result<PromptContext> {
    let d = world.dim();
    if context_len == 0 {
        return Err(Error::invalid("context length", "must be at least 1"));
    }
    let values = match mode {
        InitMode::TemplateProxy => {
            if context_len != world.context_len() {
                return Err(Error::dim(
                    "init_prompt",
                    format!("template has length {}, asked for {context_len}", world.context_len()),
                ));
            }
            world.manual.values.clone()
        }
        InitMode::Gaussian => {
            let mut rng = rng_for(seed, 0x1417);
            let v = (0..context_len * d)
                .map(|_| GAUSSIAN_INIT_STD * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(vec![context_len, d], v)?
        }
    };
    Ok(PromptContext { values, init_mode: mode })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageOneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub init: InitMode,
    /// Epochs for the pooled all-domain prompt.
    pub all_domain_epochs: usize,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        StageOneConfig {
            epochs: 300,
            lr: 0.05,
            batch_size: 32,
            init: InitMode::TemplateProxy,
            all_domain_epochs: 100,
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("stage_one.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("stage_one.lr", format!("{}", self.lr)));
        }
        Ok(())
    }
}

/// Summary of one prompt-fitting run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTrace {
    pub epochs: usize,
    pub best_epoch: usize,
    pub initial_train_ce: f64,
    pub final_train_ce: f64,
    pub best_val_ce: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Prompt fitted to a single source domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPromptLabel {
    pub domain: usize,
    pub prompt: PromptContext,
    pub trace: PromptTrace,
}

fn failure(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::TrainingFailure {
            iteration,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn eval_fixed(world: &FrozenWorld, prompt: &Tensor, idx: &[usize]) -> Result<(f64, f64)> {
    let l = classify::logits_fixed(world, prompt, &world.gather(idx), classify::ClassifierConfig::default().temperature)?;
    let y = world.labels_of(idx);
    Ok((classify::cross_entropy(&l, &y), classify::accuracy_from_logits(&l, &y)))
}

/// Mean cross-entropy of one shared prompt (`[1 × L·d]`) on `rows`.
pub fn stage_one_loss(
    tape: &mut Tape,
    world: &FrozenWorld,
    enc: &EncoderVars,
    tokens: Var,
    prompt: Var,
    rows: &[usize],
    temperature: f64,
) -> Result<Var> {
    let x = tape.constant(world.gather(rows));
    let logits = shared_logits(tape, enc, tokens, prompt, x, temperature)?;
    tape.softmax_cross_entropy(logits, &world.labels_of(rows))
}

/// SGD on a single shared prompt, keeping the epoch with the lowest
/// validation cross-entropy (epoch 0 is the initialisation).
pub fn train_prompt(
    world: &FrozenWorld,
    train: &[usize],
    val: &[usize],
    init: &PromptContext,
    epochs: usize,
    cfg: &StageOneConfig,
    seed: u64,
) -> Result<(PromptContext, PromptTrace)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training rows"));
    }
    let val = if val.is_empty() { train } else { val };
    let tau = classify::ClassifierConfig::default().temperature;
    let shape = init.values.shape().to_vec();
    let mut prompt = init.flat()?.with_grad();
    let (initial_train_ce, _) = eval_fixed(world, &prompt, train)?;
    let (mut best_ce, _) = eval_fixed(world, &prompt, val)?;
    let mut best = prompt.clone();
    let mut best_epoch = 0;
    let mut rng = rng_for(seed, 0x57a6e1);
    let mut order = train.to_vec();
    let mut iteration = 0;
    for epoch in 1..=epochs {
        shuffle(&mut rng, &mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let enc = world.encoder.bind(&mut tape);
            let tokens = tape.constant(world.tokens.clone());
            let p = tape.param(&prompt);
            let step = (|| -> Result<_> {
                let loss = stage_one_loss(&mut tape, world, &enc, tokens, p, batch, tau)?;
                tape.backward(loss)
            })()
            .map_err(failure(iteration))?;
            prompt.zero_grad();
            step.accumulate_into(p, &mut prompt)?;
            sgd_step(&mut ParamGroup::new("prompt", vec![&mut prompt]), cfg.lr)?;
            if !prompt.is_finite() {
                return Err(failure(iteration)(Error::NonFinite { op: "sgd_step" }));
            }
            iteration += 1;
        }
        let (ce, _) = eval_fixed(world, &prompt, val)?;
        if ce < best_ce {
            best_ce = ce;
            best = prompt.clone();
            best_epoch = epoch;
        }
    }
    best.zero_grad();
    let (final_train_ce, train_accuracy) = eval_fixed(world, &best, train)?;
    let (_, val_accuracy) = eval_fixed(world, &best, val)?;
    let mut values = best.reshaped(shape)?;
    values.zero_grad();
    let values = Tensor::new(values.shape().to_vec(), values.into_data())?;
    Ok((
        PromptContext {
            values,
            init_mode: init.init_mode,
        },
        PromptTrace {
            epochs,
            best_epoch,
            initial_train_ce,
            final_train_ce,
            best_val_ce: best_ce,
            train_accuracy,
            val_accuracy,
        },
    ))
}

/// Fit the prompt label of one source domain on its training split.
pub fn train_domain_prompt_label(
    world: &FrozenWorld,
    split: &DomainSplit,
    cfg: &StageOneConfig,
    seed: u64,
) -> Result<DomainPromptLabel> {
    if split.train.is_empty() {
        return Err(Error::EmptyDomain(split.domain));
    }
    let init = init_prompt(world, cfg.init, world.context_len(), crate::rng::derive_seed(seed, split.domain as u64))?;
    let (prompt, trace) = train_prompt(
        world,
        &split.train,
        &split.val,
        &init,
        cfg.epochs,
        cfg,
        crate::rng::derive_seed(seed, 100 + split.domain as u64),
    )?;
    Ok(DomainPromptLabel {
        domain: split.domain,
        prompt,
        trace,
    })
}

/// One prompt fitted to the pooled training data of all given domains.
pub fn train_all_domain_prompt(
    world: &FrozenWorld,
    sources: &[&DomainSplit],
    cfg: &StageOneConfig,
    seed: u64,
) -> Result<(PromptContext, PromptTrace)> {
    if sources.is_empty() {
        return Err(Error::Empty("source domains"));
    }
    let train: Vec<usize> = sources.iter().flat_map(|s| s.train.iter().copied()).collect();
    let val: Vec<usize> = sources.iter().flat_map(|s| s.val.iter().copied()).collect();
    // a single source reproduces train_domain_prompt_label exactly
    let (init_stream, stream, epochs) = match sources {
        [one] => (one.domain as u64, 100 + one.domain as u64, cfg.epochs),
        _ => (0xa11, 0xa12, cfg.all_domain_epochs),
    };
    let init = init_prompt(world, cfg.init, world.context_len(), crate::rng::derive_seed(seed, init_stream))?;
    train_prompt(world, &train, &val, &init, epochs, cfg, crate::rng::derive_seed(seed, stream))
}

/// Equal-weight average of prompt labels.
pub fn mix_domain_prompt(labels: &[&DomainPromptLabel]) -> Result<PromptContext> {
    let first = labels.first().ok_or(Error::Empty("prompt labels"))?;
    let shape = first.prompt.values.shape().to_vec();
    let mut acc = vec![0.0; first.prompt.values.len()];
    for l in labels {
        if l.prompt.values.shape() != shape.as_slice() {
            return Err(Error::dim(
                "mix_domain_prompt",
                format!("{:?} vs {shape:?}", l.prompt.values.shape()),
            ));
        }
        acc.iter_mut().zip(l.prompt.values.data()).for_each(|(a, v)| *a += v);
    }
    let n = labels.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(PromptContext {
        values: Tensor::new(shape, acc)?,
        init_mode: first.prompt.init_mode,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// `[v + r(x), c]` with `r` added to every context row.
    Residual,
    /// `[r(x), c]` with `r` producing the whole context.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub batch_size: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            epochs: 30,
            lr: 2e-3,
            hidden: 32,
            batch_size: 32,
        }
    }
}

/// Image-conditional prompt network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAdapter {
    pub mode: AdapterMode,
    /// Base context `v` (`[1 × L·d]`); unused in concat mode.
    pub base: Tensor,
    pub net: Mlp,
    pub context_len: usize,
    pub dim: usize,
}

impl ConditionalAdapter {
    pub fn new(world: &FrozenWorld, mode: AdapterMode, hidden: usize, seed: u64) -> Result<Self> {
        let (l, d) = (world.context_len(), world.dim());
        let mut rng = rng_for(seed, 0xada);
        let out = match mode {
            AdapterMode::Residual => d,
            AdapterMode::Concat => l * d,
        };
        let mut net = Mlp::init(&mut rng, d, hidden, out, Activation::Relu);
        let base = world.manual.flat()?;
        match mode {
            AdapterMode::Residual => {
                // r(x) = 0 at initialisation
                net.out.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
                net.out.bias.data_mut().iter_mut().for_each(|w| *w = 0.0);
            }
            AdapterMode::Concat => {
                net.out.weight.data_mut().iter_mut().for_each(|w| *w *= 0.1);
                net.out.bias.data_mut().copy_from_slice(base.data());
            }
        }
        Ok(ConditionalAdapter {
            mode,
            base,
            net,
            context_len: l,
            dim: d,
        })
    }

    fn forward(&self, tape: &mut Tape, base: Var, net: &MlpVars, x: Var) -> Result<Var> {
        let b = tape.value(x).dims2().0;
        let r = net.forward(tape, x)?;
        match self.mode {
            AdapterMode::Concat => Ok(r),
            AdapterMode::Residual => {
                let parts = vec![r; self.context_len];
                let rr = tape.concat(&parts, 1)?;
                let v = tape.tile_rows(base, b)?;
                tape.add(v, rr)
            }
        }
    }

    /// Per-sample prompts `[B × L·d]` for images `x [B × d]`.
    pub fn prompts(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let base = tape.constant(self.base.clone());
        let net = MlpVars::bind(&mut tape, &self.net, false);
        let xv = tape.constant(x.clone());
        let p = self.forward(&mut tape, base, &net, xv)?;
        Ok(tape.value(p).clone())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.net.hidden.weight,
            &mut self.net.hidden.bias,
            &mut self.net.out.weight,
            &mut self.net.out.bias,
        ];
        if self.mode == AdapterMode::Residual {
            v.push(&mut self.base);
        }
        v
    }
}

fn eval_adapter(world: &FrozenWorld, a: &ConditionalAdapter, idx: &[usize]) -> Result<(f64, f64)> {
    let x = world.gather(idx);
    let p = a.prompts(&x)?;
    let l = classify::logits_per_sample(world, &p, &x, classify::ClassifierConfig::default().temperature)?;
    let y = world.labels_of(idx);
    Ok((classify::cross_entropy(&l, &y), classify::accuracy_from_logits(&l, &y)))
}

/// Jointly fit the adapter network (and, in residual mode, the base context)
/// on pooled source data; keep the lowest validation cross-entropy epoch.
pub fn train_conditional_prompt(
    world: &FrozenWorld,
    sources: &[&DomainSplit],
    mode: AdapterMode,
    cfg: &AdapterConfig,
    seed: u64,
) -> Result<(ConditionalAdapter, PromptTrace)> {
    if sources.is_empty() {
        return Err(Error::Empty("source domains"));
    }
    let train: Vec<usize> = sources.iter().flat_map(|s| s.train.iter().copied()).collect();
    let val: Vec<usize> = sources.iter().flat_map(|s| s.val.iter().copied()).collect();
    let tau = classify::ClassifierConfig::default().temperature;
    let mut adapter = ConditionalAdapter::new(world, mode, cfg.hidden, seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let (initial_train_ce, _) = eval_adapter(world, &adapter, &train)?;
    let (mut best_ce, _) = eval_adapter(world, &adapter, &val)?;
    let mut best = adapter.clone();
    let mut best_epoch = 0;
    let mut rng = rng_for(seed, 0xada + 1);
    let mut order = train.clone();
    let mut iteration = 0;
    for epoch in 1..=cfg.epochs {
        shuffle(&mut rng, &mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let enc = world.encoder.bind(&mut tape);
            let tokens = tape.constant(world.tokens.clone());
            let base = tape.param(&adapter.base);
            let net = MlpVars::bind(&mut tape, &adapter.net, true);
            let x = tape.constant(world.gather(batch));
            let grads = (|| -> Result<_> {
                let prompts = adapter.forward(&mut tape, base, &net, x)?;
                let logits = per_sample_logits(&mut tape, &enc, tokens, prompts, x, tau)?;
                let loss = tape.softmax_cross_entropy(logits, &world.labels_of(batch))?;
                tape.backward(loss)
            })()
            .map_err(failure(iteration))?;
            adapter.net.zero_grad();
            adapter.base.zero_grad();
            net.accumulate(&grads, &mut adapter.net)?;
            grads.accumulate_into(base, &mut adapter.base)?;
            opt.step(&mut [ParamGroup::new("adapter", adapter.params_mut())])?;
            iteration += 1;
        }
        let (ce, _) = eval_adapter(world, &adapter, &val)?;
        if ce < best_ce {
            best_ce = ce;
            best = adapter.clone();
            best_epoch = epoch;
        }
    }
    best.net.zero_grad();
    best.base.zero_grad();
    let (final_train_ce, train_accuracy) = eval_adapter(world, &best, &train)?;
    let (_, val_accuracy) = eval_adapter(world, &best, &val)?;
    Ok((
        best,
        PromptTrace {
            epochs: cfg.epochs,
            best_epoch,
            initial_train_ce,
            final_train_ce,
            best_val_ce: best_ce,
            train_accuracy,
            val_accuracy,
        },
    ))
}
