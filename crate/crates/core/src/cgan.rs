//! Conditional least-squares GAN over soft prompts.
//!
//! The generator maps `[z, s·f(x)]` to a flattened prompt; the discriminator
//! scores `[prompt, s·f(x)]`. Real prompts are the Stage I labels of each
//! sample's domain.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classify;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpVars};
use crate::optim::{clip_group_norm, cosine_warmup_lr, AdamW, AdamWConfig, ParamGroup, ScheduleSpec};
use crate::prompt::{DomainPromptLabel, PromptContext};
use crate::rng::{rng_for, shuffle};
use crate::tensor::{Tape, Tensor, Var};
use crate::world::{DomainSplit, FrozenWorld};

/// Gradient-norm ceilings for the five parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipCaps {
    pub disc_general: f64,
    pub disc_special: f64,
    pub gen_weights: f64,
    pub gen_universal_bias: f64,
    pub gen_special_bias: f64,
}

impl Default for ClipCaps {
    fn default() -> Self {
        ClipCaps {
            disc_general: 0.275,
            disc_special: 5.0,
            gen_weights: 0.0275,
            gen_universal_bias: 2.75e-7,
            gen_special_bias: 2.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CganConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub real_target: f64,
    pub fake_target: f64,
    pub weight_decay: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub clip: ClipCaps,
    /// Whether the discriminator sees the image features.
    pub condition_discriminator: bool,
    /// Multiplier applied to image features before they enter either network.
    pub feature_scale: f64,
    /// Init multiplier for the generator's noise-input weights.
    pub noise_init_gain: f64,
    /// Init multiplier for the generator's output weights.
    pub output_init_gain: f64,
    /// Epochs between stored checkpoints.
    pub checkpoint_every: usize,
}

impl Default for CganConfig {
    fn default() -> Self {
        CganConfig {
            lr: 2e-3,
            epochs: 100,
            batch_size: 32,
            z_dim: 8,
            hidden: 128,
            real_target: 1.0,
            fake_target: 0.0,
            weight_decay: 1e-4,
            warmup_lr: 1e-5,
            warmup_epochs: 4,
            clip: ClipCaps::default(),
            condition_discriminator: true,
            feature_scale: 4.0,
            noise_init_gain: 0.05,
            output_init_gain: 0.1,
            checkpoint_every: 1,
        }
    }
}

impl CganConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("cgan config", d));
        if self.real_target == self.fake_target {
            return bad("real and fake targets must differ".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 || self.checkpoint_every == 0 {
            return bad("epochs, batch_size, hidden and checkpoint_every must be positive".into());
        }
        let c = self.clip;
        for (name, v) in [
            ("disc_general", c.disc_general),
            ("disc_special", c.disc_special),
            ("gen_weights", c.gen_weights),
            ("gen_universal_bias", c.gen_universal_bias),
            ("gen_special_bias", c.gen_special_bias),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("clip cap {name} = {v}"));
            }
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            base_lr: self.lr,
            warmup_lr: self.warmup_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            min_lr: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub net: Mlp,
    pub z_dim: usize,
    pub context_len: usize,
    pub dim: usize,
    pub feature_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Mlp,
    pub conditioned: bool,
    pub feature_scale: f64,
}

impl Generator {
    /// Random init; the output bias starts at `mean_label` so the first
    /// generated prompts sit among the real ones.
    pub fn init(world: &FrozenWorld, cfg: &CganConfig, mean_label: Option<&Tensor>, seed: u64) -> Self {
        let (l, d) = (world.context_len(), world.dim());
        let mut rng = rng_for(seed, 0x6e4);
        let mut net = Mlp::init(&mut rng, cfg.z_dim + d, cfg.hidden, l * d, Activation::Tanh);
        let h = cfg.hidden;
        net.hidden.weight.data_mut()[..cfg.z_dim * h]
            .iter_mut()
            .for_each(|w| *w *= cfg.noise_init_gain);
        net.out.weight.data_mut().iter_mut().for_each(|w| *w *= cfg.output_init_gain);
        if let Some(m) = mean_label {
            net.out.bias.data_mut().copy_from_slice(m.data());
        }
        Generator {
            net,
            z_dim: cfg.z_dim,
            context_len: l,
            dim: d,
            feature_scale: cfg.feature_scale,
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &MlpVars, z: Var, x: Var) -> Result<Var> {
        let xs = tape.scale(x, self.feature_scale)?;
        let input = tape.concat(&[z, xs], 1)?;
        vars.forward(tape, input)
    }

    /// Prompts `[B × L·d]` for noise `z [B × z_dim]` and images `x [B × d]`.
    pub fn generate(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = MlpVars::bind(&mut tape, &self.net, false);
        let zv = tape.constant(z.clone());
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, zv, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Single-sample prompt `G(z | f(x))` as an `L × d` context.
    pub fn generator_forward(&self, z: &[f64], f_x: &[f64]) -> Result<PromptContext> {
        if z.len() != self.z_dim || f_x.len() != self.dim {
            return Err(Error::dim(
                "generator_forward",
                format!("z {} / f(x) {} for z_dim {} / d {}", z.len(), f_x.len(), self.z_dim, self.dim),
            ));
        }
        let out = self.generate(
            &Tensor::from_parts(vec![1, self.z_dim], z.to_vec()),
            &Tensor::from_parts(vec![1, self.dim], f_x.to_vec()),
        )?;
        Ok(PromptContext {
            values: out.reshaped(vec![self.context_len, self.dim])?,
            init_mode: crate::prompt::InitMode::TemplateProxy,
        })
    }

    /// Prompts with all-zero noise.
    pub fn generate_zero_noise(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dims2().0;
        self.generate(&Tensor::zeros(&[b, self.z_dim]), x)
    }

    fn groups<'a>(&'a mut self, caps: &ClipCaps) -> Result<Vec<ParamGroup<'a>>> {
        let Mlp { hidden, out, .. } = &mut self.net;
        Ok(vec![
            ParamGroup::new("gen_weights", vec![&mut hidden.weight, &mut out.weight]).with_cap(caps.gen_weights)?,
            ParamGroup::new("gen_universal_bias", vec![&mut hidden.bias]).with_cap(caps.gen_universal_bias)?,
            ParamGroup::new("gen_special_bias", vec![&mut out.bias]).with_cap(caps.gen_special_bias)?,
        ])
    }
}

impl Discriminator {
    pub fn init(world: &FrozenWorld, cfg: &CganConfig, seed: u64) -> Self {
        let (l, d) = (world.context_len(), world.dim());
        let mut rng = rng_for(seed, 0xd15);
        let input = l * d + if cfg.condition_discriminator { d } else { 0 };
        Discriminator {
            net: Mlp::init(&mut rng, input, cfg.hidden, 1, Activation::Relu),
            conditioned: cfg.condition_discriminator,
            feature_scale: cfg.feature_scale,
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &MlpVars, prompts: Var, x: Var) -> Result<Var> {
        let input = if self.conditioned {
            let xs = tape.scale(x, self.feature_scale)?;
            tape.concat(&[prompts, xs], 1)?
        } else {
            prompts
        };
        vars.forward(tape, input)
    }

    /// Unbounded score `D(v | f(x))` for one prompt.
    pub fn discriminator_forward(&self, prompt: &PromptContext, f_x: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = MlpVars::bind(&mut tape, &self.net, false);
        let p = tape.constant(prompt.flat()?);
        let x = tape.constant(Tensor::new(vec![1, f_x.len()], f_x.to_vec())?);
        let s = self.forward(&mut tape, &vars, p, x)?;
        if tape.value(s).len() != 1 {
            return Err(Error::dim("discriminator_forward", "non-scalar score"));
        }
        Ok(tape.value(s).item())
    }

    fn groups<'a>(&'a mut self, caps: &ClipCaps) -> Result<Vec<ParamGroup<'a>>> {
        let Mlp { hidden, out, .. } = &mut self.net;
        Ok(vec![
            ParamGroup::new("disc_general", vec![&mut hidden.weight, &mut hidden.bias]).with_cap(caps.disc_general)?,
            ParamGroup::new("disc_special", vec![&mut out.weight, &mut out.bias]).with_cap(caps.disc_special)?,
        ])
    }
}

/// Gradient norm of one group around the clipping call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupNorm {
    pub group: String,
    pub cap: f64,
    pub pre_clip: f64,
    pub post_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub l_real: f64,
    pub l_fake: f64,
    pub l_disc: f64,
    pub l_gen: f64,
    pub lr: f64,
    pub norms: Vec<GroupNorm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub last_iter: usize,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
    pub selected_checkpoint: usize,
}

impl TrainLog {
    /// CSV with one row per iteration; `val_acc` is filled on the last
    /// iteration of each epoch. Group norms follow as `<group>_norm` columns.
    pub fn to_csv(&self) -> String {
        let groups: Vec<String> = self
            .iterations
            .first()
            .map(|r| r.norms.iter().map(|n| n.group.clone()).collect())
            .unwrap_or_default();
        let mut out = String::from("iter,epoch,L_real,L_fake,L_disc,L_gen,lr,val_acc");
        for g in &groups {
            let _ = write!(out, ",{g}_norm");
        }
        out.push('\n');
        let val: BTreeMap<usize, f64> = self.epochs.iter().map(|e| (e.last_iter, e.val_acc)).collect();
        for r in &self.iterations {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},",
                r.iter, r.epoch, r.l_real, r.l_fake, r.l_disc, r.l_gen, r.lr
            );
            if let Some(v) = val.get(&r.iter) {
                let _ = write!(out, "{v}");
            }
            for n in &r.norms {
                let _ = write!(out, ",{}", n.post_clip);
            }
            out.push('\n');
        }
        out
    }
}

/// A stored generator with the validation accuracy it was selected on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub id: usize,
    pub epoch: usize,
    pub val_acc: f64,
    pub generator: Generator,
}

/// Stage I labels keyed by domain, as `[1 × L·d]` rows.
fn label_rows(labels: &[DomainPromptLabel]) -> Result<BTreeMap<usize, Tensor>> {
    labels.iter().map(|l| Ok((l.domain, l.prompt.flat()?))).collect()
}

fn stack_rows(rows: &[&Tensor]) -> Tensor {
    let w = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * w);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::from_parts(vec![rows.len(), w], data)
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

fn record_norms(groups: &mut [ParamGroup], out: &mut Vec<GroupNorm>) -> Result<()> {
    for g in groups.iter_mut() {
        let pre = g.grad_norm()?;
        clip_group_norm(g)?;
        out.push(GroupNorm {
            group: g.name.clone(),
            cap: g.clip_cap.unwrap_or(f64::INFINITY),
            pre_clip: pre,
            post_clip: g.grad_norm()?,
        });
    }
    Ok(())
}

/// Least-squares discriminator losses `(L_real, L_fake)` on a tape, for
/// `[prompts, images]` pairs of real and generated rows.
pub fn discriminator_losses(
    tape: &mut Tape,
    d: &Discriminator,
    vars: &MlpVars,
    real: [Var; 2],
    fake: [Var; 2],
    cfg: &CganConfig,
) -> Result<(Var, Var)> {
    let dr = d.forward(tape, vars, real[0], real[1])?;
    let df = d.forward(tape, vars, fake[0], fake[1])?;
    let ones = tape.constant(Tensor::full(tape.value(dr).shape(), cfg.real_target));
    let zeros = tape.constant(Tensor::full(tape.value(df).shape(), cfg.fake_target));
    Ok((tape.mse(dr, ones)?, tape.mse(df, zeros)?))
}

/// Least-squares generator loss `mse(D(G(z | x)), real_target)` on a tape.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    tape: &mut Tape,
    g: &Generator,
    gv: &MlpVars,
    d: &Discriminator,
    dv: &MlpVars,
    z: Var,
    x: Var,
    cfg: &CganConfig,
) -> Result<Var> {
    let fake = g.forward(tape, gv, z, x)?;
    let score = d.forward(tape, dv, fake, x)?;
    let ones = tape.constant(Tensor::full(tape.value(score).shape(), cfg.real_target));
    tape.mse(score, ones)
}

/// One discriminator update. `real` holds the domain label of each row of
/// `x_real`; `fake` holds generator outputs for `x_fake` (already detached).
/// Returns `(L_real, L_fake)`.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    d: &mut Discriminator,
    real: &Tensor,
    x_real: &Tensor,
    fake: &Tensor,
    x_fake: &Tensor,
    opt: &mut AdamW,
    cfg: &CganConfig,
    norms: &mut Vec<GroupNorm>,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let vars = MlpVars::bind(&mut tape, &d.net, true);
    let rv = tape.constant(real.clone());
    let xr = tape.constant(x_real.clone());
    let fv = tape.constant(fake.clone());
    let xf = tape.constant(x_fake.clone());
    let (l_real, l_fake) = discriminator_losses(&mut tape, d, &vars, [rv, xr], [fv, xf], cfg)?;
    let total = tape.add(l_real, l_fake)?;
    let grads = tape.backward(total)?;
    d.net.zero_grad();
    vars.accumulate(&grads, &mut d.net)?;
    let mut groups = d.groups(&cfg.clip)?;
    record_norms(&mut groups, norms)?;
    opt.step(&mut groups)?;
    d.net.zero_grad();
    Ok((tape.value(l_real).item(), tape.value(l_fake).item()))
}

/// One generator update through a frozen discriminator. Returns `L_gen`.
pub fn generator_step(
    g: &mut Generator,
    d: &Discriminator,
    z: &Tensor,
    x: &Tensor,
    opt: &mut AdamW,
    cfg: &CganConfig,
    norms: &mut Vec<GroupNorm>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let gv = MlpVars::bind(&mut tape, &g.net, true);
    let dv = MlpVars::bind(&mut tape, &d.net, false);
    let zv = tape.constant(z.clone());
    let xv = tape.constant(x.clone());
    let loss = generator_loss(&mut tape, g, &gv, d, &dv, zv, xv, cfg)?;
    let grads = tape.backward(loss)?;
    g.net.zero_grad();
    gv.accumulate(&grads, &mut g.net)?;
    let mut groups = g.groups(&cfg.clip)?;
    record_norms(&mut groups, norms)?;
    opt.step(&mut groups)?;
    g.net.zero_grad();
    Ok(tape.value(loss).item())
}

/// Accuracy of zero-noise generated prompts on the given rows.
pub fn generator_accuracy(world: &FrozenWorld, g: &Generator, idx: &[usize], temperature: f64) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Empty("evaluation rows"));
    }
    let x = world.gather(idx);
    let p = g.generate_zero_noise(&x)?;
    let l = classify::logits_per_sample(world, &p, &x, temperature)?;
    Ok(classify::accuracy_from_logits(&l, &world.labels_of(idx)))
}

/// Argmax of validation accuracy; ties go to the earliest checkpoint.
pub fn select_model(checkpoints: &[Checkpoint]) -> Result<usize> {
    let mut best: Option<&Checkpoint> = None;
    for c in checkpoints {
        if best.is_none_or(|b| c.val_acc > b.val_acc) {
            best = Some(c);
        }
    }
    best.map(|c| c.id).ok_or(Error::Empty("checkpoint list"))
}

#[derive(Clone, Debug)]
pub struct CganOutcome {
    pub generator: Generator,
    pub log: TrainLog,
    pub checkpoints: Vec<Checkpoint>,
}

/// Adversarial training on the pooled source training rows, selecting the
/// checkpoint with the best pooled source-validation accuracy.
pub fn train_cgan(
    world: &FrozenWorld,
    sources: &[&DomainSplit],
    labels: &[DomainPromptLabel],
    cfg: &CganConfig,
    temperature: f64,
    seed: u64,
) -> Result<CganOutcome> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Empty("source domains"));
    }
    let rows = label_rows(labels)?;
    for s in sources {
        if !rows.contains_key(&s.domain) {
            return Err(Error::MissingLabel(s.domain));
        }
    }
    let train: Vec<usize> = sources.iter().flat_map(|s| s.train.iter().copied()).collect();
    let val: Vec<usize> = sources.iter().flat_map(|s| s.val.iter().copied()).collect();
    if train.is_empty() {
        return Err(Error::Empty("training rows"));
    }
    let val = if val.is_empty() { train.clone() } else { val };

    let src_rows: Vec<&Tensor> = sources.iter().map(|s| &rows[&s.domain]).collect();
    let mut mean = Tensor::zeros(src_rows[0].shape());
    for r in &src_rows {
        mean.data_mut().iter_mut().zip(r.data()).for_each(|(a, b)| *a += b);
    }
    let n = src_rows.len() as f64;
    mean.data_mut().iter_mut().for_each(|a| *a /= n);

    let mut g = Generator::init(world, cfg, Some(&mean), seed);
    let mut d = Discriminator::init(world, cfg, seed);
    let adam = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let (mut opt_g, mut opt_d) = (AdamW::new(adam), AdamW::new(adam));
    let schedule = cfg.schedule();
    let mut rng = rng_for(seed, 0x9a7);
    let mut order = train.clone();
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let mut iter = 0;

    for epoch in 0..cfg.epochs {
        let lr = cosine_warmup_lr(&schedule, epoch as f64)?;
        opt_g.set_lr(lr);
        opt_d.set_lr(lr);
        shuffle(&mut rng, &mut order);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let fake_rows: Vec<usize> = (0..b).map(|_| train[rng.random_range(0..train.len())]).collect();
            let z = normal_matrix(&mut rng, b, cfg.z_dim);
            let x_real = world.gather(batch);
            let x_fake = world.gather(&fake_rows);
            let real = stack_rows(&batch.iter().map(|&i| &rows[&world.domains[i]]).collect::<Vec<_>>());
            let fail = |e: Error| match e {
                Error::NonFinite { op } => Error::TrainingFailure {
                    iteration: iter,
                    reason: format!("non-finite value in {op}"),
                },
                other => other,
            };
            let fake = g.generate(&z, &x_fake).map_err(fail)?;
            let mut norms = Vec::with_capacity(5);
            let (l_real, l_fake) =
                discriminator_step(&mut d, &real, &x_real, &fake, &x_fake, &mut opt_d, cfg, &mut norms).map_err(fail)?;
            let l_gen = generator_step(&mut g, &d, &z, &x_fake, &mut opt_g, cfg, &mut norms).map_err(fail)?;
            let l_disc = l_real + l_fake;
            if ![l_real, l_fake, l_disc, l_gen].iter().all(|v| v.is_finite()) {
                return Err(fail(Error::NonFinite { op: "loss" }));
            }
            log.iterations.push(IterRecord {
                iter,
                epoch,
                l_real,
                l_fake,
                l_disc,
                l_gen,
                lr,
                norms,
            });
            iter += 1;
        }
        let val_acc = generator_accuracy(world, &g, &val, temperature)?;
        log.epochs.push(EpochRecord {
            epoch,
            last_iter: iter - 1,
            val_acc,
        });
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            checkpoints.push(Checkpoint {
                id: checkpoints.len(),
                epoch,
                val_acc,
                generator: g.clone(),
            });
        }
    }
    let chosen = select_model(&checkpoints)?;
    log.selected_checkpoint = chosen;
    Ok(CganOutcome {
        generator: checkpoints[chosen].generator.clone(),
        log,
        checkpoints,
    })
}
