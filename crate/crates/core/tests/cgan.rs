use spg_core::cgan::{
    discriminator_losses, discriminator_step, generator_loss, generator_step, select_model, train_cgan, CganConfig,
    CganOutcome, Checkpoint, Discriminator, Generator,
};
use spg_core::eval::{PipelineConfig, Session};
use spg_core::nn::MlpVars;
use spg_core::optim::{cosine_warmup_lr, AdamW, AdamWConfig};
use spg_core::world::{generate_benchmark, BenchmarkSpec, FrozenWorld};
use spg_core::{Tape, Tensor};

fn world() -> FrozenWorld {
    generate_benchmark(&BenchmarkSpec {
        samples_per_domain: 60,
        token_fit_steps: 30,
        ..Default::default()
    })
    .unwrap()
}

fn small_cgan() -> CganConfig {
    CganConfig {
        epochs: 6,
        hidden: 24,
        ..Default::default()
    }
}

fn train(world: &FrozenWorld, cfg: &CganConfig, seed: u64) -> CganOutcome {
    let mut pipeline = PipelineConfig::default();
    pipeline.stage_one.epochs = 20;
    let mut session = Session::new(world.clone(), pipeline).unwrap();
    let sources = [0, 1, 2];
    let labels = session.labels_for(seed, &sources).unwrap();
    let splits: Vec<_> = session.splits(seed).unwrap()[..3].to_vec();
    let refs: Vec<_> = splits.iter().collect();
    train_cgan(world, &refs, &labels, cfg, 0.01, seed).unwrap()
}

/// Discriminator with a constant output `value`.
fn constant_discriminator(world: &FrozenWorld, cfg: &CganConfig, value: f64) -> Discriminator {
    let mut d = Discriminator::init(world, cfg, 1);
    d.net.out.weight.data_mut().fill(0.0);
    d.net.out.bias.data_mut().fill(value);
    d
}

fn lsgan_losses(world: &FrozenWorld, d: &Discriminator, g: &Generator, cfg: &CganConfig) -> (f64, f64, f64) {
    let x = world.gather(&[0, 1, 2, 3]);
    let real = Tensor::zeros(&[4, world.context_len() * world.dim()]);
    let z = Tensor::zeros(&[4, cfg.z_dim]);
    let fake = g.generate(&z, &x).unwrap();
    let mut t = Tape::new();
    let dv = MlpVars::bind(&mut t, &d.net, false);
    let gv = MlpVars::bind(&mut t, &g.net, false);
    let r = [t.constant(real), t.constant(x.clone())];
    let f = [t.constant(fake), t.constant(x.clone())];
    let (lr, lf) = discriminator_losses(&mut t, d, &dv, r, f, cfg).unwrap();
    let (zv, xv) = (t.constant(z), t.constant(x));
    let lg = generator_loss(&mut t, g, &gv, d, &dv, zv, xv, cfg).unwrap();
    (t.value(lr).item(), t.value(lf).item(), t.value(lg).item())
}

#[test]
fn least_squares_losses_vanish_at_their_targets() {
    let w = world();
    let cfg = small_cgan();
    let g = Generator::init(&w, &cfg, None, 0);
    // D outputs the real target everywhere: real and generator losses are 0.
    let (lr, lf, lg) = lsgan_losses(&w, &constant_discriminator(&w, &cfg, 1.0), &g, &cfg);
    assert_eq!((lr, lg), (0.0, 0.0));
    assert_eq!(lf, 1.0);
    // D outputs the fake target everywhere: only the fake loss vanishes.
    let (lr, lf, lg) = lsgan_losses(&w, &constant_discriminator(&w, &cfg, 0.0), &g, &cfg);
    assert_eq!(lf, 0.0);
    assert_eq!((lr, lg), (1.0, 1.0));
}

#[test]
fn each_step_updates_only_its_own_network() {
    let w = world();
    let cfg = small_cgan();
    let mut g = Generator::init(&w, &cfg, None, 0);
    let mut d = Discriminator::init(&w, &cfg, 0);
    let x = w.gather(&[0, 5, 10, 15]);
    let real = Tensor::full(&[4, w.context_len() * w.dim()], 0.1);
    let z = Tensor::full(&[4, cfg.z_dim], 0.5);
    let fake = g.generate(&z, &x).unwrap();
    let (mut od, mut og) = (AdamW::new(AdamWConfig::default()), AdamW::new(AdamWConfig::default()));
    let mut norms = Vec::new();

    let (g0, d0) = (g.clone(), d.clone());
    discriminator_step(&mut d, &real, &x, &fake, &x, &mut od, &cfg, &mut norms).unwrap();
    assert_eq!(g, g0);
    assert_ne!(d.net.hidden.weight, d0.net.hidden.weight);
    assert_ne!(d.net.out.bias, d0.net.out.bias);

    let d1 = d.clone();
    generator_step(&mut g, &d, &z, &x, &mut og, &cfg, &mut norms).unwrap();
    assert_eq!(d, d1);
    assert_ne!(g.net.hidden.weight, g0.net.hidden.weight);
    assert_ne!(g.net.out.weight, g0.net.out.weight);
    let groups: Vec<&str> = norms.iter().map(|n| n.group.as_str()).collect();
    assert_eq!(
        groups,
        ["disc_general", "disc_special", "gen_weights", "gen_universal_bias", "gen_special_bias"]
    );
}

#[test]
fn training_log_obeys_its_identities() {
    let w = world();
    let cfg = small_cgan();
    let out = train(&w, &cfg, 3);
    let log = &out.log;
    assert!(!log.iterations.is_empty());
    for (i, r) in log.iterations.iter().enumerate() {
        assert_eq!(r.iter, i);
        assert_eq!(r.l_disc, r.l_real + r.l_fake, "iteration {i}");
        assert_eq!(r.lr, cosine_warmup_lr(&cfg.schedule(), r.epoch as f64).unwrap());
        assert_eq!(r.norms.len(), 5);
        for n in &r.norms {
            assert!(n.post_clip <= n.cap, "iteration {i} group {}: {} > {}", n.group, n.post_clip, n.cap);
            assert!(n.post_clip <= n.pre_clip * (1.0 + 1e-12));
        }
    }
    assert_eq!(log.iterations[0].lr, 1e-5);
    assert_eq!(log.epochs.len(), cfg.epochs);
    assert_eq!(out.checkpoints.len(), cfg.epochs);
    assert_eq!(log.selected_checkpoint, select_model(&out.checkpoints).unwrap());
    assert_eq!(out.generator, out.checkpoints[log.selected_checkpoint].generator);
    let csv = log.to_csv();
    assert_eq!(csv.lines().count(), log.iterations.len() + 1);
    assert!(csv.starts_with("iter,epoch,L_real,L_fake,L_disc,L_gen,lr,val_acc,disc_general_norm"));
}

#[test]
fn training_is_deterministic_per_seed() {
    let w = world();
    let cfg = small_cgan();
    let a = train(&w, &cfg, 7);
    let b = train(&w, &cfg, 7);
    assert_eq!(a.log, b.log);
    assert_eq!(a.generator, b.generator);
    let c = train(&w, &cfg, 8);
    assert_ne!(a.log, c.log);
}

#[test]
fn selection_breaks_ties_towards_the_earliest_checkpoint() {
    let w = world();
    let g = Generator::init(&w, &small_cgan(), None, 0);
    let ck = |id, val_acc| Checkpoint {
        id,
        epoch: id,
        val_acc,
        generator: g.clone(),
    };
    assert_eq!(select_model(&[ck(0, 0.5), ck(1, 0.7), ck(2, 0.7), ck(3, 0.6)]).unwrap(), 1);
    assert_eq!(select_model(&[ck(0, 0.9)]).unwrap(), 0);
    assert!(select_model(&[]).is_err());
}

#[test]
fn missing_prompt_label_is_an_error() {
    let w = world();
    let mut session = Session::new(w.clone(), PipelineConfig::default()).unwrap();
    let splits: Vec<_> = session.splits(0).unwrap().to_vec();
    let refs: Vec<_> = splits.iter().collect();
    assert!(train_cgan(&w, &refs, &[], &small_cgan(), 0.01, 0).is_err());
}
