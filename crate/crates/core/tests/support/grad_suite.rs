//! Central-difference checks for every differentiable op of the tape and for
//! the three training objectives. Shared by the core tests and the
//! acceptance run.

use rand::Rng;
use spg_core::cgan::{discriminator_losses, generator_loss, CganConfig, Discriminator, Generator};
use spg_core::classify::{per_sample_logits, shared_logits};
use spg_core::nn::MlpVars;
use spg_core::prompt::stage_one_loss;
use spg_core::rng::rng_for;
use spg_core::world::{generate_benchmark, BenchmarkSpec, FrozenWorld};
use spg_core::{tensor::grad_check, Result, Tape, Tensor, Var};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = rng_for(seed, 0x9c);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn scaled(t: Tensor, s: f64) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::new(shape, t.into_data().into_iter().map(|v| v * s).collect()).unwrap()
}

/// Contract a non-scalar output with fixed random weights so every output
/// coordinate contributes to the checked gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(seed ^ 0x77, tape.value(y).shape()));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn small_world() -> FrozenWorld {
    generate_benchmark(&BenchmarkSpec {
        samples_per_domain: 40,
        token_fit_steps: 10,
        ..Default::default()
    })
    .unwrap()
}

type Case = (String, f64);

fn check(out: &mut Vec<Case>, name: &str, theta: Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let err = grad_check(f, &theta, STEP).unwrap_or_else(|e| panic!("{name}: {e}"));
    out.push((name.to_string(), err));
}

/// Binary op checked in each argument with the other held constant.
fn check_binary(
    out: &mut Vec<Case>,
    name: &str,
    a: Tensor,
    b: Tensor,
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + Copy,
) {
    let (a2, b2) = (a.clone(), b.clone());
    check(out, &format!("{name}/lhs"), a, move |t, x| {
        let c = t.constant(b2.clone());
        let y = op(t, x, c)?;
        project(t, y, 1)
    });
    check(out, &format!("{name}/rhs"), b, move |t, x| {
        let c = t.constant(a2.clone());
        let y = op(t, c, x)?;
        project(t, y, 2)
    });
}

fn check_unary(out: &mut Vec<Case>, name: &str, a: Tensor, op: impl Fn(&mut Tape, Var) -> Result<Var>) {
    check(out, name, a, move |t, x| {
        let y = op(t, x)?;
        project(t, y, 3)
    });
}

pub fn op_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let o = &mut out;
    check_binary(o, "matmul", random(1, &[3, 4]), random(2, &[4, 5]), |t, a, b| t.matmul(a, b));
    check_binary(o, "matmul_t", random(3, &[3, 4]), random(4, &[5, 4]), |t, a, b| t.matmul_t(a, b));
    check_binary(o, "add", random(5, &[3, 4]), random(6, &[3, 4]), |t, a, b| t.add(a, b));
    check_binary(o, "sub", random(7, &[3, 4]), random(8, &[3, 4]), |t, a, b| t.sub(a, b));
    check_binary(o, "mul", random(9, &[3, 4]), random(10, &[3, 4]), |t, a, b| t.mul(a, b));
    check_binary(o, "add_bias", random(11, &[3, 4]), random(12, &[4]), |t, a, b| t.add_bias(a, b));
    check_binary(o, "concat/axis0", random(13, &[2, 4]), random(14, &[3, 4]), |t, a, b| t.concat(&[a, b], 0));
    check_binary(o, "concat/axis1", random(15, &[3, 2]), random(16, &[3, 5]), |t, a, b| t.concat(&[a, b], 1));
    check_binary(o, "cosine_similarity", random(17, &[6]), random(18, &[6]), |t, a, b| t.cosine_similarity(a, b));
    check_binary(o, "row_dot", random(19, &[4, 3]), random(20, &[4, 3]), |t, a, b| t.row_dot(a, b));
    check_binary(o, "mse", random(21, &[3, 2]), random(22, &[3, 2]), |t, a, b| t.mse(a, b));
    check_unary(o, "scale", random(23, &[3, 4]), |t, a| t.scale(a, -2.5));
    check_unary(o, "tanh", random(24, &[3, 4]), |t, a| t.tanh(a));
    check_unary(o, "relu", random(25, &[3, 4]), |t, a| t.relu(a));
    check_unary(o, "reshape", random(26, &[3, 4]), |t, a| t.reshape(a, &[2, 6]));
    check_unary(o, "tile_rows", random(27, &[1, 4]), |t, a| t.tile_rows(a, 3));
    check_unary(o, "gather_rows", random(28, &[3, 4]), |t, a| t.gather_rows(a, &[2, 0, 2, 1]));
    check_unary(o, "l2_normalize", random(29, &[5]), |t, a| t.l2_normalize(a));
    check_unary(o, "l2_normalize_rows", random(30, &[3, 4]), |t, a| t.l2_normalize_rows(a));
    check_unary(o, "sum", random(31, &[3, 4]), |t, a| t.sum(a));
    check_unary(o, "mean", random(32, &[3, 4]), |t, a| t.mean(a));
    check(o, "softmax_cross_entropy", scaled(random(33, &[4, 5]), 3.0), |t, x| {
        t.softmax_cross_entropy(x, &[0, 4, 2, 2])
    });
    out
}

fn scaled_world_prompt(world: &FrozenWorld, rows: usize, seed: u64) -> Tensor {
    let ld = world.context_len() * world.dim();
    scaled(random(seed, &[rows, ld]), 0.3)
}

/// Encoder paths and logits built from the frozen world.
pub fn encoder_cases(world: &FrozenWorld) -> Vec<Case> {
    let mut out = Vec::new();
    let rows: Vec<usize> = (0..6).collect();
    let x = world.gather(&rows);
    let tau = 0.01;
    check(&mut out, "encode/shared_prompt", scaled_world_prompt(world, 1, 40), |t, p| {
        let enc = world.encoder.bind(t);
        let tokens = t.constant(world.tokens.clone());
        let y = enc.encode(t, p, tokens)?;
        project(t, y, 4)
    });
    check(&mut out, "encode/per_sample_prompts", scaled_world_prompt(world, 3, 41), |t, p| {
        let enc = world.encoder.bind(t);
        let tokens = t.constant(world.tokens.clone());
        let y = enc.encode(t, p, tokens)?;
        project(t, y, 5)
    });
    check(&mut out, "shared_logits", scaled_world_prompt(world, 1, 42), |t, p| {
        let enc = world.encoder.bind(t);
        let tokens = t.constant(world.tokens.clone());
        let xv = t.constant(x.clone());
        let y = shared_logits(t, &enc, tokens, p, xv, tau)?;
        t.softmax_cross_entropy(y, &world.labels_of(&rows))
    });
    check(&mut out, "per_sample_logits", scaled_world_prompt(world, 6, 43), |t, p| {
        let enc = world.encoder.bind(t);
        let tokens = t.constant(world.tokens.clone());
        let xv = t.constant(x.clone());
        let y = per_sample_logits(t, &enc, tokens, p, xv, tau)?;
        t.softmax_cross_entropy(y, &world.labels_of(&rows))
    });
    out
}

/// The Stage I objective with respect to the prompt, at the manual prompt
/// and at a random one.
pub fn stage_one_cases(world: &FrozenWorld) -> Vec<Case> {
    let mut out = Vec::new();
    let rows: Vec<usize> = (0..world.num_samples()).step_by(7).take(24).collect();
    let starts = [
        ("stage_one_loss/manual", world.manual_prompt().flat().unwrap()),
        ("stage_one_loss/random", scaled_world_prompt(world, 1, 50)),
    ];
    for (name, p0) in starts {
        check(&mut out, name, p0, |t, p| {
            let enc = world.encoder.bind(t);
            let tokens = t.constant(world.tokens.clone());
            stage_one_loss(t, world, &enc, tokens, p, &rows, 0.01)
        });
    }
    out
}

fn with_param(vars: &MlpVars, which: usize, v: Var) -> MlpVars {
    let mut m = *vars;
    match which {
        0 => m.hidden.weight = v,
        1 => m.hidden.bias = v,
        2 => m.out.weight = v,
        _ => m.out.bias = v,
    }
    m
}

fn mlp_params(m: &spg_core::nn::Mlp) -> [Tensor; 4] {
    [
        m.hidden.weight.clone(),
        m.hidden.bias.clone(),
        m.out.weight.clone(),
        m.out.bias.clone(),
    ]
}

const PARAM_NAMES: [&str; 4] = ["hidden.weight", "hidden.bias", "out.weight", "out.bias"];

/// `L_disc = L_real + L_fake` in every discriminator parameter, and
/// `L_gen` in every generator parameter (through the frozen discriminator).
pub fn stage_two_cases(world: &FrozenWorld) -> Vec<Case> {
    let cfg = CganConfig {
        hidden: 12,
        ..Default::default()
    };
    let g = Generator::init(world, &cfg, None, 3);
    let d = Discriminator::init(world, &cfg, 4);
    let b = 5;
    let x_real = world.gather(&[0, 9, 17, 33, 71]);
    let x_fake = world.gather(&[2, 11, 40, 55, 90]);
    let real = scaled_world_prompt(world, b, 60);
    let z = random(61, &[b, cfg.z_dim]);
    let fake = g.generate(&z, &x_fake).unwrap();
    let mut out = Vec::new();
    for (i, p) in mlp_params(&d.net).into_iter().enumerate() {
        check(&mut out, &format!("disc_loss/{}", PARAM_NAMES[i]), p, |t, v| {
            let base = MlpVars::bind(t, &d.net, false);
            let vars = with_param(&base, i, v);
            let r = [t.constant(real.clone()), t.constant(x_real.clone())];
            let f = [t.constant(fake.clone()), t.constant(x_fake.clone())];
            let (lr, lf) = discriminator_losses(t, &d, &vars, r, f, &cfg)?;
            t.add(lr, lf)
        });
    }
    for (i, p) in mlp_params(&g.net).into_iter().enumerate() {
        check(&mut out, &format!("gen_loss/{}", PARAM_NAMES[i]), p, |t, v| {
            let base = MlpVars::bind(t, &g.net, false);
            let gv = with_param(&base, i, v);
            let dv = MlpVars::bind(t, &d.net, false);
            let zv = t.constant(z.clone());
            let xv = t.constant(x_fake.clone());
            generator_loss(t, &g, &gv, &d, &dv, zv, xv, &cfg)
        });
    }
    out
}

/// Every case, in a fixed order.
pub fn all_cases() -> Vec<Case> {
    let world = small_world();
    let mut out = op_cases();
    out.extend(encoder_cases(&world));
    out.extend(stage_one_cases(&world));
    out.extend(stage_two_cases(&world));
    out
}
