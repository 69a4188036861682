//! Synthetic benchmark: domain-shifted unit-norm image embeddings, a frozen
//! class-token table and a frozen text encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::{AdamW, AdamWConfig, ParamGroup};
use crate::prompt::{InitMode, PromptContext};
use crate::tensor::{Tape, Tensor, Var};

pub const ARCHIVE_FORMAT: &str = "spg-world";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Rotation,
    Bias,
    RotationBias,
}

impl ShiftKind {
    fn rotates(self) -> bool {
        matches!(self, ShiftKind::Rotation | ShiftKind::RotationBias)
    }

    fn biases(self) -> bool {
        matches!(self, ShiftKind::Bias | ShiftKind::RotationBias)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub samples_per_domain: usize,
    /// Minimum pairwise angle between class means, in radians.
    pub class_separation: f64,
    pub shift: ShiftKind,
    /// Total noise magnitude: each coordinate gets `noise_std / sqrt(d)`.
    pub noise_std: f64,
    /// Rotation angle per domain; derived from the domain count when absent.
    pub rotation_angles: Option<Vec<f64>>,
    /// Norm of the per-domain offset vector.
    pub bias_norm: f64,
    /// Number of domain clusters sharing a rotation neighbourhood and an
    /// offset direction.
    pub clusters: usize,
    pub context_len: usize,
    pub encoder_hidden: usize,
    /// Std multiplier for the encoder's first layer (`gain / sqrt(fan_in)`).
    pub encoder_gain: f64,
    pub manual_std: f64,
    /// Adam steps used to align the class tokens with the class means under
    /// the manual prompt.
    pub token_fit_steps: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            num_domains: 4,
            num_classes: 5,
            embed_dim: 16,
            samples_per_domain: 500,
            class_separation: 60f64.to_radians(),
            shift: ShiftKind::RotationBias,
            noise_std: 0.15,
            rotation_angles: None,
            bias_norm: 0.3,
            clusters: 2,
            context_len: 4,
            encoder_hidden: 64,
            encoder_gain: 8.0,
            manual_std: 0.02,
            token_fit_steps: 300,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InfeasibleSpec(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.embed_dim < 4 {
            return bad(format!("embed_dim must be at least 4, got {}", self.embed_dim));
        }
        if self.num_domains == 0 {
            return bad("no domains".into());
        }
        if self.samples_per_domain < self.num_classes {
            return bad(format!(
                "{} samples per domain cannot cover {} classes",
                self.samples_per_domain, self.num_classes
            ));
        }
        if !(0.0..).contains(&self.noise_std) || !(0.0..).contains(&self.bias_norm) {
            return bad("noise_std and bias_norm must be non-negative".into());
        }
        if self.context_len == 0 || self.encoder_hidden == 0 {
            return bad("context_len and encoder_hidden must be positive".into());
        }
        if self.clusters == 0 || self.clusters > self.num_domains {
            return bad(format!("{} clusters for {} domains", self.clusters, self.num_domains));
        }
        if let Some(a) = &self.rotation_angles {
            if a.len() != self.num_domains {
                return bad(format!("{} rotation angles for {} domains", a.len(), self.num_domains));
            }
        }
        Ok(())
    }

    fn cluster_of(&self, domain: usize) -> usize {
        domain * self.clusters / self.num_domains
    }

    /// Rotation angle of each domain. Cluster centres are spread evenly over
    /// `[-CLUSTER_SPAN, CLUSTER_SPAN]` (a lone cluster sits at `+CLUSTER_SPAN`);
    /// members of a cluster are 0.2 rad apart, centred on their cluster.
    pub fn domain_angles(&self) -> Vec<f64> {
        if let Some(a) = &self.rotation_angles {
            return a.clone();
        }
        let mut size = vec![0usize; self.clusters];
        (0..self.num_domains).for_each(|m| size[self.cluster_of(m)] += 1);
        let mut seen = vec![0usize; self.clusters];
        (0..self.num_domains)
            .map(|m| {
                let c = self.cluster_of(m);
                let j = seen[c];
                seen[c] += 1;
                let centre = if self.clusters == 1 {
                    CLUSTER_SPAN
                } else {
                    -CLUSTER_SPAN + 2.0 * CLUSTER_SPAN * c as f64 / (self.clusters - 1) as f64
                };
                centre + 0.2 * (j as f64 - (size[c] - 1) as f64 / 2.0)
            })
            .collect()
    }
}

/// Largest cluster-centre rotation, in radians. Close to a half turn so the
/// manual prompt degrades while the two clusters still disagree.
const CLUSTER_SPAN: f64 = 2.8;

/// One embedded image: its feature vector, class and domain.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSample<'a> {
    pub embedding: &'a [f64],
    pub label: usize,
    pub domain: usize,
}

/// Frozen two-layer encoder mapping `[prompt; class token]` to a unit vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenTextEncoder {
    pub layer1: Linear,
    pub layer2: Linear,
    pub context_len: usize,
    pub dim: usize,
}

/// Encoder weights recorded as constants on a tape, split into the prompt
/// and class-token halves of the first layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    w1_prompt: Var,
    w1_token: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl FrozenTextEncoder {
    fn init(rng: &mut ChaCha8Rng, context_len: usize, dim: usize, hidden: usize, gain: f64) -> Self {
        let fan_in = (context_len + 1) * dim;
        let s1 = gain / (fan_in as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1: Vec<f64> = (0..fan_in * hidden).map(|_| s1 * normal(rng)).collect();
        let w2: Vec<f64> = (0..hidden * dim).map(|_| s2 * normal(rng)).collect();
        FrozenTextEncoder {
            layer1: Linear {
                weight: Tensor::from_parts(vec![fan_in, hidden], w1),
                bias: Tensor::zeros(&[hidden]),
            },
            layer2: Linear {
                weight: Tensor::from_parts(vec![hidden, dim], w2),
                bias: Tensor::zeros(&[dim]),
            },
            context_len,
            dim,
        }
    }

    pub fn hidden(&self) -> usize {
        self.layer1.fan_out()
    }

    /// Reference path: concatenate the flattened prompt with one class token
    /// and run the MLP directly.
    pub fn encode_text(&self, prompt: &PromptContext, token: &[f64]) -> Result<Tensor> {
        let (l, d) = (self.context_len, self.dim);
        if prompt.values.shape() != [l, d] {
            return Err(Error::dim(
                "encode_text",
                format!("prompt {:?}, expected [{l}, {d}]", prompt.values.shape()),
            ));
        }
        if token.len() != d {
            return Err(Error::dim("encode_text", format!("class token of length {}", token.len())));
        }
        let mut tape = Tape::new();
        let p = tape.constant(prompt.values.reshaped(vec![1, l * d])?);
        let c = tape.constant(Tensor::from_parts(vec![1, d], token.to_vec()));
        let x = tape.concat(&[p, c], 1)?;
        let w1 = tape.constant(self.layer1.weight.clone());
        let b1 = tape.constant(self.layer1.bias.clone());
        let w2 = tape.constant(self.layer2.weight.clone());
        let b2 = tape.constant(self.layer2.bias.clone());
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.tanh(h)?;
        let o = tape.matmul(h, w2)?;
        let o = tape.add_bias(o, b2)?;
        let o = tape.l2_normalize_rows(o)?;
        tape.value(o).reshaped(vec![d])
    }

    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        let ld = self.context_len * self.dim;
        let h = self.hidden();
        let w = self.layer1.weight.data();
        EncoderVars {
            w1_prompt: tape.constant(Tensor::from_parts(vec![ld, h], w[..ld * h].to_vec())),
            w1_token: tape.constant(Tensor::from_parts(vec![self.dim, h], w[ld * h..].to_vec())),
            b1: tape.constant(self.layer1.bias.clone()),
            w2: tape.constant(self.layer2.weight.clone()),
            b2: tape.constant(self.layer2.bias.clone()),
        }
    }
}

impl EncoderVars {
    /// Text features for every (prompt row, class) pair. `prompts` is
    /// `[B × L·d]`, `tokens` is `[K × d]`; the result is `[B·K × d]` with the
    /// class index varying fastest.
    pub fn encode(&self, tape: &mut Tape, prompts: Var, tokens: Var) -> Result<Var> {
        let b = tape.value(prompts).dims2().0;
        let k = tape.value(tokens).dims2().0;
        let hp = tape.matmul(prompts, self.w1_prompt)?;
        let hc = tape.matmul(tokens, self.w1_token)?;
        let hc = tape.add_bias(hc, self.b1)?;
        let pre = if b == 1 {
            let t = tape.tile_rows(hp, k)?;
            tape.add(t, hc)?
        } else {
            let bi: Vec<usize> = (0..b * k).map(|i| i / k).collect();
            let ki: Vec<usize> = (0..b * k).map(|i| i % k).collect();
            let a = tape.gather_rows(hp, &bi)?;
            let c = tape.gather_rows(hc, &ki)?;
            tape.add(a, c)?
        };
        let h = tape.tanh(pre)?;
        let o = tape.matmul(h, self.w2)?;
        let o = tape.add_bias(o, self.b2)?;
        tape.l2_normalize_rows(o)
    }
}

/// Immutable benchmark: samples plus the frozen encoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenWorld {
    pub spec: BenchmarkSpec,
    pub class_means: Tensor,
    pub rotations: Vec<Tensor>,
    pub offsets: Vec<Tensor>,
    /// `[N × d]`, unit rows.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    /// `[K × d]` frozen class tokens.
    pub tokens: Tensor,
    pub encoder: FrozenTextEncoder,
    pub manual: PromptContext,
}

#[derive(Serialize, Deserialize)]
struct Archive {
    format: String,
    version: u32,
    world: FrozenWorld,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (r, c) = m.dims2();
    (0..r)
        .map(|i| (0..c).map(|j| m.data()[i * c + j] * v[j]).sum())
        .collect()
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += av * b[k * n + j];
            }
        }
    }
    out
}

/// Spectral norm of a square matrix by power iteration on `AᵀA`.
fn spectral_norm(a: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0; n];
    unit(&mut v);
    let mut sigma = 0.0;
    for _ in 0..500 {
        let av: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect();
        let mut atav: Vec<f64> = (0..n).map(|j| (0..n).map(|i| a[i * n + j] * av[i]).sum()).collect();
        let s = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s == 0.0 {
            return 0.0;
        }
        unit(&mut atav);
        v = atav;
        sigma = s.sqrt();
    }
    sigma
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub(crate) fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm = a.iter().map(|x| x.abs()).fold(0.0, f64::max) * n as f64;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = 0.5f64.powi(squarings as i32);
    let s: Vec<f64> = a.iter().map(|x| x * scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..30 {
        term = matmul_sq(&term, &s, n);
        term.iter_mut().for_each(|x| *x /= k as f64);
        result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
    }
    for _ in 0..squarings {
        result = matmul_sq(&result, &result, n);
    }
    result
}

/// Draw a skew-symmetric generator with unit spectral norm.
fn skew_generator(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..d * d).map(|_| normal(rng)).collect();
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = raw[i * d + j] - raw[j * d + i];
        }
    }
    let norm = spectral_norm(&s, d);
    s.iter_mut().for_each(|x| *x /= norm);
    s
}

fn class_means(rng: &mut ChaCha8Rng, spec: &BenchmarkSpec) -> Result<Tensor> {
    let (k, d) = (spec.num_classes, spec.embed_dim);
    let min_cos = spec.class_separation.cos();
    for _ in 0..10_000 {
        let mut mu = vec![0.0; k * d];
        for row in mu.chunks_mut(d) {
            row.iter_mut().for_each(|x| *x = normal(rng));
            unit(row);
        }
        let ok = (0..k).all(|i| {
            (i + 1..k).all(|j| {
                let c: f64 = (0..d).map(|t| mu[i * d + t] * mu[j * d + t]).sum();
                c.clamp(-1.0, 1.0) <= min_cos
            })
        });
        if ok {
            return Ok(Tensor::from_parts(vec![k, d], mu));
        }
    }
    Err(Error::InfeasibleSpec(format!(
        "cannot place {k} class means {:.3} rad apart in {d} dimensions",
        spec.class_separation
    )))
}

/// Build the benchmark described by `spec`. Deterministic in `spec.seed`.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<FrozenWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, d, l) = (spec.num_classes, spec.embed_dim, spec.context_len);
    let mu = class_means(&mut rng, spec)?;

    let generator = skew_generator(&mut rng, d);
    let angles = spec.domain_angles();
    let rotations: Vec<Tensor> = (0..spec.num_domains)
        .map(|m| {
            if spec.shift.rotates() {
                let a: Vec<f64> = generator.iter().map(|x| x * angles[m]).collect();
                Tensor::from_parts(vec![d, d], expm(&a, d))
            } else {
                let mut eye = vec![0.0; d * d];
                (0..d).for_each(|i| eye[i * d + i] = 1.0);
                Tensor::from_parts(vec![d, d], eye)
            }
        })
        .collect();

    let cluster_dirs: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            unit(&mut v);
            v
        })
        .collect();
    let offsets: Vec<Tensor> = (0..spec.num_domains)
        .map(|m| {
            let scale = if spec.shift.biases() { spec.bias_norm } else { 0.0 };
            let v = cluster_dirs[spec.cluster_of(m)].iter().map(|x| x * scale).collect();
            Tensor::from_parts(vec![d], v)
        })
        .collect();

    let per_coord = spec.noise_std / (d as f64).sqrt();
    let n = spec.num_domains * spec.samples_per_domain;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    for m in 0..spec.num_domains {
        let centres: Vec<Vec<f64>> = (0..k)
            .map(|c| {
                let mut x = matvec(&rotations[m], mu.row(c));
                x.iter_mut().zip(offsets[m].data()).for_each(|(a, b)| *a += b);
                x
            })
            .collect();
        for i in 0..spec.samples_per_domain {
            let c = i % k;
            let mut x = centres[c].clone();
            x.iter_mut().for_each(|v| *v += per_coord * normal(&mut rng));
            let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm <= crate::tensor::NORM_EPS {
                return Err(Error::InfeasibleSpec("sample collapsed to the origin".into()));
            }
            x.iter_mut().for_each(|v| *v /= nrm);
            features.extend(x);
            labels.push(c);
            domains.push(m);
        }
    }

    let encoder = FrozenTextEncoder::init(&mut rng, l, d, spec.encoder_hidden, spec.encoder_gain);
    let manual: Vec<f64> = (0..l * d).map(|_| spec.manual_std * normal(&mut rng)).collect();
    let manual = PromptContext {
        values: Tensor::from_parts(vec![l, d], manual),
        init_mode: InitMode::TemplateProxy,
    };
    let raw_tokens: Vec<f64> = (0..k * d).map(|_| normal(&mut rng)).collect();
    let tokens = fit_tokens(
        &encoder,
        &manual,
        &mu,
        Tensor::from_parts(vec![k, d], raw_tokens),
        spec.token_fit_steps,
    )?;

    Ok(FrozenWorld {
        spec: spec.clone(),
        class_means: mu,
        rotations,
        offsets,
        features: Tensor::from_parts(vec![n, d], features),
        labels,
        domains,
        tokens,
        encoder,
        manual,
    })
}

/// A world drawn from `spec` that reuses `base`'s frozen encoder and manual
/// prompt, with its own class tokens fitted to its own class means. This is
/// how test worlds with different classes are built for cross-dataset runs.
pub fn transfer_world(base: &FrozenWorld, spec: &BenchmarkSpec) -> Result<FrozenWorld> {
    if spec.embed_dim != base.dim() || spec.context_len != base.context_len() {
        return Err(Error::dim(
            "transfer_world",
            format!(
                "d {} / L {} against base d {} / L {}",
                spec.embed_dim,
                spec.context_len,
                base.dim(),
                base.context_len()
            ),
        ));
    }
    let spec = BenchmarkSpec {
        encoder_hidden: base.encoder.hidden(),
        token_fit_steps: 0,
        ..spec.clone()
    };
    let mut world = generate_benchmark(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(spec.seed, 0x70c));
    let raw: Vec<f64> = (0..spec.num_classes * spec.embed_dim).map(|_| normal(&mut rng)).collect();
    world.tokens = fit_tokens(
        &base.encoder,
        &base.manual,
        &world.class_means,
        Tensor::from_parts(vec![spec.num_classes, spec.embed_dim], raw),
        base.spec.token_fit_steps,
    )?;
    world.spec.token_fit_steps = base.spec.token_fit_steps;
    world.encoder = base.encoder.clone();
    world.manual = base.manual.clone();
    Ok(world)
}

/// Move the class tokens so that the manual prompt's text features point at
/// the untransformed class means, standing in for a pretrained alignment.
fn fit_tokens(
    encoder: &FrozenTextEncoder,
    manual: &PromptContext,
    mu: &Tensor,
    mut tokens: Tensor,
    steps: usize,
) -> Result<Tensor> {
    let (k, d) = mu.dims2();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.05,
        weight_decay: 0.0,
        ..Default::default()
    });
    let flat = manual.flat()?;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let enc = encoder.bind(&mut tape);
        let p = tape.constant(flat.clone());
        let c = tape.param(&tokens);
        let target = tape.constant(mu.clone());
        let w = enc.encode(&mut tape, p, c)?;
        let dots = tape.row_dot(w, target)?;
        let m = tape.mean(dots)?;
        let loss = tape.scale(m, -1.0)?;
        let grads = tape.backward(loss)?;
        tokens.zero_grad();
        grads.accumulate_into(c, &mut tokens)?;
        opt.step(&mut [ParamGroup::new("tokens", vec![&mut tokens])])?;
    }
    tokens.zero_grad();
    debug_assert_eq!(tokens.shape(), [k, d]);
    Ok(tokens)
}

impl FrozenWorld {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.spec.num_domains
    }

    pub fn dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn context_len(&self) -> usize {
        self.spec.context_len
    }

    pub fn sample(&self, i: usize) -> EmbeddedSample<'_> {
        EmbeddedSample {
            embedding: self.features.row(i),
            label: self.labels[i],
            domain: self.domains[i],
        }
    }

    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        (0..self.num_samples()).filter(|&i| self.domains[i] == domain).collect()
    }

    /// Noise-free image of class `k` in domain `m`, normalised.
    pub fn class_mean_image(&self, m: usize, k: usize) -> Vec<f64> {
        let mut x = matvec(&self.rotations[m], self.class_means.row(k));
        x.iter_mut().zip(self.offsets[m].data()).for_each(|(a, b)| *a += b);
        unit(&mut x);
        x
    }

    /// Features of the given rows as a `[n × d]` matrix.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::from_parts(vec![idx.len(), d], data)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// The fixed context that plays the role of a handcrafted template.
    pub fn manual_prompt(&self) -> PromptContext {
        self.manual.clone()
    }

    pub fn to_archive(&self) -> Result<String> {
        let a = Archive {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            world: self.clone(),
        };
        serde_json::to_string(&a).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn from_archive(text: &str) -> Result<Self> {
        let a: Archive = serde_json::from_str(text).map_err(|e| Error::Archive(e.to_string()))?;
        if a.format != ARCHIVE_FORMAT {
            return Err(Error::Archive(format!("unexpected format '{}'", a.format)));
        }
        if a.version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!("unsupported version {}", a.version)));
        }
        Ok(a.world)
    }
}

/// Train and validation rows of one domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub domain: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Class-stratified split of every domain. Each class keeps at least one
/// sample on each side.
pub fn split_train_val(world: &FrozenWorld, val_fraction: f64, seed: u64) -> Result<Vec<DomainSplit>> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid("val_fraction", format!("{val_fraction} not in (0, 1)")));
    }
    let k = world.num_classes();
    (0..world.num_domains())
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + m as u64));
            let mut train = Vec::new();
            let mut val = Vec::new();
            for c in 0..k {
                let mut rows: Vec<usize> = (0..world.num_samples())
                    .filter(|&i| world.domains[i] == m && world.labels[i] == c)
                    .collect();
                if rows.len() < 2 {
                    return Err(Error::ClassTooSmall {
                        domain: m,
                        class: c,
                        count: rows.len(),
                    });
                }
                for i in (1..rows.len()).rev() {
                    let j = rng.random_range(0..=i);
                    rows.swap(i, j);
                }
                let nv = ((rows.len() as f64 * val_fraction).round() as usize).clamp(1, rows.len() - 1);
                val.extend_from_slice(&rows[..nv]);
                train.extend_from_slice(&rows[nv..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            Ok(DomainSplit { domain: m, train, val })
        })
        .collect()
}
