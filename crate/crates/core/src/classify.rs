//! Cosine-similarity classifier over text features produced from prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::softmax_row;
use crate::tensor::{Tape, Tensor, Var};
use crate::world::{EncoderVars, FrozenWorld};

/// How the generator's noise input is chosen at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoisePolicy {
    FixedZero,
    Sampled { seed: u64 },
    Averaged { samples: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub temperature: f64,
    pub noise: NoisePolicy,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            temperature: 0.01,
            noise: NoisePolicy::FixedZero,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature", format!("{}", self.temperature)));
        }
        if let NoisePolicy::Averaged { samples: 0 } = self.noise {
            return Err(Error::invalid("noise policy", "averaged needs at least one sample"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub class: usize,
    /// Flattened prompt used for this sample.
    pub prompt: Vec<f64>,
}

/// Logits `[B × K]` for images `x [B × d]` under one shared prompt `[1 × L·d]`.
pub fn shared_logits(
    tape: &mut Tape,
    enc: &EncoderVars,
    tokens: Var,
    prompt: Var,
    x: Var,
    temperature: f64,
) -> Result<Var> {
    let w = enc.encode(tape, prompt, tokens)?;
    let sims = tape.matmul_t(x, w)?;
    tape.scale(sims, 1.0 / temperature)
}

/// Logits `[B × K]` where each image `x[b]` has its own prompt row `prompts[b]`.
pub fn per_sample_logits(
    tape: &mut Tape,
    enc: &EncoderVars,
    tokens: Var,
    prompts: Var,
    x: Var,
    temperature: f64,
) -> Result<Var> {
    let (b, _) = tape.value(x).dims2();
    if tape.value(prompts).dims2().0 != b {
        return Err(Error::dim(
            "per_sample_logits",
            format!("{} prompts for {b} images", tape.value(prompts).dims2().0),
        ));
    }
    let k = tape.value(tokens).dims2().0;
    let w = enc.encode(tape, prompts, tokens)?;
    let rep: Vec<usize> = (0..b * k).map(|i| i / k).collect();
    let xr = tape.gather_rows(x, &rep)?;
    let sims = tape.row_dot(w, xr)?;
    let sims = tape.reshape(sims, &[b, k])?;
    tape.scale(sims, 1.0 / temperature)
}

/// Softmax of each logit row.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (r, k) = logits.dims2();
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        softmax_row(logits.row(i), &mut out[i * k..(i + 1) * k]);
    }
    Tensor::from_parts(vec![r, k], out)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_unit(x: &Tensor) -> Result<()> {
    for i in 0..x.dims2().0 {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= crate::tensor::NORM_EPS {
            return Err(Error::Degenerate { op: "classify", norm: n });
        }
    }
    Ok(())
}

/// Logits for `x` with a single fixed prompt (`[L × d]` or flattened).
pub fn logits_fixed(world: &FrozenWorld, prompt: &Tensor, x: &Tensor, temperature: f64) -> Result<Tensor> {
    check_unit(x)?;
    let mut tape = Tape::new();
    let enc = world.encoder.bind(&mut tape);
    let tokens = tape.constant(world.tokens.clone());
    let p = tape.constant(prompt.reshaped(vec![1, prompt.len()])?);
    let xv = tape.constant(x.clone());
    let l = shared_logits(&mut tape, &enc, tokens, p, xv, temperature)?;
    Ok(tape.value(l).clone())
}

/// Logits for `x[b]` under per-sample prompts `[B × L·d]`, in chunks.
pub fn logits_per_sample(world: &FrozenWorld, prompts: &Tensor, x: &Tensor, temperature: f64) -> Result<Tensor> {
    check_unit(x)?;
    let (b, k) = (x.dims2().0, world.num_classes());
    if prompts.dims2().0 != b {
        return Err(Error::dim("logits_per_sample", "prompt and image counts differ"));
    }
    let mut out = Vec::with_capacity(b * k);
    let (pw, xw) = (prompts.dims2().1, x.dims2().1);
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < b {
        let end = (start + CHUNK).min(b);
        let n = end - start;
        let mut tape = Tape::new();
        let enc = world.encoder.bind(&mut tape);
        let tokens = tape.constant(world.tokens.clone());
        let p = tape.constant(Tensor::from_parts(vec![n, pw], prompts.data()[start * pw..end * pw].to_vec()));
        let xv = tape.constant(Tensor::from_parts(vec![n, xw], x.data()[start * xw..end * xw].to_vec()));
        let l = per_sample_logits(&mut tape, &enc, tokens, p, xv, temperature)?;
        out.extend_from_slice(tape.value(l).data());
        start = end;
    }
    Ok(Tensor::from_parts(vec![b, k], out))
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Mean cross-entropy of logit rows against labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    match tape.softmax_cross_entropy(l, labels) {
        Ok(v) => tape.value(v).item(),
        Err(_) => f64::INFINITY,
    }
}

/// Accuracy of a fixed prompt on the given sample rows.
pub fn accuracy_fixed(world: &FrozenWorld, prompt: &Tensor, idx: &[usize], temperature: f64) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Empty("evaluation rows"));
    }
    let l = logits_fixed(world, prompt, &world.gather(idx), temperature)?;
    Ok(accuracy_from_logits(&l, &world.labels_of(idx)))
}

/// Full prediction for one image embedding under a fixed prompt.
pub fn predict(world: &FrozenWorld, prompt: &Tensor, embedding: &[f64], temperature: f64) -> Result<Prediction> {
    let x = Tensor::new(vec![1, embedding.len()], embedding.to_vec())?;
    let l = logits_fixed(world, prompt, &x, temperature)?;
    let p = softmax_rows(&l).into_data();
    Ok(Prediction {
        class: argmax(&p),
        probabilities: p,
        prompt: prompt.data().to_vec(),
    })
}

/// Zero-shot prediction with the manual prompt.
pub fn zero_shot_classify(world: &FrozenWorld, embedding: &[f64], temperature: f64) -> Result<Prediction> {
    predict(world, &world.manual.values, embedding, temperature)
}
