//! Prompt clustering (silhouette) and prompt-to-image retrieval.

use serde::{Deserialize, Serialize};

use super::{analysis_seed, AnalysisMetrics, PromptSource, TrainedMethod};
use crate::classify::{self, ClassifierConfig};
use crate::error::{Error, Result};
use crate::rng::{rng_for, shuffle};
use crate::world::FrozenWorld;

/// A flattened prompt with the domain and class of the image it was made for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrompt {
    pub prompt: Vec<f64>,
    pub domain: usize,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub by_domain: f64,
    pub by_class: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their group score 0, as does a point whose `a` and `b` are both 0.
pub fn silhouette(points: &[Vec<f64>], groups: &[usize]) -> Result<f64> {
    let n = points.len();
    if groups.len() != n {
        return Err(Error::dim("silhouette", format!("{n} points, {} group ids", groups.len())));
    }
    if n < 2 {
        return Err(Error::invalid("silhouette", "needs at least 2 points"));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::invalid("silhouette", "needs at least 2 groups"));
    }
    let slot = |g: usize| ids.binary_search(&g).unwrap_or(0);
    let mut size = vec![0usize; ids.len()];
    groups.iter().for_each(|&g| size[slot(g)] += 1);
    if size.iter().all(|&s| s == 1) {
        return Err(Error::invalid("silhouette", "every group is a singleton"));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; ids.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[slot(groups[j])] += dist(&points[i], &points[j]);
            }
        }
        let own = slot(groups[i]);
        if size[own] == 1 {
            continue;
        }
        let a = sums[own] / (size[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&g| g != own)
            .map(|g| sums[g] / size[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette of the prompts grouped by domain and, separately, by class.
pub fn domain_cluster_score(prompts: &[LabeledPrompt]) -> Result<ClusterScores> {
    let pts: Vec<Vec<f64>> = prompts.iter().map(|p| p.prompt.clone()).collect();
    let dom: Vec<usize> = prompts.iter().map(|p| p.domain).collect();
    let cls: Vec<usize> = prompts.iter().map(|p| p.class).collect();
    Ok(ClusterScores {
        by_domain: silhouette(&pts, &dom)?,
        by_class: silhouette(&pts, &cls)?,
    })
}

/// Prompts produced by `source` for the given sample rows.
pub fn generated_prompts(
    world: &FrozenWorld,
    source: &PromptSource,
    idx: &[usize],
    cfg: &ClassifierConfig,
) -> Result<Vec<LabeledPrompt>> {
    let p = source.prompts(&world.gather(idx), cfg.noise)?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(r, &i)| LabeledPrompt {
            prompt: p.row(r).to_vec(),
            domain: world.domains[i],
            class: world.labels[i],
        })
        .collect())
}

/// N-way K-shot library layout: `n_way` classes (always including the
/// query's), `k_shot` images per class from every domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySpec {
    pub n_way: usize,
    pub k_shot: usize,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        LibrarySpec { n_way: 1, k_shot: 2 }
    }
}

/// Draw the `N·K·M` library for `query`, never including the query itself.
pub fn build_library(world: &FrozenWorld, spec: LibrarySpec, query: usize, seed: u64) -> Result<Vec<usize>> {
    let k = world.num_classes();
    if spec.n_way == 0 || spec.k_shot == 0 || spec.n_way > k {
        return Err(Error::invalid(
            "library",
            format!("{}-way {}-shot with {k} classes", spec.n_way, spec.k_shot),
        ));
    }
    let qc = world.labels[query];
    let mut rng = rng_for(seed, query as u64);
    let mut others: Vec<usize> = (0..k).filter(|&c| c != qc).collect();
    shuffle(&mut rng, &mut others);
    let mut classes = vec![qc];
    classes.extend_from_slice(&others[..spec.n_way - 1]);
    let mut lib = Vec::with_capacity(spec.n_way * spec.k_shot * world.num_domains());
    for m in 0..world.num_domains() {
        let rows = world.domain_indices(m);
        for &c in &classes {
            let mut pool: Vec<usize> = rows.iter().copied().filter(|&i| i != query && world.labels[i] == c).collect();
            if pool.len() < spec.k_shot {
                return Err(Error::invalid(
                    "library",
                    format!("domain {m} class {c} has {} candidates for {} shots", pool.len(), spec.k_shot),
                ));
            }
            shuffle(&mut rng, &mut pool);
            lib.extend_from_slice(&pool[..spec.k_shot]);
        }
    }
    Ok(lib)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub sample: usize,
    pub domain: usize,
    pub class: usize,
    /// Probability of the query's class.
    pub score: f64,
    /// Its logarithm, which is what the ranking uses: at small temperatures
    /// many probabilities round to exactly 1.
    pub log_score: f64,
    pub same_domain: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: usize,
    pub query_domain: usize,
    pub hits: Vec<RetrievalHit>,
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[k] - lse
}

/// Score every library image by the query-class probability under the
/// query's own prompt and return the `top_k` best.
pub fn prompt_image_retrieval(
    world: &FrozenWorld,
    source: &PromptSource,
    query: usize,
    library: &[usize],
    top_k: usize,
    cfg: &ClassifierConfig,
) -> Result<RetrievalResult> {
    if library.is_empty() || top_k == 0 || top_k > library.len() {
        return Err(Error::invalid(
            "retrieval",
            format!("top {top_k} from a library of {}", library.len()),
        ));
    }
    if library.contains(&query) {
        return Err(Error::invalid("retrieval", "the library contains the query"));
    }
    let row = source.prompts(&world.gather(&[query]), cfg.noise)?;
    let logits = classify::logits_fixed(world, &row, &world.gather(library), cfg.temperature)?;
    let (qd, qc) = (world.domains[query], world.labels[query]);
    let mut hits: Vec<RetrievalHit> = library
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let log_score = log_softmax_at(logits.row(r), qc);
            RetrievalHit {
                sample: i,
                domain: world.domains[i],
                class: world.labels[i],
                score: log_score.exp(),
                log_score,
                same_domain: world.domains[i] == qd,
            }
        })
        .collect();
    hits.sort_by(|a, b| b.log_score.total_cmp(&a.log_score).then(a.sample.cmp(&b.sample)));
    hits.truncate(top_k);
    Ok(RetrievalResult {
        query,
        query_domain: qd,
        hits,
    })
}

/// Settings for the clustering and retrieval analyses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Images per domain whose prompts enter the silhouette.
    pub points_per_domain: usize,
    /// Retrieval queries per domain.
    pub queries_per_domain: usize,
    pub library: LibrarySpec,
    pub top_k: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            points_per_domain: 60,
            queries_per_domain: 25,
            library: LibrarySpec::default(),
            top_k: 2,
        }
    }
}

/// The first `n` rows of a seeded shuffle of each domain.
fn per_domain_sample(world: &FrozenWorld, n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut out = Vec::new();
    for m in 0..world.num_domains() {
        let mut rows = world.domain_indices(m);
        shuffle(&mut rng_for(seed, stream + m as u64), &mut rows);
        rows.truncate(n);
        out.extend(rows);
    }
    out
}

/// Fraction of queries whose best retrieved image shares the query's domain.
pub fn same_domain_top1_rate(
    world: &FrozenWorld,
    source: &PromptSource,
    queries: &[usize],
    library: LibrarySpec,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Empty("retrieval queries"));
    }
    let mut hits = 0usize;
    for &q in queries {
        let lib = build_library(world, library, q, seed)?;
        let r = prompt_image_retrieval(world, source, q, &lib, 1, cfg)?;
        hits += usize::from(r.hits[0].same_domain);
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Silhouette and retrieval metrics for one trained task, over images from
/// every domain including the held-out ones.
pub fn analyze(
    world: &FrozenWorld,
    trained: &TrainedMethod,
    classifier: &ClassifierConfig,
    cfg: &AnalysisConfig,
) -> Result<AnalysisMetrics> {
    let seed = analysis_seed(trained.task.seed);
    let pts = per_domain_sample(world, cfg.points_per_domain, seed, 0);
    let scores = domain_cluster_score(&generated_prompts(world, &trained.source, &pts, classifier)?)?;
    let queries = per_domain_sample(world, cfg.queries_per_domain, seed, 1000);
    let rate = same_domain_top1_rate(world, &trained.source, &queries, cfg.library, classifier, seed)?;
    Ok(AnalysisMetrics {
        task: trained.task.name(),
        domain_silhouette: scores.by_domain,
        class_silhouette: scores.by_class,
        retrieval_top1_same_domain: rate,
        retrieval_chance: 1.0 / world.num_domains() as f64,
    })
}
