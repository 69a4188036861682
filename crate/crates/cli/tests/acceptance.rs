//! End-to-end acceptance run: one PASS/FAIL line per criterion, computed
//! on the default benchmark with the default configuration.

#[path = "../../core/tests/support/grad_suite.rs"]
mod grad_suite;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use spg_core::cgan::{discriminator_losses, generator_loss, CganConfig, ClipCaps, Discriminator, Generator};
use spg_core::classify::ClassifierConfig;
use spg_core::config::ExperimentConfig;
use spg_core::eval::ablation::{default_grid, run_ablations, AblationKind, GridPoint};
use spg_core::eval::analysis::analyze;
use spg_core::eval::{lodo_tasks, AnalysisMetrics, Experiment, Method, PipelineConfig, TaskResult, TrainedMethod};
use spg_core::nn::MlpVars;
use spg_core::optim::{cosine_warmup_lr, AdamW, AdamWConfig, ParamGroup};
use spg_core::prompt::DomainPromptLabel;
use spg_core::world::FrozenWorld;
use spg_core::{Tape, Tensor};

const LODO_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SELECTION_SEEDS: [u64; 3] = [0, 1, 2];
const FRACTION_SEEDS: [u64; 2] = [0, 1];

struct Outcome {
    criterion: u8,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Report(Vec<Outcome>);

impl Report {
    fn record(&mut self, criterion: u8, pass: bool, detail: String) {
        println!("{} criterion {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push(Outcome {
            criterion,
            pass,
            detail,
        });
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Everything the leave-one-domain-out run produces, per seed.
struct SeedRun {
    world: FrozenWorld,
    labels: Vec<DomainPromptLabel>,
    label_times: Vec<Duration>,
    results: BTreeMap<Method, Vec<TaskResult>>,
    spg: Vec<TrainedMethod>,
    concat: Vec<TrainedMethod>,
    spg_time: Duration,
}

fn lodo_runs(cfg: &ExperimentConfig) -> BTreeMap<u64, SeedRun> {
    let mut exp = Experiment::new(cfg.worlds().unwrap(), cfg.pipeline.clone()).unwrap();
    let mut runs = BTreeMap::new();
    for seed in LODO_SEEDS {
        let session = exp.session(seed).unwrap();
        let domains: Vec<usize> = (0..session.world.num_domains()).collect();
        let mut label_times = Vec::new();
        for &d in &domains {
            let t = Instant::now();
            session.label(seed, d).unwrap();
            label_times.push(t.elapsed());
        }
        let labels = session.labels_for(seed, &domains).unwrap();
        let tasks = lodo_tasks(domains.len(), &[seed]).unwrap();
        let mut results = BTreeMap::new();
        let (mut spg, mut concat) = (Vec::new(), Vec::new());
        let mut spg_time = Duration::ZERO;
        for method in Method::DESIGNS {
            let mut rs = Vec::new();
            for task in &tasks {
                let t = Instant::now();
                let trained = session.train(method, task).unwrap();
                if method == Method::Spg {
                    spg_time += t.elapsed();
                }
                rs.push(session.evaluate(&trained).unwrap());
                match method {
                    Method::Spg => spg.push(trained),
                    Method::ConditionalConcat => concat.push(trained),
                    _ => {}
                }
            }
            results.insert(method, rs);
        }
        let line: Vec<String> = results
            .iter()
            .map(|(m, r)| format!("{m}={:.3}", mean(r.iter().map(|t| t.accuracy))))
            .collect();
        println!("  seed {seed}: {}", line.join(" "));
        runs.insert(
            seed,
            SeedRun {
                world: session.world.clone(),
                labels,
                label_times,
                results,
                spg,
                concat,
                spg_time,
            },
        );
    }
    runs
}

fn method_mean(runs: &BTreeMap<u64, SeedRun>, method: Method) -> f64 {
    mean(runs.values().flat_map(|r| r.results[&method].iter().map(|t| t.accuracy)))
}

fn criterion_1(report: &mut Report) {
    let start = Instant::now();
    let cases = grad_suite::all_cases();
    let elapsed = start.elapsed();
    let (worst_name, worst) = cases
        .iter()
        .fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.as_str(), *e) } else { acc });
    let pass = worst < grad_suite::TOLERANCE && elapsed < Duration::from_secs(10);
    report.record(
        1,
        pass,
        format!(
            "{} gradient checks (every op, Stage I loss, both Stage II losses), worst {worst:.2e} ({worst_name}) with h={:e}, {:.2?}",
            cases.len(),
            grad_suite::STEP,
            elapsed
        ),
    );
}

fn criterion_2(report: &mut Report, runs: &BTreeMap<u64, SeedRun>, classifier: &ClassifierConfig) {
    let run = &runs[&0];
    let w = &run.world;
    let cfg = CganConfig::default();
    let g = Generator::init(w, &cfg, None, 0);
    let mut zero_at_target = true;
    for (value, expect) in [(cfg.real_target, [0.0, 1.0, 0.0]), (cfg.fake_target, [1.0, 0.0, 1.0])] {
        let mut d = Discriminator::init(w, &cfg, 0);
        d.net.out.weight.data_mut().fill(0.0);
        d.net.out.bias.data_mut().fill(value);
        let x = w.gather(&[0, 1, 2]);
        let z = Tensor::zeros(&[3, cfg.z_dim]);
        let fake = g.generate(&z, &x).unwrap();
        let mut t = Tape::new();
        let dv = MlpVars::bind(&mut t, &d.net, false);
        let gv = MlpVars::bind(&mut t, &g.net, false);
        let r = [t.constant(fake.clone()), t.constant(x.clone())];
        let f = [t.constant(fake), t.constant(x.clone())];
        let (lr, lf) = discriminator_losses(&mut t, &d, &dv, r, f, &cfg).unwrap();
        let (zv, xv) = (t.constant(z), t.constant(x));
        let lg = generator_loss(&mut t, &g, &gv, &d, &dv, zv, xv, &cfg).unwrap();
        zero_at_target &= [t.value(lr).item(), t.value(lf).item(), t.value(lg).item()] == expect;
    }
    let mut iterations = 0;
    let mut identity = true;
    for r in runs.values() {
        for s in &r.spg {
            for it in &s.log.as_ref().unwrap().iterations {
                iterations += 1;
                identity &= it.l_disc == it.l_real + it.l_fake;
            }
        }
    }
    let mut worst_sum: f64 = 0.0;
    for s in &run.spg {
        let idx = w.domain_indices(s.task.targets[0]);
        let p = s.source.probabilities(w, &w.gather(&idx), classifier).unwrap();
        for i in 0..p.dims2().0 {
            worst_sum = worst_sum.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    report.record(
        2,
        zero_at_target && identity && worst_sum <= 1e-9,
        format!(
            "losses zero at targets: {zero_at_target}; L_disc = L_real + L_fake at all {iterations} logged iterations: {identity}; max |sum(p) - 1| = {worst_sum:.1e}"
        ),
    );
}

fn criterion_3(report: &mut Report, runs: &BTreeMap<u64, SeedRun>) {
    let caps = ClipCaps::default();
    let midpoints = caps.disc_general == 0.275
        && caps.disc_special == 5.0
        && caps.gen_weights == 0.0275
        && caps.gen_universal_bias == 2.75e-7
        && caps.gen_special_bias == 2.75;
    let (mut steps, mut violations, mut clipped) = (0, 0, 0);
    for r in runs.values() {
        for s in &r.spg {
            for it in &s.log.as_ref().unwrap().iterations {
                for n in &it.norms {
                    steps += 1;
                    violations += usize::from(n.post_clip > n.cap);
                    clipped += usize::from(n.pre_clip > n.cap);
                }
            }
        }
    }
    report.record(
        3,
        midpoints && violations == 0 && steps > 0,
        format!(
            "{steps} group updates checked from the training logs, {violations} above cap ({clipped} needed clipping); midpoint caps: {midpoints}"
        ),
    );
}

fn criterion_4(report: &mut Report, runs: &BTreeMap<u64, SeedRun>, pipeline: &PipelineConfig) {
    let run = &runs[&0];
    let w = &run.world;
    let spec_ok = w.spec.num_domains == 4 && w.spec.num_classes == 5 && w.spec.embed_dim == 16 && w.spec.noise_std == 0.15;
    let manual = spg_core::eval::PromptSource::Fixed { prompt: w.manual_prompt() };
    let splits = split_of(w, pipeline, 0);
    let mut pass = spec_ok && pipeline.stage_one.epochs <= 300;
    let mut parts = Vec::new();
    for (l, time) in run.labels.iter().zip(&run.label_times) {
        let train = &splits[l.domain].train;
        let man = manual.accuracy(w, train, &pipeline.classifier).unwrap();
        let ok = l.trace.train_accuracy >= 0.90 && l.trace.train_accuracy > man && *time < Duration::from_secs(30);
        pass &= ok;
        parts.push(format!(
            "d{} {:.3} vs manual {:.3} in {:.1?}",
            l.domain, l.trace.train_accuracy, man, time
        ));
    }
    report.record(
        4,
        pass,
        format!(
            "label train accuracy within {} epochs: {}",
            pipeline.stage_one.epochs,
            parts.join("; ")
        ),
    );
}

fn split_of(w: &FrozenWorld, pipeline: &PipelineConfig, seed: u64) -> Vec<spg_core::world::DomainSplit> {
    spg_core::world::split_train_val(w, pipeline.val_fraction, seed).unwrap()
}

fn criterion_5(report: &mut Report, runs: &BTreeMap<u64, SeedRun>) {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SELECTION_SEEDS {
        let r = &runs[&seed];
        let gen = mean(r.spg.iter().map(|s| s.selection.score.unwrap()));
        let lab = mean(r.spg.iter().map(|s| {
            mean(s.task.sources.iter().map(|&d| r.labels[d].trace.val_accuracy))
        }));
        let ok = (gen - lab).abs() <= 0.05 && r.spg_time < Duration::from_secs(120);
        pass &= ok;
        parts.push(format!(
            "seed {seed}: generator {gen:.3} vs labels {lab:.3} ({:.1?})",
            r.spg_time
        ));
    }
    report.record(5, pass, format!("pooled source-val accuracy at the selected checkpoint: {}", parts.join("; ")));
}

fn criterion_6(report: &mut Report, runs: &BTreeMap<u64, SeedRun>) {
    let m: BTreeMap<Method, f64> = Method::DESIGNS.iter().map(|&d| (d, method_mean(runs, d))).collect();
    let spg = m[&Method::Spg];
    let manual = m[&Method::Manual];
    let learned_ok = Method::DESIGNS
        .iter()
        .filter(|&&d| d != Method::Manual)
        .all(|d| m[d] >= manual);
    let pass = spg >= m[&Method::Mix] - 0.01 && spg >= m[&Method::All] - 0.01 && learned_ok;
    let line: Vec<String> = m.iter().map(|(d, v)| format!("{d} {v:.4}")).collect();
    report.record(6, pass, format!("{}-seed LODO means: {}", LODO_SEEDS.len(), line.join(", ")));
}

fn criterion_7(report: &mut Report, runs: &BTreeMap<u64, SeedRun>, cfg: &ExperimentConfig) {
    let mut spg: Vec<AnalysisMetrics> = Vec::new();
    let mut concat: Vec<AnalysisMetrics> = Vec::new();
    for r in runs.values() {
        let c = &cfg.pipeline.classifier;
        spg.push(analyze(&r.world, &r.spg[0], c, &cfg.analysis).unwrap());
        concat.push(analyze(&r.world, &r.concat[0], c, &cfg.analysis).unwrap());
    }
    let s = mean(spg.iter().map(|m| m.domain_silhouette));
    let c = mean(concat.iter().map(|m| m.domain_silhouette));
    let retrieval = mean(spg.iter().map(|m| m.retrieval_top1_same_domain));
    let chance = spg[0].retrieval_chance;
    let pass = s > 0.0 && s >= c && retrieval >= 2.0 * chance;
    report.record(
        7,
        pass,
        format!(
            "task {}, {}-seed means: domain silhouette spg {s:.4} vs conditional {c:.4}; same-domain top-1 retrieval {retrieval:.3} vs 2x chance {:.3}",
            spg[0].task,
            spg.len(),
            2.0 * chance
        ),
    );
}

fn criterion_8(report: &mut Report) {
    let spec = CganConfig::default().schedule();
    let at = |e: f64| cosine_warmup_lr(&spec, e).unwrap();
    let mid = spec.warmup_epochs as f64 + (spec.total_epochs - spec.warmup_epochs) as f64 / 2.0;
    let sched_ok = at(0.0) == 1e-5
        && (at(spec.warmup_epochs as f64) - spec.base_lr).abs() <= 1e-15
        && (at(mid) - 0.5 * spec.base_lr).abs() <= 1e-15;

    let cfg = AdamWConfig::default();
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let mut worst: f64 = 0.0;
    for (p0, g1, g2) in [(0.5, -3.0, 0.25), (-1.2, 0.01, -4.0), (2.0, 7.5, 7.5)] {
        let mut p = Tensor::vector(vec![p0]).unwrap().with_grad();
        let mut opt = AdamW::new(cfg);
        p.accumulate_grad(&[g1]).unwrap();
        opt.step(&mut [ParamGroup::new("p", vec![&mut p])]).unwrap();
        let p1 = p0 * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * g1 / (g1.abs() + cfg.eps);
        worst = worst.max((p.data()[0] - p1).abs());
        p.zero_grad();
        p.accumulate_grad(&[g2]).unwrap();
        opt.step(&mut [ParamGroup::new("p", vec![&mut p])]).unwrap();
        let m = ((1.0 - b1) * (b1 * g1 + g2)) / (1.0 - b1 * b1);
        let v = ((1.0 - b2) * (b2 * g1 * g1 + g2 * g2)) / (1.0 - b2 * b2);
        let p2 = p1 * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * m / (v.sqrt() + cfg.eps);
        worst = worst.max((p.data()[0] - p2).abs());
    }
    report.record(
        8,
        sched_ok && worst <= 1e-10,
        format!(
            "lr(0) = {:e}, lr({}) = {:e}, lr({mid}) = {:e} (base {:e}); AdamW two-step closed form error {worst:.1e}",
            at(0.0),
            spec.warmup_epochs,
            at(spec.warmup_epochs as f64),
            at(mid),
            spec.base_lr
        ),
    );
}

fn run_all(out: &Path) -> std::process::Output {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/default.toml");
    Command::new(env!("CARGO_BIN_EXE_spg"))
        .args(["--config", config, "--out"])
        .arg(out)
        .args([
            "--seed",
            "0",
            "--set",
            "pipeline.cgan.epochs=10",
            "--set",
            "ablation.kinds=[\"component\"]",
            "--set",
            "pipeline.stage_one.epochs=60",
            "all",
        ])
        .output()
        .expect("spg runs")
}

fn criterion_9(report: &mut Report) {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outs: Vec<_> = dirs.iter().map(|d| run_all(d.path())).collect();
    let ok_exit = outs.iter().all(|o| o.status.success());
    let run_dir = |i: usize| {
        let line = String::from_utf8_lossy(&outs[i].stdout).trim().to_string();
        std::path::PathBuf::from(line)
    };
    let mut compared = 0;
    let mut identical = ok_exit;
    if ok_exit {
        let (a, b) = (run_dir(0), run_dir(1));
        for rel in ["eval/report_spg.json", "eval/report_manual.json", "eval/report_mix.json", "eval/report_all.json"]
            .into_iter()
            .map(String::from)
            .chain((0..4).map(|h| format!("cgan/seed0_held_out{h}/train_log.csv")))
        {
            let x = std::fs::read(a.join(&rel)).unwrap();
            let y = std::fs::read(b.join(&rel)).unwrap();
            identical &= x == y;
            compared += 1;
        }
    } else {
        for o in &outs {
            eprintln!("{}", String::from_utf8_lossy(&o.stderr));
        }
    }
    report.record(
        9,
        identical && compared == 8,
        format!("two `spg all` runs: {compared} EvalReport/TrainLog files compared, byte-identical: {identical}"),
    );
}

fn criterion_10(report: &mut Report, runs: &BTreeMap<u64, SeedRun>, cfg: &ExperimentConfig, suite: Instant) {
    let grid = default_grid(AblationKind::SampleFraction);
    let table = run_ablations(
        &cfg.worlds().unwrap(),
        AblationKind::SampleFraction,
        &grid,
        &cfg.pipeline,
        &FRACTION_SEEDS,
        Method::Spg,
    )
    .unwrap();
    let acc = |f: f64| {
        table
            .rows
            .iter()
            .find(|r| matches!(r.point, GridPoint::SampleFraction { fraction } if fraction == f))
            .unwrap()
    };
    let last = table.rows.last().unwrap();
    let standard: Vec<f64> = FRACTION_SEEDS
        .iter()
        .flat_map(|s| runs[s].results[&Method::Spg].iter().map(|t| t.accuracy))
        .collect();
    let grid_final: Vec<f64> = last.report.tasks.iter().map(|t| t.accuracy).collect();
    let equals_standard = matches!(last.point, GridPoint::SampleFraction { fraction } if fraction == 1.0)
        && grid_final == standard;
    let (hi, lo) = (acc(1.0).report.mean, acc(0.2).report.mean);
    let elapsed = suite.elapsed();
    let curve: Vec<String> = table.rows.iter().map(|r| format!("{} {:.3}", r.label, r.report.mean)).collect();
    report.record(
        10,
        equals_standard && hi >= lo && elapsed < Duration::from_secs(600),
        format!(
            "seeds {FRACTION_SEEDS:?}: {}; final point equals the standard run: {equals_standard}; suite time {:.0?}",
            curve.join(", "),
            elapsed
        ),
    );
}

#[test]
fn acceptance() {
    let suite = Instant::now();
    let cfg = ExperimentConfig::default();
    let mut report = Report::default();
    criterion_1(&mut report);
    criterion_8(&mut report);
    let runs = lodo_runs(&cfg);
    criterion_2(&mut report, &runs, &cfg.pipeline.classifier);
    criterion_3(&mut report, &runs);
    criterion_4(&mut report, &runs, &cfg.pipeline);
    criterion_5(&mut report, &runs);
    criterion_6(&mut report, &runs);
    criterion_7(&mut report, &runs, &cfg);
    criterion_9(&mut report);
    criterion_10(&mut report, &runs, &cfg, suite);

    report.0.sort_by_key(|o| o.criterion);
    println!("\nacceptance summary");
    for o in &report.0 {
        println!("{} criterion {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.criterion, o.detail);
    }
    let failed: Vec<u8> = report.0.iter().filter(|o| !o.pass).map(|o| o.criterion).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
