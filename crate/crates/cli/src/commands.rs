//! One function per subcommand. Each stage reads its inputs from the run
//! directory, skips artifacts that already exist and never rewrites one.

use serde::{Deserialize, Serialize};
use spg_core::eval::ablation::{default_grid, run_ablations, AblationKind};
use spg_core::eval::analysis::analyze as analyze_method;
use spg_core::eval::{evaluate_on_worlds, AnalysisMetrics, EvalReport, Method, Session, Task, TrainedMethod, Worlds};
use spg_core::prompt::DomainPromptLabel;
use spg_core::world::FrozenWorld;

use crate::error::CliResult;
use crate::store::RunDir;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisEntry {
    pub seed: u64,
    pub world_seed: u64,
    pub spg: AnalysisMetrics,
    pub conditional_concat: AnalysisMetrics,
}

fn world_path(seed: u64) -> String {
    format!("world/seed{seed}.json")
}

fn labels_path(seed: u64) -> String {
    format!("labels/seed{seed}.json")
}

fn generator_path(task: &Task) -> String {
    format!("cgan/{}/generator.json", task.key())
}

fn train_log_path(task: &Task) -> String {
    format!("cgan/{}/train_log.csv", task.key())
}

fn report_path(method: Method) -> String {
    format!("eval/report_{}.json", method.name())
}

const ANALYSIS_PATH: &str = "analyze/analysis.json";

fn note(msg: impl AsRef<str>) {
    eprintln!("spg: {}", msg.as_ref());
}

pub struct Pipeline {
    pub run: RunDir,
}

impl Pipeline {
    fn seeds(&self) -> Vec<u64> {
        self.run.config.seeds.clone()
    }

    fn num_domains(&self) -> usize {
        self.run.config.benchmark.num_domains
    }

    /// The training tasks of `seed`: the protocol's tasks, or one task over
    /// every domain for cross-dataset transfer.
    fn tasks(&self, seed: u64) -> CliResult<Vec<Task>> {
        Ok(match self.run.config.protocol.protocol() {
            Some(p) => p.tasks(self.num_domains(), &[seed])?,
            None => vec![Task {
                seed,
                sources: (0..self.num_domains()).collect(),
                targets: vec![],
            }],
        })
    }

    fn world(&self, seed: u64) -> CliResult<FrozenWorld> {
        self.run.read_json(&world_path(seed), "gen-data")
    }

    fn session(&self, seed: u64, with_labels: bool) -> CliResult<Session> {
        let mut session = Session::new(self.world(seed)?, self.run.config.pipeline.clone())?;
        if with_labels {
            let labels: Vec<DomainPromptLabel> = self.run.read_json(&labels_path(seed), "train-labels")?;
            for l in labels {
                session.insert_label(seed, l);
            }
        }
        Ok(session)
    }

    fn generator(&self, task: &Task) -> CliResult<TrainedMethod> {
        self.run.read_json(&generator_path(task), "train-cgan")
    }

    /// Fail before any work when an input of the stage is missing, naming
    /// the closest upstream subcommand.
    fn require(&self, generators: bool, labels: bool) -> CliResult<()> {
        for s in self.seeds() {
            if generators {
                for t in self.tasks(s)? {
                    self.run.read_json::<serde_json::Value>(&generator_path(&t), "train-cgan")?;
                }
            }
            if labels {
                self.run.read_json::<serde_json::Value>(&labels_path(s), "train-labels")?;
            }
            self.run.read_json::<serde_json::Value>(&world_path(s), "gen-data")?;
        }
        Ok(())
    }

    pub fn gen_data(&self) -> CliResult<()> {
        let mut worlds: Option<Worlds> = None;
        for s in self.seeds() {
            let rel = world_path(s);
            if self.run.exists(&rel) {
                continue;
            }
            if worlds.is_none() {
                worlds = Some(self.run.config.worlds()?);
            }
            let world = worlds.as_ref().expect("set above").world(s)?;
            note(format!("world for seed {s} (benchmark seed {})", world.spec.seed));
            self.run.write_json(&rel, "world", Some(s), &world)?;
        }
        Ok(())
    }

    pub fn train_labels(&self) -> CliResult<()> {
        self.require(false, false)?;
        for s in self.seeds() {
            let rel = labels_path(s);
            if self.run.exists(&rel) {
                continue;
            }
            let mut session = self.session(s, false)?;
            let domains: Vec<usize> = (0..self.num_domains()).collect();
            let labels = session.labels_for(s, &domains)?;
            for l in &labels {
                note(format!(
                    "seed {s} domain {}: label train accuracy {:.3}",
                    l.domain, l.trace.train_accuracy
                ));
            }
            self.run.write_json(&rel, "prompt_labels", Some(s), &labels)?;
        }
        Ok(())
    }

    pub fn train_cgan(&self) -> CliResult<()> {
        self.require(false, true)?;
        for s in self.seeds() {
            let mut session: Option<Session> = None;
            for task in self.tasks(s)? {
                let rel = generator_path(&task);
                if self.run.exists(&rel) {
                    continue;
                }
                if session.is_none() {
                    session = Some(self.session(s, true)?);
                }
                let trained = session.as_mut().expect("set above").train(Method::Spg, &task)?;
                let log = trained.log.as_ref().expect("generator training records a log");
                note(format!(
                    "seed {s} {}: selected epoch {}, source val accuracy {:.3}",
                    task.name(),
                    trained.selection.epoch.map_or("init".into(), |e| e.to_string()),
                    trained.selection.score.unwrap_or(f64::NAN)
                ));
                let csv = format!(
                    "# config_hash={} seed={} task={}\n{}",
                    self.run.hash,
                    s,
                    task.name(),
                    log.to_csv()
                );
                self.run.write(&train_log_path(&task), csv.as_bytes())?;
                self.run.write_json(&rel, "generator", Some(s), &trained)?;
            }
        }
        Ok(())
    }

    pub fn evaluate(&self) -> CliResult<()> {
        let methods = self.run.config.methods.clone();
        let spg = methods.contains(&Method::Spg);
        self.require(spg, methods.contains(&Method::Mix))?;
        let analysis: Option<Vec<AnalysisEntry>> = if self.run.exists(ANALYSIS_PATH) {
            Some(self.run.read_json(ANALYSIS_PATH, "analyze")?)
        } else {
            None
        };
        let classifier = &self.run.config.pipeline.classifier;
        for method in methods {
            let rel = report_path(method);
            if self.run.exists(&rel) {
                continue;
            }
            let mut results = Vec::new();
            for s in self.seeds() {
                let mut session = self.session(s, method == Method::Mix)?;
                let test_worlds = match self.run.config.protocol.protocol() {
                    Some(_) => None,
                    None => Some(self.run.config.test_worlds(&session.world)?),
                };
                for task in self.tasks(s)? {
                    let trained = match method {
                        Method::Spg => self.generator(&task)?,
                        m => session.train(m, &task)?,
                    };
                    match &test_worlds {
                        Some(w) => results.extend(evaluate_on_worlds(&trained, w, classifier)?),
                        None => results.push(session.evaluate(&trained)?),
                    }
                }
            }
            let protocol = match self.run.config.protocol.protocol() {
                Some(p) => p.name(),
                None => "cross_dataset",
            };
            let mut report = EvalReport::from_results(protocol, method, results)?;
            report.config_hash = Some(self.run.hash.clone());
            if method == Method::Spg {
                report.metrics = analysis.as_ref().and_then(|a| a.first()).map(|e| e.spg.clone());
            }
            note(format!("{method}: mean accuracy {:.4} ± {:.4}", report.mean, report.std_error));
            self.run.write(&rel.replace(".json", ".txt"), report.table().as_bytes())?;
            self.run.write_json(&rel, "eval_report", None, &report)?;
        }
        Ok(())
    }

    pub fn analyze(&self) -> CliResult<()> {
        self.require(true, false)?;
        if self.run.exists(ANALYSIS_PATH) {
            return Ok(());
        }
        let cfg = &self.run.config;
        let mut entries = Vec::new();
        for s in self.seeds() {
            let task = self.tasks(s)?.remove(0);
            let spg = self.generator(&task)?;
            let mut session = self.session(s, false)?;
            let concat = session.train(Method::ConditionalConcat, &task)?;
            let classifier = &cfg.pipeline.classifier;
            let entry = AnalysisEntry {
                seed: s,
                world_seed: session.world.spec.seed,
                spg: analyze_method(&session.world, &spg, classifier, &cfg.analysis)?,
                conditional_concat: analyze_method(&session.world, &concat, classifier, &cfg.analysis)?,
            };
            note(format!(
                "seed {s} {}: domain silhouette spg {:.4} vs conditional {:.4}; same-domain retrieval {:.3} (chance {:.3})",
                task.name(),
                entry.spg.domain_silhouette,
                entry.conditional_concat.domain_silhouette,
                entry.spg.retrieval_top1_same_domain,
                entry.spg.retrieval_chance
            ));
            entries.push(entry);
        }
        self.run.write_json(ANALYSIS_PATH, "analysis", None, &entries)
    }

    pub fn ablate(&self, kinds: &[AblationKind]) -> CliResult<()> {
        let cfg = &self.run.config;
        let mut worlds: Option<Worlds> = None;
        for &kind in kinds {
            let rel = format!("ablate/{}.json", kind.name());
            if self.run.exists(&rel) {
                continue;
            }
            if worlds.is_none() {
                worlds = Some(cfg.worlds()?);
            }
            note(format!("ablation {}", kind.name()));
            let table = run_ablations(
                worlds.as_ref().expect("set above"),
                kind,
                &default_grid(kind),
                &cfg.pipeline,
                cfg.ablation_seeds(),
                cfg.ablation.method,
            )?;
            let csv = format!("# config_hash={} ablation={}\n{}", self.run.hash, kind.name(), table.to_csv());
            self.run.write(&rel.replace(".json", ".csv"), csv.as_bytes())?;
            self.run.write_json(&rel, "ablation", None, &table)?;
        }
        Ok(())
    }

    pub fn all(&self) -> CliResult<()> {
        self.gen_data()?;
        self.train_labels()?;
        self.train_cgan()?;
        self.analyze()?;
        self.evaluate()?;
        self.ablate(&self.run.config.ablation.kinds.clone())
    }
}
