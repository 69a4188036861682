//! Experiment configuration: a TOML file with `key=value` overrides, hashed
//! so every artifact can name the exact configuration that produced it.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::ablation::AblationKind;
use crate::eval::analysis::AnalysisConfig;
use crate::eval::{Method, PipelineConfig, Protocol, Worlds};
use crate::world::{generate_benchmark, transfer_world, BenchmarkSpec, FrozenWorld};

/// Which evaluation protocol `evaluate` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolChoice {
    Lodo,
    SingleSource,
    CrossDataset,
}

impl ProtocolChoice {
    pub fn protocol(self) -> Option<Protocol> {
        match self {
            ProtocolChoice::Lodo => Some(Protocol::Lodo),
            ProtocolChoice::SingleSource => Some(Protocol::SingleSource),
            ProtocolChoice::CrossDataset => None,
        }
    }
}

/// A cross-dataset test world: a new draw (new classes) that keeps the
/// training world's encoder, with every domain rotated further by
/// `extra_rotation` radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestWorldSpec {
    pub seed: u64,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub extra_rotation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossDatasetConfig {
    pub test_worlds: Vec<TestWorldSpec>,
}

impl Default for CrossDatasetConfig {
    fn default() -> Self {
        CrossDatasetConfig {
            test_worlds: vec![
                TestWorldSpec {
                    seed: 1000,
                    num_classes: None,
                    extra_rotation: 0.2,
                },
                TestWorldSpec {
                    seed: 1000,
                    num_classes: None,
                    extra_rotation: 0.6,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub kinds: Vec<AblationKind>,
    /// Design used by the context-length and sample-fraction grids.
    pub method: Method,
    /// Seeds for the ablation grids; the experiment seeds when absent.
    pub seeds: Option<Vec<u64>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            kinds: AblationKind::ALL.to_vec(),
            method: Method::Spg,
            seeds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    /// Give each seed its own draw of the benchmark (seed `benchmark.seed + s`).
    pub replicate_worlds: bool,
    pub pipeline: PipelineConfig,
    pub protocol: ProtocolChoice,
    /// Designs `evaluate` reports on. `spg` is read from `train-cgan` output.
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub analysis: AnalysisConfig,
    pub ablation: AblationConfig,
    pub cross_dataset: CrossDatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            benchmark: BenchmarkSpec::default(),
            replicate_worlds: true,
            pipeline: PipelineConfig::default(),
            protocol: ProtocolChoice::Lodo,
            methods: vec![Method::Manual, Method::Mix, Method::All, Method::Spg],
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            analysis: AnalysisConfig::default(),
            ablation: AblationConfig::default(),
            cross_dataset: CrossDatasetConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Apply `a.b.c=value` to a TOML table. Values are read as TOML when they
/// parse (numbers, booleans, arrays, inline tables) and as strings otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid("override", format!("{assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid("override", format!("bad key {key:?}")));
    }
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let next = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::invalid("override", format!("{key}: {seg} is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text, apply overrides, then validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::invalid("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid("config", e.to_string()))
    }

    /// Check every section and report all offending keys at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |key: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{key}: {e}"));
            }
        };
        check("benchmark", self.benchmark.validate());
        check("pipeline", self.pipeline.validate());
        if self.seeds.is_empty() {
            problems.push("seeds: must not be empty".into());
        }
        if self.methods.is_empty() {
            problems.push("methods: must not be empty".into());
        }
        if self.analysis.points_per_domain < 2 || self.analysis.queries_per_domain == 0 || self.analysis.top_k == 0 {
            problems.push("analysis: points_per_domain >= 2, queries_per_domain >= 1 and top_k >= 1 required".into());
        }
        if matches!(&self.ablation.seeds, Some(s) if s.is_empty()) {
            problems.push("ablation.seeds: must not be empty when given".into());
        }
        if self.protocol == ProtocolChoice::CrossDataset && self.cross_dataset.test_worlds.is_empty() {
            problems.push("cross_dataset.test_worlds: needed by the cross_dataset protocol".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid("config", problems.join("; ")))
        }
    }

    /// The config as recorded in artifacts: everything except where the
    /// artifacts are written, so moving a run does not change its identity.
    pub fn provenance(&self) -> ExperimentConfig {
        ExperimentConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON form of [`Self::provenance`].
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.provenance()).expect("config serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn worlds(&self) -> Result<Worlds> {
        Ok(if self.replicate_worlds {
            Worlds::Replicated(self.benchmark.clone())
        } else {
            Worlds::Fixed(generate_benchmark(&self.benchmark)?)
        })
    }

    pub fn ablation_seeds(&self) -> &[u64] {
        self.ablation.seeds.as_deref().unwrap_or(&self.seeds)
    }

    /// Cross-dataset test worlds built on `train`'s encoder.
    pub fn test_worlds(&self, train: &FrozenWorld) -> Result<Vec<FrozenWorld>> {
        let angles = train.spec.domain_angles();
        self.cross_dataset
            .test_worlds
            .iter()
            .map(|t| {
                let spec = BenchmarkSpec {
                    seed: t.seed,
                    num_classes: t.num_classes.unwrap_or(train.spec.num_classes),
                    rotation_angles: Some(angles.iter().map(|a| a + t.extra_rotation).collect()),
                    ..train.spec.clone()
                };
                transfer_world(train, &spec)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::from_toml(
            "",
            &[
                "pipeline.cgan.epochs=6".into(),
                "seeds=[4, 5]".into(),
                "protocol=single_source".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pipeline.cgan.epochs, 6);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.protocol, ProtocolChoice::SingleSource);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = ExperimentConfig::from_toml("[pipeline]\nlearning_rate = 1.0\n", &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = ExperimentConfig::from_toml("", &["benchmark.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn validation_lists_every_offending_key() {
        let err = ExperimentConfig::from_toml("seeds = []\nmethods = []\n", &[]).unwrap_err().to_string();
        assert!(err.contains("seeds") && err.contains("methods"), "{err}");
    }
}
