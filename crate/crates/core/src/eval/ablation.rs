//! Grid runners for the context-length, sample-fraction, prompt-design and
//! component ablations. Every grid point is a leave-one-domain-out run.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalReport, Experiment, Method, PipelineConfig, Protocol, Worlds};
use crate::error::{Error, Result};
use crate::prompt::InitMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    ContextLength,
    SampleFraction,
    PromptDesign,
    Component,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::ContextLength,
        AblationKind::SampleFraction,
        AblationKind::PromptDesign,
        AblationKind::Component,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::ContextLength => "context_length",
            AblationKind::SampleFraction => "sample_fraction",
            AblationKind::PromptDesign => "prompt_design",
            AblationKind::Component => "component",
        }
    }
}

impl FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("ablation", format!("unknown ablation {s:?}")))
    }
}

/// Rows of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// An image-conditional MLP producing the whole prompt, trained directly
    /// on cross-entropy with no prompt labels and no adversary.
    Mlp,
    Spg,
}

impl Component {
    pub fn method(self) -> Method {
        match self {
            Component::Mlp => Method::ConditionalConcat,
            Component::Spg => Method::Spg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridPoint {
    ContextLength { length: usize, init: InitMode },
    SampleFraction { fraction: f64 },
    Design { method: Method },
    Component { component: Component },
}

impl GridPoint {
    pub fn label(&self) -> String {
        match self {
            GridPoint::ContextLength { length, init } => match init {
                InitMode::TemplateProxy => format!("L={length}"),
                InitMode::Gaussian => format!("L={length} gaussian"),
            },
            GridPoint::SampleFraction { fraction } => format!("fraction={fraction}"),
            GridPoint::Design { method } => method.name().to_string(),
            GridPoint::Component { component } => match component {
                Component::Mlp => "w/ MLP".into(),
                Component::Spg => "spg".into(),
            },
        }
    }

    fn kind(&self) -> AblationKind {
        match self {
            GridPoint::ContextLength { .. } => AblationKind::ContextLength,
            GridPoint::SampleFraction { .. } => AblationKind::SampleFraction,
            GridPoint::Design { .. } => AblationKind::PromptDesign,
            GridPoint::Component { .. } => AblationKind::Component,
        }
    }
}

pub fn default_grid(kind: AblationKind) -> Vec<GridPoint> {
    match kind {
        AblationKind::ContextLength => {
            let mut g: Vec<GridPoint> = [2, 4, 8, 16]
                .into_iter()
                .map(|length| GridPoint::ContextLength {
                    length,
                    init: InitMode::TemplateProxy,
                })
                .collect();
            g.push(GridPoint::ContextLength {
                length: 4,
                init: InitMode::Gaussian,
            });
            g
        }
        AblationKind::SampleFraction => [0.2, 0.4, 0.6, 0.8, 1.0]
            .into_iter()
            .map(|fraction| GridPoint::SampleFraction { fraction })
            .collect(),
        AblationKind::PromptDesign => Method::DESIGNS
            .into_iter()
            .map(|method| GridPoint::Design { method })
            .collect(),
        AblationKind::Component => [Component::Mlp, Component::Spg]
            .into_iter()
            .map(|component| GridPoint::Component { component })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub point: GridPoint,
    pub label: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// One line per grid point: mean, standard error, manual baseline and
    /// the per-task means.
    pub fn to_csv(&self) -> String {
        let tasks: Vec<String> = self
            .rows
            .first()
            .map(|r| r.report.summary.iter().map(|s| s.name.clone()).collect())
            .unwrap_or_default();
        let mut out = String::from("point,method,mean,std_error,manual_mean");
        for t in &tasks {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.label, r.report.method, r.report.mean, r.report.std_error, r.report.manual_mean
            );
            for s in &r.report.summary {
                let _ = write!(out, ",{}", s.mean);
            }
            out.push('\n');
        }
        out
    }
}

/// Run every grid point as a leave-one-domain-out evaluation. `method` is
/// the design used by the context-length and sample-fraction grids; the
/// other grids name their own designs. Prompt-design and component rows
/// share one experiment, so they see identical splits and prompt labels.
pub fn run_ablations(
    worlds: &Worlds,
    kind: AblationKind,
    grid: &[GridPoint],
    cfg: &PipelineConfig,
    seeds: &[u64],
    method: Method,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Empty("ablation grid"));
    }
    let mut shared = Experiment::new(worlds.clone(), cfg.clone())?;
    let mut rows = Vec::with_capacity(grid.len());
    for point in grid {
        let label = point.label();
        let ctx = |e: Error| Error::Grid {
            point: label.clone(),
            source: Box::new(e),
        };
        if point.kind() != kind {
            return Err(ctx(Error::invalid("ablation", format!("grid point in a {} grid", kind.name()))));
        }
        let report = match *point {
            GridPoint::ContextLength { length, init } => {
                let mut c = cfg.clone();
                c.stage_one.init = init;
                worlds
                    .with_context_len(length)
                    .and_then(|w| Experiment::new(w, c))
                    .and_then(|mut e| e.run(Protocol::Lodo, method, seeds))
            }
            GridPoint::SampleFraction { fraction } => {
                let mut c = cfg.clone();
                c.train_fraction = fraction;
                Experiment::new(worlds.clone(), c).and_then(|mut e| e.run(Protocol::Lodo, method, seeds))
            }
            GridPoint::Design { method } => shared.run(Protocol::Lodo, method, seeds),
            GridPoint::Component { component } => shared.run(Protocol::Lodo, component.method(), seeds),
        }
        .map_err(ctx)?;
        rows.push(AblationRow {
            point: *point,
            label,
            report,
        });
    }
    Ok(AblationTable { kind, rows })
}
