//! Ablation grids: mixture weighting, squeeze-excitation score activation,
//! and component removal.

use std::fmt;
use std::str::FromStr;

use adamct::blocks::{MixtureMode, ScoreActivation};
use adamct::model::ModelConfig;
use adamct::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Mixture,
    Seatt,
    Components,
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "mixture" => Ok(GridKind::Mixture),
            "seatt" => Ok(GridKind::Seatt),
            "components" => Ok(GridKind::Components),
            other => Err(Error::Config(format!(
                "unknown grid `{other}` (expected mixture, seatt or components)"
            ))),
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridKind::Mixture => "mixture",
            GridKind::Seatt => "seatt",
            GridKind::Components => "components",
        })
    }
}

/// One grid row: a named set of model overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    /// Setting of the local (convolution) branch as shown in the report.
    pub local: String,
    /// Setting of the global (attention) branch as shown in the report.
    pub global: String,
    pub model: ModelConfig,
}

fn cell(name: &str, local: &str, global: &str, base: &ModelConfig, patch: impl FnOnce(&mut ModelConfig)) -> Cell {
    let mut model = base.clone();
    patch(&mut model);
    Cell {
        name: name.to_string(),
        local: local.to_string(),
        global: global.to_string(),
        model,
    }
}

pub fn grid_cells(kind: GridKind, base: &ModelConfig) -> Vec<Cell> {
    match kind {
        GridKind::Mixture => {
            let mut cells = vec![cell("adaptive", "adaptive", "adaptive", base, |m| {
                m.mixture = MixtureMode::Adaptive;
            })];
            for w in [1.0, 0.8, 0.5, 0.2, 0.0] {
                cells.push(cell(
                    &format!("fixed_{w:.1}"),
                    &format!("x{w:.1}"),
                    &format!("x{:.1}", 1.0 - w),
                    base,
                    |m| m.mixture = MixtureMode::Fixed(w),
                ));
            }
            cells
        }
        GridKind::Seatt => {
            use ScoreActivation::{Sigmoid, Softmax};
            [(Softmax, Softmax), (Sigmoid, Softmax), (Softmax, Sigmoid), (Sigmoid, Sigmoid)]
                .into_iter()
                .enumerate()
                .map(|(i, (local, global))| {
                    cell(
                        &format!("setting_{}", i + 1),
                        &local.to_string(),
                        &global.to_string(),
                        base,
                        |m| {
                            m.seatt_local = local;
                            m.seatt_global = global;
                        },
                    )
                })
                .collect()
        }
        GridKind::Components => vec![
            cell("full", "on", "on", base, |_| {}),
            cell("without_global", "on", "off", base, |m| m.use_global = false),
            cell("without_local", "off", "on", base, |m| m.use_local = false),
            cell("without_mixture", "sum", "sum", base, |m| m.mixture = MixtureMode::Sum),
            cell("without_seatt", "no seatt", "no seatt", base, |m| m.use_seatt = false),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ndcg10: Option<f64>,
    pub recall10: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub local: String,
    pub global: String,
    pub seeds: Vec<SeedResult>,
    /// Means over the seeds that completed.
    pub mean_ndcg10: Option<f64>,
    pub mean_recall10: Option<f64>,
    pub failed: bool,
}

impl AblationRow {
    pub fn new(cell: &Cell, seeds: Vec<SeedResult>) -> Self {
        let mean = |f: fn(&SeedResult) -> Option<f64>| {
            let v: Vec<f64> = seeds.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            cell: cell.name.clone(),
            local: cell.local.clone(),
            global: cell.global.clone(),
            mean_ndcg10: mean(|s| s.ndcg10),
            mean_recall10: mean(|s| s.recall10),
            failed: seeds.iter().any(|s| s.error.is_some()),
            seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: GridKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.failed)
    }

    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut head = vec!["cell".to_string(), "local".into(), "global".into()];
        for s in &self.seeds {
            head.push(format!("ndcg10_seed{s}"));
            head.push(format!("recall10_seed{s}"));
        }
        head.extend(["mean_ndcg10".into(), "mean_recall10".into(), "status".into()]);
        let mut out = head.join(",") + "\n";
        for r in &self.rows {
            let mut f = vec![r.cell.clone(), r.local.clone(), r.global.clone()];
            for s in &r.seeds {
                f.push(opt(s.ndcg10));
                f.push(opt(s.recall10));
            }
            f.push(opt(r.mean_ndcg10));
            f.push(opt(r.mean_recall10));
            f.push(if r.failed { "failed" } else { "ok" }.into());
            out += &(f.join(",") + "\n");
        }
        out
    }
}
