use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::FeatureCache;
use super::train::{train, RunOutput};
use super::Config;
use crate::featbank::Source;
use crate::params::ParamStore;
use crate::synth::Dataset;
use crate::{Error, Result};

pub const RESULTS_HEADER: &str = "cell_id,dvfe,scl,isl,alpha,seed,rec_acc,res_miou";
pub const SUMMARY_HEADER: &str =
    "cell_id,dvfe,scl,isl,alpha,runs,failed,rec_acc_mean,rec_acc_std,res_miou_mean,res_miou_std";

/// One configuration of the ablation table, applied on top of a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub dvfe: bool,
    pub scl: bool,
    pub isl: bool,
    pub alpha: f64,
    pub bank: Option<Vec<Source>>,
}

impl Cell {
    pub fn new(id: &str, dvfe: bool, scl: bool, isl: bool, alpha: f64) -> Self {
        Self {
            id: id.into(),
            dvfe,
            scl,
            isl,
            alpha,
            bank: None,
        }
    }

    /// `base` with this cell's switches. SCL off zeroes its weight; ISL off
    /// keeps the segmentation term but leaves every gate open.
    pub fn apply(&self, base: &Config) -> Config {
        let mut c = base.clone();
        c.use_dvfe = self.dvfe;
        c.use_isl = self.isl;
        c.lambda_scl = if self.scl {
            if base.lambda_scl > 0.0 {
                base.lambda_scl
            } else {
                1.0
            }
        } else {
            0.0
        };
        c.alpha = self.alpha;
        if let Some(b) = &self.bank {
            c.bank = b.clone();
        }
        c
    }
}

/// Named grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Baseline, then DVFE, SCL and ISL added one at a time.
    Components,
    /// SCL × ISL with DVFE on.
    Ccm,
    /// DVFE off, then bank subsets with DVFE on.
    Dvfe,
    /// Full model at α ∈ {0.1, 0.2, 0.3, 0.4}.
    Alpha,
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "components" => Grid::Components,
            "ccm" => Grid::Ccm,
            "dvfe" => Grid::Dvfe,
            "alpha" => Grid::Alpha,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown grid {other:?} (expected components, ccm, dvfe or alpha)"
                )))
            }
        })
    }
}

pub fn grid_cells(grid: Grid, base: &Config) -> Vec<Cell> {
    let a = base.alpha;
    match grid {
        Grid::Components => vec![
            Cell::new("baseline", false, false, false, a),
            Cell::new("dvfe", true, false, false, a),
            Cell::new("dvfe_scl", true, true, false, a),
            Cell::new("dvfe_scl_isl", true, true, true, a),
        ],
        Grid::Ccm => vec![
            Cell::new("scl0_isl0", true, false, false, a),
            Cell::new("scl1_isl0", true, true, false, a),
            Cell::new("scl0_isl1", true, false, true, a),
            Cell::new("scl1_isl1", true, true, true, a),
        ],
        Grid::Dvfe => {
            let mut cells = vec![Cell::new("dvfe_off", false, true, true, a)];
            for bank in [
                vec![Source::Dark],
                vec![Source::Dark, Source::Dino],
                vec![Source::Dark, Source::Sam],
                Source::ALL.to_vec(),
            ] {
                let id = bank.iter().map(|s| s.tag()).collect::<Vec<_>>().join("+");
                cells.push(Cell {
                    bank: Some(bank),
                    ..Cell::new(&id, true, true, true, a)
                });
            }
            cells
        }
        Grid::Alpha => [0.1, 0.2, 0.3, 0.4]
            .iter()
            .map(|&al| Cell::new(&format!("alpha_{al}"), true, true, true, al))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: Cell,
    pub seed: u64,
    /// `None` when the run aborted.
    pub metrics: Option<(f64, f64)>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub runs: usize,
    pub failed: usize,
    pub rec_acc_mean: f64,
    pub rec_acc_std: f64,
    pub res_miou_mean: f64,
    pub res_miou_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<RunResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl AblationTable {
    pub fn summaries(&self) -> Vec<CellSummary> {
        let mut ids: Vec<&Cell> = Vec::new();
        for r in &self.runs {
            if !ids.iter().any(|c| c.id == r.cell.id) {
                ids.push(&r.cell);
            }
        }
        ids.into_iter()
            .map(|cell| {
                let runs: Vec<&RunResult> = self.runs.iter().filter(|r| r.cell.id == cell.id).collect();
                let ok: Vec<(f64, f64)> = runs.iter().filter_map(|r| r.metrics).collect();
                let (rm, rs) = mean_std(&ok.iter().map(|m| m.0).collect::<Vec<_>>());
                let (sm, ss) = mean_std(&ok.iter().map(|m| m.1).collect::<Vec<_>>());
                CellSummary {
                    cell: cell.clone(),
                    runs: runs.len(),
                    failed: runs.len() - ok.len(),
                    rec_acc_mean: rm,
                    rec_acc_std: rs,
                    res_miou_mean: sm,
                    res_miou_std: ss,
                }
            })
            .collect()
    }

    pub fn summary(&self, id: &str) -> Option<CellSummary> {
        self.summaries().into_iter().find(|s| s.cell.id == id)
    }

    /// One row per (cell, seed); aborted runs carry `failed` in the metric columns.
    pub fn results_csv(&self) -> String {
        let mut s = format!("{RESULTS_HEADER}\n");
        for r in &self.runs {
            let c = &r.cell;
            let metrics = match r.metrics {
                Some((a, m)) => format!("{a},{m}"),
                None => "failed,failed".into(),
            };
            s.push_str(&format!("{},{},{},{},{},{},{metrics}\n", c.id, c.dvfe, c.scl, c.isl, c.alpha, r.seed));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for m in self.summaries() {
            let c = &m.cell;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                c.id,
                c.dvfe,
                c.scl,
                c.isl,
                c.alpha,
                m.runs,
                m.failed,
                m.rec_acc_mean,
                m.rec_acc_std,
                m.res_miou_mean,
                m.res_miou_std
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.results_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        Ok(())
    }
}

/// Trains every cell once per seed. A run that errors is recorded as failed
/// and the remaining runs continue. `progress` sees each finished run.
pub fn run_ablation(
    base: &Config,
    cells: &[Cell],
    seeds: &[u64],
    dataset: &Dataset,
    cache: &FeatureCache,
    detector: &ParamStore,
    mut progress: impl FnMut(&RunResult),
) -> AblationTable {
    let mut table = AblationTable::default();
    for cell in cells {
        for &seed in seeds {
            let config = Config {
                seed,
                ..cell.apply(base)
            };
            let outcome = train(&config, dataset, cache, detector, &RunOutput::default());
            let r = match outcome {
                Ok(o) => RunResult {
                    cell: cell.clone(),
                    seed,
                    metrics: Some((o.test.rec_acc, o.test.res_miou)),
                    error: None,
                },
                Err(e) => RunResult {
                    cell: cell.clone(),
                    seed,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            };
            progress(&r);
            table.runs.push(r);
        }
    }
    table
}
