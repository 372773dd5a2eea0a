//! Cross-validated experiments over sampling × patching × backbone × configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{Patching, Sampling};
use crate::metrics::METRIC_NAMES;
use crate::model::{Backbone, Configuration, ModelConfig};
use crate::train::{cross_validate, CvOptions, CvReport, CvSummary, Dataset, TrainSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub sampling: Sampling,
    pub patching: Patching,
    pub backbone: Backbone,
    pub configuration: Configuration,
}

impl GridCell {
    /// File-safe identifier, e.g. `grid-random-vit-kan-kan`.
    pub fn id(&self) -> String {
        format!(
            "{}-{}-{}-{}",
            self.sampling, self.patching, self.backbone, self.configuration
        )
    }

    /// All 32 cells, sampling-major.
    pub fn full_grid() -> Vec<GridCell> {
        let mut cells = Vec::with_capacity(32);
        for sampling in [Sampling::Grid, Sampling::Random] {
            for patching in [Patching::Random, Patching::Iterative] {
                for backbone in [Backbone::Vit, Backbone::Deit] {
                    for configuration in Configuration::ALL {
                        cells.push(GridCell {
                            sampling,
                            patching,
                            backbone,
                            configuration,
                        });
                    }
                }
            }
        }
        cells
    }

    /// Rows compete for best/second-best only within one group.
    fn group(&self) -> (Sampling, Patching, Backbone) {
        (self.sampling, self.patching, self.backbone)
    }
}

impl std::str::FromStr for GridCell {
    type Err = Error;

    /// Parses the form produced by [`GridCell::id`].
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.splitn(4, '-');
        let mut next = || {
            parts
                .next()
                .ok_or_else(|| Error::validation(format!("malformed cell id '{s}'")))
        };
        Ok(GridCell {
            sampling: next()?.parse()?,
            patching: next()?.parse()?,
            backbone: next()?.parse()?,
            configuration: next()?.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: GridCell,
    pub summary: CvSummary,
    /// Metrics where this row has the highest mean of its group.
    pub best: Vec<String>,
    /// Metrics where this row has the second-highest distinct mean of its group.
    pub second: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub base_config: ModelConfig,
    pub train_spec: TrainSpec,
    pub rows: Vec<GridRow>,
}

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Each finished cell is written to `<out_dir>/cells/<id>.json`; existing
    /// files produced with the same settings are reused instead of rerun.
    pub out_dir: Option<PathBuf>,
    /// Cells run concurrently; 0 means the rayon default.
    pub jobs: usize,
}

pub fn cell_path(dir: &Path, cell: &GridCell) -> PathBuf {
    dir.join("cells").join(format!("{}.json", cell.id()))
}

/// Contents of `cells/<id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: GridCell,
    pub report: CvReport,
}

fn run_cell(
    cell: &GridCell,
    data: &Dataset,
    base: &ModelConfig,
    spec: &TrainSpec,
    out_dir: Option<&Path>,
) -> Result<CvReport> {
    let config = ModelConfig {
        backbone: cell.backbone,
        n_anchors: data.n_anchors().unwrap_or(base.n_anchors),
        ..base.clone()
    }
    .with_configuration(cell.configuration);
    if let Some(dir) = out_dir {
        let path = cell_path(dir, cell);
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(rec) = serde_json::from_slice::<CellRecord>(&bytes) {
                if rec.cell == *cell && rec.report.model_config == config && rec.report.train_spec == *spec {
                    return Ok(rec.report);
                }
            }
        }
    }
    let report = cross_validate(data, &config, spec, &CvOptions::default())?;
    if let Some(dir) = out_dir {
        let path = cell_path(dir, cell);
        let parent = path.parent().expect("cells dir");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let rec = CellRecord {
            cell: *cell,
            report: report.clone(),
        };
        fs::write(&path, serde_json::to_vec_pretty(&rec)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// One cross-validation per cell, using the dataset extracted for the cell's
/// (sampling, patching) pair.
pub fn run_experiment_grid(
    datasets: &BTreeMap<(Sampling, Patching), Dataset>,
    cells: &[GridCell],
    base_config: &ModelConfig,
    spec: &TrainSpec,
    options: &GridOptions,
) -> Result<(ResultsTable, Vec<CvReport>)> {
    if cells.is_empty() {
        return Err(Error::validation("empty experiment grid"));
    }
    spec.validate()?;
    for cell in cells {
        if !datasets.contains_key(&(cell.sampling, cell.patching)) {
            return Err(Error::validation(format!(
                "no features for {} sampling with {} patching",
                cell.sampling, cell.patching
            )));
        }
    }
    let out = options.out_dir.as_deref();
    let run = || -> Result<Vec<CvReport>> {
        cells
            .par_iter()
            .map(|c| run_cell(c, &datasets[&(c.sampling, c.patching)], base_config, spec, out))
            .collect()
    };
    let reports = if options.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| Error::validation(e.to_string()))?
            .install(run)?
    } else {
        run()?
    };
    let mut rows: Vec<GridRow> = cells
        .iter()
        .zip(&reports)
        .map(|(cell, r)| GridRow {
            cell: *cell,
            summary: r.summary.clone(),
            best: Vec::new(),
            second: Vec::new(),
        })
        .collect();
    flag_best(&mut rows);
    Ok((
        ResultsTable {
            base_config: base_config.clone(),
            train_spec: spec.clone(),
            rows,
        },
        reports,
    ))
}

/// Marks, per group and metric, the rows at the highest and second-highest
/// distinct mean; tied rows share a flag.
pub fn flag_best(rows: &mut [GridRow]) {
    let mut groups: BTreeMap<(Sampling, Patching, Backbone), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(r.cell.group()).or_default().push(i);
    }
    for r in rows.iter_mut() {
        r.best.clear();
        r.second.clear();
    }
    for members in groups.values() {
        for m in METRIC_NAMES {
            let means: Vec<f64> = members
                .iter()
                .map(|&i| rows[i].summary.get(m).map_or(f64::NAN, |v| v.mean))
                .collect();
            let top = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let next = means
                .iter()
                .copied()
                .filter(|&v| v < top)
                .fold(f64::NEG_INFINITY, f64::max);
            for (&i, &v) in members.iter().zip(&means) {
                if v == top {
                    rows[i].best.push(m.to_string());
                } else if v == next {
                    rows[i].second.push(m.to_string());
                }
            }
        }
    }
}

impl ResultsTable {
    /// One row per cell: identifiers, `<metric>_mean`/`<metric>_std` pairs, then flags.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "sampling".to_string(),
            "patching".into(),
            "backbone".into(),
            "configuration".into(),
        ];
        for m in METRIC_NAMES {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        header.push("best".into());
        header.push("second".into());
        let err = |e: csv::Error| Error::Malformed(e.to_string());
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.cell.sampling.to_string(),
                r.cell.patching.to_string(),
                r.cell.backbone.to_string(),
                r.cell.configuration.to_string(),
            ];
            for m in METRIC_NAMES {
                let v = r.summary.get(m).expect("summary covers every metric");
                rec.push(v.mean.to_string());
                rec.push(v.std.to_string());
            }
            rec.push(r.best.join(";"));
            rec.push(r.second.join(";"));
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Malformed(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()?).map_err(|e| Error::io(csv_path, e))?;
        fs::write(json_path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(json_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::MeanStd;

    fn row(cell: GridCell, acc: f64) -> GridRow {
        GridRow {
            cell,
            summary: CvSummary {
                metrics: METRIC_NAMES
                    .iter()
                    .map(|m| (m.to_string(), MeanStd { mean: if *m == "acc" { acc } else { 0.5 }, std: 0.0 }))
                    .collect(),
            },
            best: vec![],
            second: vec![],
        }
    }

    #[test]
    fn full_grid_has_32_distinct_cells() {
        let cells = GridCell::full_grid();
        assert_eq!(cells.len(), 32);
        let ids: std::collections::HashSet<_> = cells.iter().map(GridCell::id).collect();
        assert_eq!(ids.len(), 32);
        for c in &cells {
            assert_eq!(c.id().parse::<GridCell>().unwrap(), *c);
        }
        assert!("grid-random-vit".parse::<GridCell>().is_err());
    }

    #[test]
    fn flags_respect_groups_and_ties() {
        let cells = GridCell::full_grid();
        let mut rows: Vec<GridRow> = cells[..8]
            .iter()
            .zip([0.7, 0.9, 0.8, 0.9, 0.1, 0.2, 0.3, 0.4])
            .map(|(c, a)| row(*c, a))
            .collect();
        flag_best(&mut rows);
        let has = |r: &GridRow, m: &str| r.best.iter().any(|x| x == m);
        let sec = |r: &GridRow, m: &str| r.second.iter().any(|x| x == m);
        // vit group: 0.7, 0.9, 0.8, 0.9
        assert!(has(&rows[1], "acc") && has(&rows[3], "acc"));
        assert!(sec(&rows[2], "acc") && !sec(&rows[0], "acc"));
        // deit group: 0.1 .. 0.4
        assert!(has(&rows[7], "acc") && sec(&rows[6], "acc"));
        // constant columns: everyone ties for best
        assert!(rows.iter().all(|r| has(r, "auc") && !sec(r, "auc")));
    }
}
