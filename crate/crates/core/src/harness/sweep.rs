//! Phase-diagram sweeps with a resumable manifest, and aggregation of
//! result tables into plot data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::DatasetSpec;
use super::data::{init_ensemble, InitLaw};
use crate::diagnostics::{finite_vs_limit, FiniteLimitSpec, MAX_STEPS};
use crate::error::{Error, Result};
use crate::finite::{self, StepConfig, Variant};
use crate::limit::{HyperSchedule, Phase};
use crate::model::{FeatureKind, FeatureMap, Model};
use crate::numeric::mean_and_stderr;
use crate::record::Recorder;

fn default_points() -> usize {
    2
}

fn default_ref_factor() -> usize {
    4
}

fn default_flow_step() -> f64 {
    1e-2
}

/// A grid of schedules crossed with widths and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub feature: FeatureKind,
    pub dataset: DatasetSpec,
    pub schedules: Vec<HyperSchedule>,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Rescaled horizon; a step count for discrete-jump cells.
    pub horizon: f64,
    /// Measurements per cell, equally spaced up to the horizon.
    #[serde(default = "default_points")]
    pub measure_points: usize,
    /// Reference width as a multiple of the largest width.
    #[serde(default = "default_ref_factor")]
    pub ref_factor: usize,
    #[serde(default = "default_flow_step")]
    pub flow_step: f64,
    #[serde(default)]
    pub init: Option<InitLaw>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        for s in &self.schedules {
            s.validate()?;
        }
        if self.schedules.is_empty() || self.widths.is_empty() || self.seeds.is_empty() {
            return Err(Error::param("sweep grid has an empty axis"));
        }
        if self.widths.contains(&0) {
            return Err(Error::param("widths must be positive"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::param("sweep horizon must be positive"));
        }
        if self.measure_points == 0 || self.ref_factor == 0 {
            return Err(Error::param("measure_points and ref_factor must be positive"));
        }
        if self.flow_step.is_nan() || self.flow_step <= 0.0 {
            return Err(Error::param("flow_step must be positive"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: Self = serde_json::from_str(&text)?;
        grid.validate()?;
        Ok(grid)
    }

    /// Cells in merge order: schedule, then width, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let n_ref = self.ref_factor * self.widths.iter().copied().max().unwrap_or(0);
        let mut out = Vec::new();
        for (si, s) in self.schedules.iter().enumerate() {
            for &n in &self.widths {
                for &seed in &self.seeds {
                    out.push(Cell {
                        id: format!("s{si:03}-n{n:07}-r{seed}"),
                        schedule: *s,
                        n,
                        n_ref,
                        seed,
                    });
                }
            }
        }
        out
    }

    fn measure_times(&self, phase: &Phase) -> Vec<f64> {
        let m = self.measure_points;
        (1..=m)
            .map(|j| {
                let t = self.horizon * j as f64 / m as f64;
                if matches!(phase, Phase::DiscreteJump { .. }) {
                    t.round()
                } else {
                    t
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub id: String,
    pub schedule: HyperSchedule,
    pub n: usize,
    pub n_ref: usize,
    pub seed: u64,
}

/// One sweep measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub tau0: f64,
    pub q0: f64,
    pub a: f64,
    pub b: f64,
    pub phase: String,
    pub n: usize,
    pub seed: u64,
    pub time: f64,
    pub metric: String,
    pub value: f64,
}

/// Completed cells and the hashes of the configurations that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cells: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn store(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Summary of a sweep invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutcome {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub rows: usize,
    pub table: PathBuf,
}

/// Everything that determines a cell's output, hashed into the manifest.
#[derive(Serialize)]
struct CellEcho<'a> {
    feature: FeatureKind,
    dataset: &'a DatasetSpec,
    cell: &'a Cell,
    horizon: f64,
    measure_points: usize,
    flow_step: f64,
    init: Option<InitLaw>,
}

fn cell_echo(grid: &SweepGrid, cell: &Cell) -> Result<String> {
    Ok(serde_json::to_string(&CellEcho {
        feature: grid.feature,
        dataset: &grid.dataset,
        cell,
        horizon: grid.horizon,
        measure_points: grid.measure_points,
        flow_step: grid.flow_step,
        init: grid.init,
    })?)
}

fn hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn run_cell(model: &Model, grid: &SweepGrid, cell: &Cell) -> Result<Vec<SweepRow>> {
    let s = cell.schedule;
    let phase = s.classify();
    let law = grid
        .init
        .unwrap_or_else(|| InitLaw::standard(model.map().input_dim()));
    let times = grid.measure_times(&phase);
    let measured: Vec<(f64, String, f64)> = if phase.is_degenerate() {
        degenerate_losses(model, &s, cell, &law, &times)?
    } else {
        let spec = FiniteLimitSpec {
            schedule: s,
            horizon: times.last().copied().unwrap_or(grid.horizon),
            measure_times: times,
            path_points: grid.measure_points,
            tracked: 0,
            flow_step: grid.flow_step,
            law,
        };
        finite_vs_limit(model, &spec, cell.n, cell.n_ref, cell.seed)?
            .into_iter()
            .filter(|r| r.metric.starts_with("w1"))
            .map(|r| (r.time, r.metric, r.value))
            .collect()
    };
    Ok(measured
        .into_iter()
        .map(|(time, metric, value)| SweepRow {
            cell: cell.id.clone(),
            tau0: s.tau0,
            q0: s.q0,
            a: s.a,
            b: s.b,
            phase: phase.numeral().to_string(),
            n: cell.n,
            seed: cell.seed,
            time,
            metric,
            value,
        })
        .collect())
}

/// Degenerate schedules have no limit to compare against; report the
/// finite run's loss at time `k tau`.
fn degenerate_losses(
    model: &Model,
    s: &HyperSchedule,
    cell: &Cell,
    law: &InitLaw,
    times: &[f64],
) -> Result<Vec<(f64, String, f64)>> {
    let tau = s.tau(cell.n);
    let cfg = StepConfig::new(tau, s.q(cell.n), Variant::Dropout)?;
    let init = init_ensemble(cell.n, model.param_dim(), law, cell.seed)?;
    let ckpts: Vec<u64> = times.iter().map(|t| (t / tau + 1e-9).floor() as u64).collect();
    let last = ckpts.iter().copied().max().unwrap_or(0);
    if last > MAX_STEPS {
        return Err(Error::param(format!("degenerate cell needs {last} steps")));
    }
    let (record, _) = finite::run(model, &init, &cfg, cell.seed, last, &Recorder::every_step(0))?;
    Ok(ckpts
        .iter()
        .zip(times)
        .map(|(&k, &t)| (t, "loss".to_string(), record.snapshots[k as usize].loss))
        .collect())
}

fn write_rows(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Runs every cell of `grid` not already recorded in `out/manifest.json`
/// with a matching configuration hash, then merges all cell tables in cell
/// order into `out/sweep.csv`. A failing cell is logged with its
/// configuration and left out of the manifest.
pub fn sweep(grid: &SweepGrid, out: &Path) -> Result<SweepOutcome> {
    grid.validate()?;
    let data = grid.dataset.load(grid.feature)?;
    let model = Model::new(FeatureMap::new(grid.feature, data.input_dim()), data)?;
    let cell_dir = out.join("cells");
    std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
    let manifest_path = out.join("manifest.json");
    let manifest = Mutex::new(Manifest::load_or_default(&manifest_path)?);

    let cells = grid.cells();
    let results: Vec<(String, std::result::Result<bool, String>)> = cells
        .par_iter()
        .map(|cell| {
            let outcome = (|| -> Result<bool> {
                let echo = cell_echo(grid, cell)?;
                let digest = hash(&echo);
                let path = cell_dir.join(format!("{}.csv", cell.id));
                let done = manifest.lock().unwrap().cells.get(&cell.id) == Some(&digest);
                if done && path.exists() {
                    return Ok(false);
                }
                match run_cell(&model, grid, cell) {
                    Ok(rows) => {
                        write_rows(&rows, &path)?;
                        let mut m = manifest.lock().unwrap();
                        m.cells.insert(cell.id.clone(), digest);
                        m.store(&manifest_path)?;
                        Ok(true)
                    }
                    Err(e) => {
                        log::error!("cell {} failed: {e}; config {echo}", cell.id);
                        Err(e)
                    }
                }
            })();
            (cell.id.clone(), outcome.map_err(|e| e.to_string()))
        })
        .collect();

    let mut outcome = SweepOutcome {
        table: out.join("sweep.csv"),
        ..SweepOutcome::default()
    };
    let mut merged = Vec::new();
    for (id, res) in results {
        match res {
            Ok(ran) => {
                merged.extend(read_rows(&cell_dir.join(format!("{id}.csv")))?);
                if ran {
                    outcome.ran.push(id);
                } else {
                    outcome.skipped.push(id);
                }
            }
            Err(e) => outcome.failed.push((id, e)),
        }
    }
    outcome.rows = merged.len();
    write_rows(&merged, &outcome.table)?;
    Ok(outcome)
}

#[derive(Debug, Deserialize)]
struct ReportRow {
    #[serde(default)]
    phase: Option<String>,
    n: usize,
    time: f64,
    metric: String,
    value: f64,
}

/// Aggregates measurement tables (sweep or coupling CSVs with columns `n`,
/// `time`, `metric`, `value` and optionally `phase`) into one
/// `plot_<metric>.csv` per metric with columns
/// `phase,n,time,mean,stderr,count`. Non-finite values are dropped.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    type Key = (String, usize, u64);
    let mut groups: BTreeMap<String, BTreeMap<Key, Vec<f64>>> = BTreeMap::new();
    for input in inputs {
        let mut r = csv::Reader::from_path(input)?;
        for row in r.deserialize() {
            let row: ReportRow = row?;
            if !row.value.is_finite() || row.time < 0.0 {
                continue;
            }
            groups
                .entry(row.metric)
                .or_default()
                .entry((row.phase.unwrap_or_default(), row.n, row.time.to_bits()))
                .or_default()
                .push(row.value);
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (metric, cells) in groups {
        let safe: String = metric
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
            .collect();
        let path = out.join(format!("plot_{safe}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["phase", "n", "time", "mean", "stderr", "count"])?;
        for ((phase, n, time), values) in cells {
            let (mean, se) = mean_and_stderr(&values);
            w.write_record([
                phase,
                n.to_string(),
                f64::from_bits(time).to_string(),
                mean.to_string(),
                se.to_string(),
                values.len().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
